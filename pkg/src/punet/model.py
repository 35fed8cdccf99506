"""PUNet: convolutional down/up path with one PSWin block per level and
prompt tokens injected into every PMA layer."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ExperimentConfig
from .pswin import PSWinBlock
from .seghead import PromptBatch

# Kernel sizes of the stride-2 down convolutions and of the skip fusion conv.
DOWN_KERNEL = 3
FUSE_KERNEL = 3


class ConvBNAct(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int):
        super().__init__()
        pad = (kernel - stride + 1) // 2 if stride > 1 else kernel // 2
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=pad, bias=False)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.bn(self.conv(x)), 0.01)


def _down_size(n: int) -> int:
    return (n + 1) // 2


class PUNet(nn.Module):
    """Encoder/decoder returning the half-resolution embedding ``F``.

    ``forward`` takes ``(B, 1, H, W)`` images and returns ``(B, H/2, W/2, C_out)``
    channel-last features. Segmentation heads live outside the backbone:
    prompt similarity in :mod:`punet.seghead`, or ``self.head`` for the
    fixed linear variant.
    """

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        ch = config.channels_per_level
        blk = dict(heads=config.heads, window=config.window_size, bias_channels=config.bias_channels)
        self.embed = ConvBNAct(1, ch[0], 3, config.patch_stride)
        self.down = nn.ModuleList(ConvBNAct(ch[i - 1], ch[i], DOWN_KERNEL, 2) for i in range(1, len(ch)))
        self.enc = nn.ModuleList(PSWinBlock(c, **blk) for c in ch)
        self.fuse = nn.ModuleList(ConvBNAct(ch[i + 1] + ch[i], ch[i], FUSE_KERNEL, 1) for i in range(len(ch) - 1))
        self.dec = nn.ModuleList(PSWinBlock(ch[i], **blk) for i in range(len(ch) - 1))
        self.head: nn.Linear | None = None
        self._check_skips()

    def _check_skips(self) -> None:
        ch = self.config.channels_per_level
        for i, fuse in enumerate(self.fuse):
            if fuse.conv.in_channels != ch[i + 1] + ch[i] or self.dec[i].dim != ch[i]:
                raise ValueError(f"skip fusion at level {i} does not match encoder widths")

    # Blocks in execution order: enc0..enc(L-1), dec(L-2)..dec0. Each block owns
    # ``prompts_per_block`` slots: one set shared by both PMA layers, or two.
    @property
    def blocks(self) -> list[PSWinBlock]:
        return list(self.enc) + [self.dec[i] for i in reversed(range(len(self.dec)))]

    @property
    def slot_widths(self) -> list[int]:
        return [b.dim for b in self.blocks for _ in range(self.config.prompts_per_block)]

    def add_head(self, n_classes: int) -> nn.Linear:
        self.head = nn.Linear(self.config.out_channels, n_classes)
        return self.head

    def add_adapters(self) -> None:
        for b in self.blocks:
            b.add_adapter()

    def forward(self, image: Tensor, prompts: PromptBatch | None = None) -> Tensor:
        slots = prompts.slots if prompts is not None else None
        n_enc = len(self.enc)
        per = self.config.prompts_per_block
        if slots is not None and len(slots) != per * len(self.blocks):
            raise ValueError(f"expected {per * len(self.blocks)} prompt slots, got {len(slots)}")

        def run(block: PSWinBlock, x: Tensor, k: int) -> Tensor:
            if slots is None:
                return block(x)
            return block(x, slots[per * k], slots[per * k + per - 1])

        x = self.embed(image)
        skips = []
        for i, block in enumerate(self.enc):
            if i:
                x = self.down[i - 1](x)
            x = run(block, x.permute(0, 2, 3, 1), i).permute(0, 3, 1, 2)
            skips.append(x)
        for j, i in enumerate(reversed(range(len(self.dec)))):
            skip = skips[i]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = self.fuse[i](torch.cat([x, skip], dim=1))
            x = run(self.dec[i], x.permute(0, 2, 3, 1), n_enc + j).permute(0, 3, 1, 2)
        return x.permute(0, 2, 3, 1)


def build(config: ExperimentConfig) -> PUNet:
    return PUNet(config)


def upsample_scores(scores: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear upsampling of ``(B, h, w, M)`` class scores to the input size."""
    x = F.interpolate(scores.permute(0, 3, 1, 2), size=size, mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1)


def is_backbone_param(name: str) -> bool:
    return not (name.startswith("head.") or ".adapter." in name)


def backbone_parameter_count(model: PUNet) -> int:
    return sum(p.numel() for n, p in model.named_parameters() if is_backbone_param(n))
