"""Prompt-able shifted-window block.

Four residual sublayers: windowed PMA, linear, shifted-window PMA, linear,
each preceded by an instance norm over the content. Prompt tokens bypass the
norms. Maps whose sides are not a multiple of the window are zero-padded at
the bottom/right for the attention sublayers and the padded keys are masked.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import PMA, SlotPrompt
from .windowing import roll, window_partition, window_reverse


class InstanceNorm(nn.Module):
    """Per-sample, per-channel norm over the spatial axes of a ``(B, H, W, C)`` map."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def normalize(self, x: Tensor) -> Tensor:
        mean = x.mean(dim=(-3, -2), keepdim=True)
        var = x.var(dim=(-3, -2), unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.normalize(x) * self.weight + self.bias


class Adapter(nn.Module):
    """Residual ``x + W act(IN(x))``; zero-initialised so it starts as identity."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = InstanceNorm(dim)
        self.linear = nn.Linear(dim, dim)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.linear(F.leaky_relu(self.norm(x), 0.01))


class PSWinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, bias_channels: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.shift = window // 2
        self.norm1 = InstanceNorm(dim)
        self.attn1 = PMA(dim, heads, window, bias_channels)
        self.norm2 = InstanceNorm(dim)
        self.lin1 = nn.Linear(dim, dim)
        self.norm3 = InstanceNorm(dim)
        self.attn2 = PMA(dim, heads, window, bias_channels)
        self.norm4 = InstanceNorm(dim)
        self.lin2 = nn.Linear(dim, dim)
        self.adapter: Adapter | None = None

    def add_adapter(self) -> Adapter:
        if self.adapter is None:
            ref = self.lin1.weight
            self.adapter = Adapter(self.dim).to(device=ref.device, dtype=ref.dtype)
        return self.adapter

    def _attend(self, layer: PMA, x: Tensor, prompt: SlotPrompt | None, shift: int) -> Tensor:
        b, h, w, c = x.shape
        win = self.window
        ph, pw = (-h) % win, (-w) % win
        valid = None
        if ph or pw:
            x = F.pad(x, (0, 0, 0, pw, 0, ph))
            valid = torch.zeros(h + ph, w + pw, 1, dtype=torch.bool, device=x.device)
            valid[:h, :w] = True
        if shift:
            x = roll(x, (-shift, -shift))
            if valid is not None:
                valid = roll(valid, (-shift, -shift))
        xw = window_partition(x, win)
        key_valid = window_partition(valid, win)[..., 0] if valid is not None else None
        out = window_reverse(layer(xw, prompt, key_valid), win, (h + ph, w + pw))
        if shift:
            out = roll(out, (shift, shift))
        return out[:, :h, :w]

    def forward(self, x: Tensor, p1: SlotPrompt | None = None, p2: SlotPrompt | None = None) -> Tensor:
        """``x`` is ``(B, H, W, C)``; ``p1``/``p2`` feed the windowed and shifted PMA."""
        for p in (p1, p2):
            if p is not None and p.tokens.shape[-1] != self.dim:
                raise ValueError(f"prompt width {p.tokens.shape[-1]} != block width {self.dim}")
        x = x + self._attend(self.attn1, self.norm1(x), p1, 0)
        x = x + self.lin1(self.norm2(x))
        x = x + self._attend(self.attn2, self.norm3(x), p2, self.shift)
        x = x + self.lin2(self.norm4(x))
        if self.adapter is not None:
            x = self.adapter(x)
        return x


def pswin_forward(block: PSWinBlock, x: Tensor, p1: SlotPrompt | None = None, p2: SlotPrompt | None = None) -> Tensor:
    return block(x, p1, p2)
