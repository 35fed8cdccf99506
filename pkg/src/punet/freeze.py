"""Adaptation schemes as trainable masks, plus the optimizer plumbing that
honours them.

Parameters are addressed through one flat registry: ``model.<name>`` for the
backbone (and its optional head/adapters) and ``prompts.<name>`` for the
prompt store.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import SCHEMES


def registry(model: nn.Module, store: nn.Module | None = None) -> dict[str, nn.Parameter]:
    params = {f"model.{n}": p for n, p in model.named_parameters()}
    if store is not None:
        params.update({f"prompts.{n}": p for n, p in store.named_parameters()})
    return params


def is_prompt_token(name: str) -> bool:
    return name.startswith("prompts.") and (".tokens." in name or name.endswith(".seg"))


def is_prompt_bias(name: str) -> bool:
    return (name.startswith("prompts.") and ".bias_emb." in name) or name.endswith("bias_table.w_prompt")


def is_prompt_param(name: str) -> bool:
    return is_prompt_token(name) or is_prompt_bias(name)


def is_head(name: str) -> bool:
    return name.startswith("model.head.")


def is_adapter(name: str) -> bool:
    return name.startswith("model.") and ".adapter." in name


def is_backbone(name: str) -> bool:
    return name.startswith("model.") and not (is_head(name) or is_adapter(name))


def is_bias_or_norm(name: str) -> bool:
    """Additive bias vectors and normalization affine parameters of the backbone."""
    if not is_backbone(name):
        return False
    parts = name.split(".")
    return parts[-1] == "bias" or "bn" in parts or any(p.startswith("norm") for p in parts)


def is_decoder(name: str) -> bool:
    return name.startswith("model.fuse.") or name.startswith("model.dec.")


_RULES = {
    "fixed": lambda n: is_head(n),
    "bias": lambda n: is_bias_or_norm(n),
    "prompt_no_bias": lambda n: is_prompt_token(n),
    "prompt": lambda n: is_prompt_param(n),
    "bias_plus_prompt": lambda n: is_prompt_param(n) or is_bias_or_norm(n),
    "adapter": lambda n: is_adapter(n),
    "decoder": lambda n: is_decoder(n) and not is_adapter(n),
    "full": lambda n: is_backbone(n) or is_adapter(n) or n.startswith("prompts."),
    "full_fixed": lambda n: is_backbone(n) or is_head(n),
}


@dataclass
class TrainableMask:
    flags: dict[str, bool]
    scheme: str = ""

    def trainable(self) -> list[str]:
        return [n for n, f in self.flags.items() if f]

    def frozen(self) -> list[str]:
        return [n for n, f in self.flags.items() if not f]

    def count(self, params: dict[str, torch.Tensor], trainable: bool = True) -> int:
        return sum(params[n].numel() for n, f in self.flags.items() if f == trainable)

    def apply(self, params: dict[str, nn.Parameter]) -> None:
        if set(params) != set(self.flags):
            raise ValueError("mask does not cover the parameter registry exactly")
        for n, p in params.items():
            p.requires_grad_(self.flags[n])


def freeze_policy(model: nn.Module, store: nn.Module | None, scheme: str) -> TrainableMask:
    if scheme not in _RULES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    rule = _RULES[scheme]
    return TrainableMask({n: bool(rule(n)) for n in registry(model, store)}, scheme)


def checksum(tensors: dict[str, torch.Tensor], names=None) -> str:
    h = hashlib.sha256()
    for n in sorted(names if names is not None else tensors):
        h.update(n.encode())
        h.update(np.ascontiguousarray(tensors[n].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def build_optimizer(
    params: dict[str, nn.Parameter],
    mask: TrainableMask,
    lr_net: float,
    lr_prompt: float,
    weight_decay: float = 0.0,
    kind: str = "adamw",
) -> torch.optim.Optimizer | None:
    """Optimizer over the trainable subset only, so frozen tensors are never touched.

    Prompt parameters (tokens and prompt-bias scores) use ``lr_prompt`` and no
    weight decay; everything else trainable uses ``lr_net`` and decoupled
    decay. ``kind='sgd'`` is the momentum-free sanity mode.
    """
    mask.apply(params)
    net = [p for n, p in params.items() if mask.flags[n] and not is_prompt_param(n)]
    prompt = [p for n, p in params.items() if mask.flags[n] and is_prompt_param(n)]
    groups = []
    if net:
        groups.append({"params": net, "lr": lr_net, "weight_decay": weight_decay})
    if prompt:
        groups.append({"params": prompt, "lr": lr_prompt, "weight_decay": 0.0})
    if not groups:
        return None
    if kind == "adamw":
        return torch.optim.AdamW(groups)
    if kind == "adam":
        for g in groups:
            g["weight_decay"] = 0.0
        return torch.optim.Adam(groups)
    if kind == "sgd":
        return torch.optim.SGD(groups, momentum=0.0, weight_decay=0.0)
    raise ValueError(f"unknown optimizer {kind!r}")


def one_cycle(optimizer: torch.optim.Optimizer, total_steps: int) -> torch.optim.lr_scheduler.OneCycleLR:
    """Warm up for 30% of the steps from max_lr/25, cosine-anneal to max_lr/1e4."""
    return torch.optim.lr_scheduler.OneCycleLR(
        optimizer,
        max_lr=[g["lr"] for g in optimizer.param_groups],
        total_steps=max(total_steps, 2),
        pct_start=0.3,
        anneal_strategy="cos",
        cycle_momentum=False,
    )


def apply_update(optimizer: torch.optim.Optimizer | None, scheduler=None) -> None:
    if optimizer is None:
        return
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    optimizer.zero_grad(set_to_none=True)
