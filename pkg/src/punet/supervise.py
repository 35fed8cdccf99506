"""Class-weighted focal loss and the inverse-frequency class-weight heuristic."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

LOG_EPS = 1e-12
ALPHA_CLIP = (0.1, 10.0)


def class_weights(masks: np.ndarray, classes) -> np.ndarray:
    """``alpha_m`` proportional to the inverse mean per-image frequency of class
    ``m``, clipped to ``[0.1, 10]`` and rescaled to mean 1.

    ``masks`` is ``(N, H, W)`` of integer labels; ``classes`` lists the labels
    in prompt order.
    """
    masks = np.asarray(masks)
    flat = masks.reshape(len(masks), -1)
    freq = []
    for c in classes:
        f = (flat == c).mean(axis=1).mean()
        if f <= 0:
            raise ValueError(f"class {c} does not occur in any training mask")
        freq.append(f)
    alpha = 1.0 / np.asarray(freq, dtype=np.float64)
    alpha = alpha / alpha.min()
    alpha = np.clip(alpha, *ALPHA_CLIP)
    return alpha / alpha.mean()


def one_hot(labels: Tensor, classes) -> Tensor:
    """``(B, H, W)`` labels to ``(B, H, W, M)`` indicators over ``classes``."""
    return torch.stack([labels == c for c in classes], dim=-1).to(torch.get_default_dtype())


def focal_loss(probs: Tensor, target: Tensor, gamma: float, alpha: Tensor | None = None,
               valid: Tensor | None = None) -> Tensor:
    """Mean over pixels of ``-sum_m alpha_m (1 - p_true)^gamma log(p_m) y_m``.

    ``probs`` and ``target`` are ``(B, H, W, M)``; ``target`` is one-hot.
    ``alpha`` is ``(M,)`` or ``(B, M)``. ``valid`` optionally masks pixels.
    """
    if probs.shape != target.shape:
        raise ValueError(f"prediction {tuple(probs.shape)} and target {tuple(target.shape)} differ")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    target = target.to(probs.dtype)
    p_true = (probs * target).sum(dim=-1, keepdim=True)
    log_p = torch.log(probs.clamp_min(LOG_EPS))
    term = (1.0 - p_true).clamp_min(0.0) ** gamma * log_p * target
    if alpha is not None:
        alpha = alpha.to(probs.dtype)
        term = term * (alpha if alpha.dim() == 1 else alpha[:, None, None, :])
    per_pixel = -term.sum(dim=-1)
    if valid is None:
        return per_pixel.mean()
    valid = valid.to(probs.dtype)
    return (per_pixel * valid).sum() / valid.sum().clamp_min(1.0)
