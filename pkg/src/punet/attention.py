"""Prompt-able multi-head attention over windowed content.

Queries come from the window only. Keys and values are the window followed by
the prompt tokens of the batch element. Scores get an additive bias: a
relative-distance table for content keys and a learned per-token score for
prompt keys, both divided by ``sqrt(bias_channels)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .windowing import WindowedContent

NEG_INF = float("-inf")


@dataclass
class SlotPrompt:
    """Prompt tokens handed to one PMA layer, padded across the batch.

    tokens: (B, Np, C); bias_emb: (B, Np, C_bias); valid: (B, Np) bool.
    """

    tokens: Tensor
    bias_emb: Tensor
    valid: Tensor | None = None

    @property
    def n_prompt(self) -> int:
        return self.tokens.shape[-2]


def relative_index(window: int) -> Tensor:
    """``(N_w, N_w, 2)`` row/col offsets of cell pairs, shifted to be >= 0."""
    rows, cols = torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
    rows, cols = rows.flatten(), cols.flatten()
    d_row = rows[:, None] - rows[None, :] + window - 1
    d_col = cols[:, None] - cols[None, :] + window - 1
    return torch.stack([d_row, d_col], dim=-1)


class BiasTable(nn.Module):
    """Distance embeddings shared by all heads, per-head read-out vectors."""

    def __init__(self, window: int, heads: int, bias_channels: int):
        super().__init__()
        self.window = window
        self.heads = heads
        self.bias_channels = bias_channels
        n_d = 2 * window - 1
        self.E_row = nn.Parameter(torch.empty(n_d, bias_channels).uniform_(-0.02, 0.02))
        self.E_col = nn.Parameter(torch.empty(n_d, bias_channels).uniform_(-0.02, 0.02))
        self.w_row = nn.Parameter(torch.zeros(heads, bias_channels))
        self.w_col = nn.Parameter(torch.zeros(heads, bias_channels))
        self.w_prompt = nn.Parameter(torch.zeros(heads, bias_channels))
        self.register_buffer("rel_index", relative_index(window), persistent=False)

    @property
    def n_distances(self) -> int:
        return self.E_row.shape[0]

    def content(self) -> Tensor:
        """``(heads, N_w, N_w)`` averaged row/column distance bias."""
        b_row = self.E_row @ self.w_row.T  # (n_d, heads)
        b_col = self.E_col @ self.w_col.T
        idx = self.rel_index
        bias = (b_row[idx[..., 0]] + b_col[idx[..., 1]]) / 2
        return bias.permute(2, 0, 1)

    def prompt(self, bias_emb: Tensor) -> Tensor:
        """``(..., Np, C_bias) -> (..., heads, Np)``."""
        return torch.einsum("...pc,hc->...hp", bias_emb, self.w_prompt)


def content_bias(bt: BiasTable, window: int, head: int) -> Tensor:
    if window != bt.window:
        raise ValueError(f"table built for window {bt.window}, asked for {window}")
    return bt.content()[head]


def prompt_bias(bt: BiasTable, bias_emb: Tensor, head: int, n_window_cells: int | None = None) -> Tensor:
    """``N_w x Np`` matrix; every row is the same per-token score."""
    n_w = n_window_cells or bt.window**2
    col = bt.prompt(bias_emb)[..., head, :]
    return col.unsqueeze(-2).expand(*col.shape[:-1], n_w, col.shape[-1])


class PMA(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, bias_channels: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.bias_table = BiasTable(window, heads, bias_channels)

    def _split(self, t: Tensor) -> Tensor:
        # (..., N, C) -> (..., heads, N, head_dim)
        return t.unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)

    def forward(
        self,
        xw: Tensor,
        prompt: SlotPrompt | None = None,
        key_valid: Tensor | None = None,
        return_attention: bool = False,
    ):
        """Attend ``xw`` of shape ``(B, nW, N_w, C)``.

        ``key_valid`` is an optional ``(nW, N_w)`` mask of real (non-padding)
        content cells. Returns ``(B, nW, N_w, C)``, plus the attention
        probabilities ``(B, nW, heads, N_w, N_w + Np)`` when requested.
        """
        if not torch.isfinite(xw).all():
            raise FloatingPointError("non-finite content entering PMA")
        scale = 1.0 / math.sqrt(self.head_dim)
        bias_scale = 1.0 / math.sqrt(self.bias_table.bias_channels)
        q = self._split(self.q(xw))
        k = self._split(self.k(xw))
        v = self._split(self.v(xw))
        scores = (q @ k.transpose(-1, -2)) * scale + self.bias_table.content() * bias_scale
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], NEG_INF)
        n_w = scores.shape[-1]
        if prompt is not None and prompt.n_prompt > 0:
            kp = self._split(self.k(prompt.tokens))  # (B, h, Np, d)
            vp = self._split(self.v(prompt.tokens))
            sp = torch.einsum("bwhnd,bhpd->bwhnp", q, kp) * scale
            sp = sp + (self.bias_table.prompt(prompt.bias_emb) * bias_scale)[:, None, :, None, :]
            if prompt.valid is not None:
                sp = sp.masked_fill(~prompt.valid[:, None, None, None, :], NEG_INF)
            attn = torch.softmax(torch.cat([scores, sp], dim=-1), dim=-1)
            out = attn[..., :n_w] @ v + torch.einsum("bwhnp,bhpd->bwhnd", attn[..., n_w:], vp)
        else:
            attn = torch.softmax(scores, dim=-1)
            out = attn @ v
        out = self.o(out.transpose(-3, -2).flatten(-2))
        return (out, attn) if return_attention else out


def pma_forward(layer: PMA, wc: WindowedContent, prompt: SlotPrompt | None = None) -> WindowedContent:
    """Apply ``layer`` to windowed content; prompts produce no output rows."""
    windows = wc.windows
    squeeze = windows.dim() == 3
    if squeeze:
        windows = windows.unsqueeze(0)
    out = layer(windows, prompt)
    if squeeze:
        out = out.squeeze(0)
    return WindowedContent(out, wc.provenance, wc.shape, wc.window, wc.grid, wc.level_stride, wc.shift)
