"""Prompt token storage and the cosine-similarity segmentation head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .attention import SlotPrompt

EPS = 1e-8
INIT_STD = 0.02


class PromptError(KeyError):
    pass


class TaskPrompts(nn.Module):
    """All learnable prompt state of one task.

    ``tokens[s]`` is ``(M, T, C_s)`` for PMA slot ``s``, ``bias_emb[s]`` is
    ``(M, T, C_bias)`` (the per-token prompt-bias embeddings of that slot) and
    ``seg`` is ``(M, T, C_out)``. Row ``m`` belongs to ``classes[m]``.
    """

    def __init__(self, classes, slot_widths, tokens_per_class, bias_channels, out_channels, generator=None):
        super().__init__()
        self.classes = [int(c) for c in classes]
        m, t = len(self.classes), tokens_per_class

        def draw(*shape):
            return nn.Parameter(torch.randn(*shape, generator=generator) * INIT_STD)

        self.tokens = nn.ParameterList([draw(m, t, c) for c in slot_widths])
        self.bias_emb = nn.ParameterList([draw(m, t, bias_channels) for _ in slot_widths])
        self.seg = draw(m, t, out_channels)


@dataclass
class PromptSet:
    """A view of one task restricted to a class subset (the M axis)."""

    task: str
    classes: list[int]
    tokens: list[Tensor]
    bias_emb: list[Tensor]
    seg: Tensor

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_prompt(self) -> int:
        return self.seg.shape[0] * self.seg.shape[1]


@dataclass
class PromptBatch:
    """Per-element prompt sets stacked (and padded) for a batched forward."""

    slots: list[SlotPrompt]
    seg: Tensor  # (B, M, T, C_out)
    class_valid: Tensor  # (B, M) bool
    classes: list[list[int]]


class PromptStore(nn.Module):
    def __init__(self, slot_widths, tokens_per_class, bias_channels, out_channels):
        super().__init__()
        self.slot_widths = list(slot_widths)
        self.tokens_per_class = tokens_per_class
        self.bias_channels = bias_channels
        self.out_channels = out_channels
        self.tasks = nn.ModuleDict()

    @classmethod
    def for_model(cls, model) -> "PromptStore":
        cfg = model.config
        return cls(model.slot_widths, cfg.tokens_per_class, cfg.bias_channels, cfg.out_channels)

    def add_task(self, name: str, classes, generator: torch.Generator | None = None) -> TaskPrompts:
        if name in self.tasks:
            raise PromptError(f"task {name!r} already registered")
        task = TaskPrompts(
            classes, self.slot_widths, self.tokens_per_class, self.bias_channels, self.out_channels, generator
        )
        self.tasks[name] = task
        return task

    def task_names(self) -> list[str]:
        return list(self.tasks.keys())


def binary_task(cls: int) -> str:
    return f"bin{cls}"


def init_prompts(store: PromptStore, classes, mode: str, seed: int) -> PromptStore:
    """Register tasks for ``classes``: one background/foreground pair per class
    in binary mode, or a single background-plus-classes task in multiclass mode."""
    gen = torch.Generator().manual_seed(seed)
    if mode == "binary":
        for c in classes:
            store.add_task(binary_task(c), [0, c], gen)
    elif mode == "multiclass":
        store.add_task("multi", [0, *classes], gen)
    else:
        raise ValueError(f"prompt mode {mode!r} has no prompt tokens")
    return store


def select_prompts(store: PromptStore, task: str, classes=None) -> PromptSet:
    if task not in store.tasks:
        raise PromptError(f"unknown task {task!r}")
    tp = store.tasks[task]
    if classes is None:
        rows = list(range(len(tp.classes)))
    else:
        missing = [c for c in classes if c not in tp.classes]
        if missing:
            raise PromptError(f"task {task!r} has no class {missing[0]}")
        rows = [tp.classes.index(c) for c in classes]
    idx = torch.tensor(rows, dtype=torch.long)
    return PromptSet(
        task=task,
        classes=[tp.classes[r] for r in rows],
        tokens=[t.index_select(0, idx) for t in tp.tokens],
        bias_emb=[e.index_select(0, idx) for e in tp.bias_emb],
        seg=tp.seg.index_select(0, idx),
    )


def _pad_stack(items: list[Tensor], length: int) -> Tensor:
    out = []
    for t in items:
        pad = length - t.shape[0]
        if pad:
            t = torch.cat([t, t.new_zeros(pad, *t.shape[1:])], dim=0)
        out.append(t)
    return torch.stack(out)


def batch_prompts(sets: list[PromptSet]) -> PromptBatch:
    """Stack per-element prompt sets; ragged ``M`` is padded and masked."""
    m_max = max(s.n_classes for s in sets)
    ragged = any(s.n_classes != m_max for s in sets)
    class_valid = torch.tensor([[m < s.n_classes for m in range(m_max)] for s in sets])
    t = sets[0].seg.shape[1]
    slots = []
    for k in range(len(sets[0].tokens)):
        tokens = _pad_stack([s.tokens[k] for s in sets], m_max).flatten(1, 2)
        bias_emb = _pad_stack([s.bias_emb[k] for s in sets], m_max).flatten(1, 2)
        valid = class_valid.repeat_interleave(t, dim=1) if ragged else None
        slots.append(SlotPrompt(tokens, bias_emb, valid))
    seg = _pad_stack([s.seg for s in sets], m_max)
    return PromptBatch(slots, seg, class_valid, [list(s.classes) for s in sets])


def token_similarity(F: Tensor, seg_tokens: Tensor) -> Tensor:
    """Cosine similarity of every feature to every class token.

    ``F``: ``(B, H, W, C)``; ``seg_tokens``: ``(B, M, T, C)`` or ``(M, T, C)``.
    Returns ``(B, H, W, M, T)`` in ``[-1, 1]``.
    """
    if seg_tokens.dim() == 3:
        seg_tokens = seg_tokens.unsqueeze(0).expand(F.shape[0], *seg_tokens.shape)
    f = F / F.norm(dim=-1, keepdim=True).clamp_min(EPS)
    p = seg_tokens / seg_tokens.norm(dim=-1, keepdim=True).clamp_min(EPS)
    return torch.einsum("bhwc,bmtc->bhwmt", f, p).clamp(-1.0, 1.0)


def aggregate(sim: Tensor, tau: float) -> Tensor:
    """Softmax-weighted mean over the token axis.

    The weights are computed from detached similarities, so the gradient of
    the output with respect to ``sim`` is exactly those weights.
    """
    weights = torch.softmax(sim.detach() / tau, dim=-1)
    return (weights * sim).sum(dim=-1)


def aggregate_variants(sim: Tensor, mode: str = "weighted", k: int | None = None, tau: float = 0.1) -> Tensor:
    n_tokens = sim.shape[-1]
    if mode == "weighted":
        return aggregate(sim, tau)
    if mode == "mean":
        return sim.sum(dim=-1) / n_tokens
    if mode == "topk":
        if k is None or not 1 <= k <= n_tokens:
            raise ValueError(f"top-k needs 1 <= k <= {n_tokens}, got {k}")
        # sum in token order, so k = T reproduces the mean bit for bit
        keep = torch.zeros_like(sim, dtype=torch.bool).scatter(-1, sim.topk(k, dim=-1).indices, True)
        return sim.where(keep, torch.zeros_like(sim)).sum(dim=-1) / k
    raise ValueError(f"unknown aggregation {mode!r}")


def class_probabilities(scores: Tensor, class_valid: Tensor | None = None) -> Tensor:
    """Softmax over the class axis (last); padded classes get probability 0."""
    if class_valid is not None:
        scores = scores.masked_fill(~class_valid[:, None, None, :], float("-inf"))
    return torch.softmax(scores, dim=-1)


def segment_scores(F: Tensor, pb: PromptBatch, tau: float, mode: str = "weighted", k: int | None = None) -> Tensor:
    """Aggregated class similarities ``(B, H, W, M)`` for a prompt batch."""
    return aggregate_variants(token_similarity(F, pb.seg), mode, k, tau)
