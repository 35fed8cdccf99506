"""Central finite-difference checks of autograd gradients in float64.

Each differentiable operation of the model is registered with a small case
builder. A case returns a scalar-valued closure and the leaf tensors (inputs
and parameters) to probe. The registry and the case table must cover each
other exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .attention import PMA, SlotPrompt
from .config import ExperimentConfig
from .model import PUNet
from .pswin import InstanceNorm, PSWinBlock
from .seghead import PromptStore, aggregate, batch_prompts, class_probabilities, init_prompts, select_prompts
from .seghead import token_similarity
from .selfsup import assign, cpa_loss
from .supervise import focal_loss

# Every differentiable operation used in training.
DIFFERENTIABLE_OPS = (
    "linear",
    "instance_norm",
    "pma",
    "pswin",
    "punet",
    "token_similarity",
    "aggregate",
    "class_probabilities",
    "focal",
    "assign",
    "cpa",
)


@dataclass(frozen=True)
class GradCheckCase:
    op: str
    shapes: tuple
    tol: float = 1e-4
    precision: str = "float64"
    max_coords: int = 1000

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


@dataclass
class Probe:
    """``loss()`` recomputes the scalar from the current leaf values;
    ``numeric_loss`` (optional) is the function finite differences should use
    when the analytic contract differs from plain differentiation."""

    loss: Callable[[], Tensor]
    leaves: list[Tensor]
    numeric_loss: Callable[[], Tensor] | None = None


def _g(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(*shape, seed=0) -> Tensor:
    return torch.randn(*shape, generator=_g(seed), dtype=torch.float64)


def _readout(out: Tensor, seed: int = 99) -> Tensor:
    """Fixed random projection so every output entry contributes."""
    return (out * _randn(*out.shape, seed=seed)).sum()


def _randomize(module: torch.nn.Module, seed: int) -> None:
    g = _g(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)


def _module_leaves(module: torch.nn.Module, *extra: Tensor) -> list[Tensor]:
    return [*extra, *module.parameters()]


def _case_linear(shapes):
    torch.manual_seed(0)
    lin = torch.nn.Linear(shapes[-1], 3).double()
    x = _randn(*shapes, seed=1).requires_grad_(True)
    return Probe(lambda: _readout(lin(x)), _module_leaves(lin, x))


def _case_instance_norm(shapes):
    norm = InstanceNorm(shapes[-1]).double()
    _randomize(norm, 2)
    x = _randn(*shapes, seed=1).requires_grad_(True)
    return Probe(lambda: _readout(norm(x)), _module_leaves(norm, x))


def _slot(b, n, dim, cb, seed):
    return SlotPrompt(_randn(b, n, dim, seed=seed).requires_grad_(True),
                      _randn(b, n, cb, seed=seed + 1).requires_grad_(True))


def _case_pma(shapes):
    b, nw, n_w, dim = shapes
    torch.manual_seed(0)
    layer = PMA(dim, 2, int(math.isqrt(n_w)), 3).double()
    _randomize(layer, 3)
    x = _randn(*shapes, seed=1).requires_grad_(True)
    p = _slot(b, 3, dim, 3, 5)
    return Probe(lambda: _readout(layer(x, p)), _module_leaves(layer, x, p.tokens, p.bias_emb))


def _case_pswin(shapes):
    b, h, w, dim = shapes
    torch.manual_seed(0)
    blk = PSWinBlock(dim, 2, 2, 3).double()
    _randomize(blk, 4)
    x = _randn(*shapes, seed=1).requires_grad_(True)
    p1, p2 = _slot(b, 2, dim, 3, 5), _slot(b, 2, dim, 3, 7)
    return Probe(lambda: _readout(blk(x, p1, p2)),
                 _module_leaves(blk, x, p1.tokens, p1.bias_emb, p2.tokens, p2.bias_emb))


def _tiny_config() -> ExperimentConfig:
    return ExperimentConfig(levels=2, channels_per_level=(4, 8), window_size=2, shift=1, heads=2, bias_channels=3,
                            tokens_per_class=1, teacher_fov=8, student1_fov=8, student2_fov=4, mask_block=2)


def _case_punet(shapes):
    torch.manual_seed(0)
    model = PUNet(_tiny_config()).double().train()
    _randomize(model, 6)
    store = init_prompts(PromptStore.for_model(model), [1], "binary", 0).double()
    x = _randn(*shapes, seed=1).requires_grad_(True)

    def loss():
        pb = batch_prompts([select_prompts(store, "bin1")] * shapes[0])
        return _readout(model(x, pb))

    return Probe(loss, [x, *model.parameters(), *store.parameters()])


def _case_token_similarity(shapes):
    b, h, w, c = shapes
    F = _randn(*shapes, seed=1).requires_grad_(True)
    P = _randn(3, 2, c, seed=2).requires_grad_(True)
    return Probe(lambda: _readout(token_similarity(F, P)), [F, P])


def _case_aggregate(shapes):
    tau = 0.1
    sim = (torch.rand(*shapes, generator=_g(1), dtype=torch.float64) * 2 - 1).requires_grad_(True)
    weights = torch.softmax(sim.detach() / tau, dim=-1)
    # the contract: the softmax weights are constants in the backward pass
    return Probe(lambda: _readout(aggregate(sim, tau)), [sim],
                 numeric_loss=lambda: _readout((weights * sim).sum(-1)))


def _case_class_probabilities(shapes):
    s = _randn(*shapes, seed=1).requires_grad_(True)
    valid = torch.ones(shapes[0], shapes[-1], dtype=torch.bool)
    valid[0, -1] = False
    return Probe(lambda: _readout(class_probabilities(s, valid).nan_to_num()), [s])


def _case_focal(shapes):
    logits = _randn(*shapes, seed=1).requires_grad_(True)
    labels = torch.randint(0, shapes[-1], shapes[:-1], generator=_g(2))
    y = torch.nn.functional.one_hot(labels, shapes[-1]).double()
    alpha = torch.rand(shapes[-1], generator=_g(3), dtype=torch.float64) + 0.5
    return Probe(lambda: focal_loss(torch.softmax(logits, -1), y, 4.0, alpha), [logits])


def _case_assign(shapes):
    F = _randn(*shapes, seed=1).requires_grad_(True)
    C = _randn(shapes[0], 4, shapes[-1], seed=2).requires_grad_(True)
    return Probe(lambda: _readout(assign(F, C, 0.5)), [F, C])


def _case_cpa(shapes):
    b, h, w, c = shapes
    F = _randn(*shapes, seed=1).requires_grad_(True)
    C = _randn(b, 4, c, seed=2)
    teacher = assign(_randn(b, h, w, c, seed=3), C, 0.033)
    idx = torch.randint(0, h * w, (b, h, w), generator=_g(4))
    return Probe(lambda: cpa_loss([assign(F, C, 0.066)], teacher, [idx]), [F])


CASES: dict[str, tuple[GradCheckCase, Callable]] = {
    "linear": (GradCheckCase("linear", ((2, 5),), tol=1e-9), _case_linear),
    "instance_norm": (GradCheckCase("instance_norm", ((2, 3, 4, 3),)), _case_instance_norm),
    "pma": (GradCheckCase("pma", ((2, 2, 4, 4),)), _case_pma),
    "pswin": (GradCheckCase("pswin", ((1, 4, 4, 4),)), _case_pswin),
    "punet": (GradCheckCase("punet", ((2, 1, 8, 8),)), _case_punet),
    "token_similarity": (GradCheckCase("token_similarity", ((1, 2, 2, 5),)), _case_token_similarity),
    "aggregate": (GradCheckCase("aggregate", ((1, 2, 2, 3, 4),), tol=1e-6), _case_aggregate),
    "class_probabilities": (GradCheckCase("class_probabilities", ((2, 2, 2, 3),)), _case_class_probabilities),
    "focal": (GradCheckCase("focal", ((1, 3, 3, 3),)), _case_focal),
    "assign": (GradCheckCase("assign", ((1, 3, 3, 4),)), _case_assign),
    "cpa": (GradCheckCase("cpa", ((1, 3, 3, 4),)), _case_cpa),
}


def missing_cases() -> list[str]:
    return sorted(set(DIFFERENTIABLE_OPS) ^ set(CASES))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, 1e-3 * max|a|)``; the floor keeps coordinates
    with vanishing gradients from dominating through round-off."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), 1e-12) * 1e-3
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)


def finite_diff_check(case: GradCheckCase, build: Callable | None = None, seed: int = 0) -> GradCheckReport:
    build = build or CASES[case.op][1]
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64 if case.precision == "float64" else torch.float32)
    try:
        probe = build(case.shapes[0])
        leaves = [t for t in probe.leaves if t.requires_grad]
        for t in leaves:
            t.grad = None
        probe.loss().backward()
        analytic_all = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in leaves]
        sizes = np.array([t.numel() for t in leaves])
        total = int(sizes.sum())
        rng = np.random.default_rng(seed)
        picks = np.sort(rng.choice(total, size=min(case.max_coords, total), replace=False))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        numeric_fn = probe.numeric_loss or probe.loss
        a, n = [], []
        with torch.no_grad():
            for flat in picks:
                k = int(np.searchsorted(offsets, flat, side="right") - 1)
                t, i = leaves[k], int(flat - offsets[k])
                view = t.view(-1)
                x0 = float(view[i])
                h = 1e-5 * max(1.0, abs(x0))
                view[i] = x0 + h
                fp = float(numeric_fn())
                view[i] = x0 - h
                fm = float(numeric_fn())
                view[i] = x0
                n.append((fp - fm) / (2 * h))
                a.append(float(analytic_all[k].view(-1)[i]))
        err = relative_error(np.array(a), np.array(n))
        return GradCheckReport(case.op, float(err.max(initial=0.0)), len(picks), case.tol)
    finally:
        torch.set_default_dtype(old)


def run_all(ops=None) -> list[GradCheckReport]:
    missing = missing_cases()
    if missing:
        raise KeyError(f"operations without a gradient case: {missing}")
    return [finite_diff_check(CASES[op][0]) for op in (ops or DIFFERENTIABLE_OPS)]
