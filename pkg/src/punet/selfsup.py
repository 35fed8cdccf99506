"""Dense student/teacher self-supervision with online prototypes.

The teacher embedding is clustered by a few rounds of soft k-means whose
assignments are damped by a Gaussian of the world distance to each
prototype. Students are trained to reproduce the teacher's (sharper)
prototype assignments at the spatially closest teacher location.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ExperimentConfig
from .data import AugmentPolicy, View, augment
from .windowing import GeometryError

EPS = 1e-8
LOG_EPS = 1e-12
EMPTY_EPS = 1e-12


# ---------------------------------------------------------------- views


@dataclass
class ViewTriplet:
    teacher: View
    students: tuple[View, View]


def feature_grid(grid: np.ndarray, stride: int = 2) -> np.ndarray:
    """World positions of a strided embedding: the mean of each ``stride``
    block of the pixel grid, exact for affine views."""
    h, w, _ = grid.shape
    return grid.reshape(h // stride, stride, w // stride, stride, 2).mean(axis=(1, 3))


def make_views(image: np.ndarray, config: ExperimentConfig, rng: np.random.Generator,
               mask: np.ndarray | None = None, teacher_policy: AugmentPolicy | None = None,
               student_policy: AugmentPolicy | None = None) -> ViewTriplet:
    """Random teacher crop plus two smaller student crops taken inside it."""
    t, fovs = config.teacher_fov, (config.student1_fov, config.student2_fov)
    if min(image.shape) < t:
        raise GeometryError(f"slice {image.shape} smaller than teacher FOV {t}")
    t_off = (int(rng.integers(0, image.shape[0] - t + 1)), int(rng.integers(0, image.shape[1] - t + 1)))
    teacher_policy = teacher_policy or AugmentPolicy.weak()
    student_policy = student_policy or AugmentPolicy.strong(config.mask_fraction, config.mask_block)
    teacher = augment(image, mask, t_off, t, teacher_policy, rng)
    students = []
    for s in fovs:
        off = (t_off[0] + int(rng.integers(0, t - s + 1)), t_off[1] + int(rng.integers(0, t - s + 1)))
        students.append(augment(image, mask, off, s, student_policy, rng))
    return ViewTriplet(teacher, tuple(students))


# ---------------------------------------------------------------- teacher


@torch.no_grad()
def ema_update(teacher: nn.Module | dict, student: nn.Module | dict, m: float) -> None:
    """``theta_t <- m theta_t + (1 - m) theta_s`` over parameters and float buffers."""

    def state(x):
        if isinstance(x, nn.Module):
            d = dict(x.named_parameters())
            d.update({n: b for n, b in x.named_buffers() if b.is_floating_point()})
            return d
        return x

    t_state, s_state = state(teacher), state(student)
    if set(t_state) != set(s_state):
        missing = sorted(set(t_state) ^ set(s_state))
        raise KeyError(f"teacher/student registries differ at {missing[:3]}")
    for name, tp in t_state.items():
        sp = s_state[name]
        if tp.shape != sp.shape:
            raise KeyError(f"shape mismatch for {name}")
        tp.mul_(m).add_(sp.detach(), alpha=1.0 - m)


# ---------------------------------------------------------------- prototypes


@dataclass
class PrototypeBank:
    centroids: Tensor  # (B, K, C)
    positions: Tensor  # (B, K, 2) world (x, y)
    empty: Tensor | None = None  # (B, K) bool, clusters kept from the previous round

    @property
    def n_prototypes(self) -> int:
        return self.centroids.shape[-2]


def _bilinear(values: Tensor, rows: Tensor, cols: Tensor) -> Tensor:
    """Sample ``(B, H, W, C)`` at fractional pixel indices ``rows`` x ``cols``."""
    h, w = values.shape[1:3]
    r0 = rows.floor().long().clamp(0, h - 1)
    c0 = cols.floor().long().clamp(0, w - 1)
    r1, c1 = (r0 + 1).clamp(max=h - 1), (c0 + 1).clamp(max=w - 1)
    fr = (rows - r0.to(rows.dtype)).to(values.dtype)[:, None, None]
    fc = (cols - c0.to(cols.dtype)).to(values.dtype)[None, :, None]
    g = lambda r, c: values[:, r][:, :, c]  # noqa: E731
    top = g(r0, c0) * (1 - fc) + g(r0, c1) * fc
    bot = g(r1, c0) * (1 - fc) + g(r1, c1) * fc
    return top * (1 - fr) + bot * fr


def seed_prototypes(features: Tensor, grid: Tensor, reduction: int) -> PrototypeBank:
    """One seed per ``reduction``-sized cell, at the cell centre."""
    b, h, w, c = features.shape
    if h % reduction or w % reduction:
        raise GeometryError(f"{h}x{w} embedding not divisible by reduction {reduction}")
    centre = (reduction - 1) / 2.0
    rows = torch.arange(h // reduction, dtype=torch.float64) * reduction + centre
    cols = torch.arange(w // reduction, dtype=torch.float64) * reduction + centre
    cent = _bilinear(features, rows, cols).reshape(b, -1, c)
    pos = _bilinear(grid.to(torch.float64), rows, cols).reshape(b, -1, 2)
    return PrototypeBank(cent, pos)


def spatial_weights(grid: Tensor, positions: Tensor, fwhm: float) -> Tensor:
    """Gaussian of world distance, ``(B, H, W, K)``; ``sigma^2 = fwhm^2 / (8 ln 2)``."""
    if fwhm <= 0:
        raise ValueError("fwhm must be positive")
    if math.isinf(fwhm):
        return torch.ones(*grid.shape[:-1], positions.shape[-2], dtype=grid.dtype)
    sigma2 = fwhm**2 / (8.0 * math.log(2.0))
    d2 = ((grid[..., None, :] - positions[:, None, None, :, :]) ** 2).sum(-1)
    return torch.exp(-d2 / (2.0 * sigma2))


def cosine(features: Tensor, centroids: Tensor) -> Tensor:
    """``(B, H, W, C) x (B, K, C) -> (B, H, W, K)`` clamped to ``[-1, 1]``."""
    f = features / features.norm(dim=-1, keepdim=True).clamp_min(EPS)
    c = centroids / centroids.norm(dim=-1, keepdim=True).clamp_min(EPS)
    return torch.einsum("bhwc,bkc->bhwk", f, c).clamp(-1.0, 1.0)


def assign(features: Tensor, centroids: Tensor, tau: float) -> Tensor:
    """Soft assignment of every pixel to the prototypes (rows sum to one)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return torch.softmax(cosine(features, centroids) / tau, dim=-1)


def update_prototypes(features: Tensor, weights: Tensor, grid: Tensor, previous: PrototypeBank) -> PrototypeBank:
    """Weighted means of features and positions; clusters whose total weight is
    (near) zero keep their previous centroid and position."""
    mass = weights.sum(dim=(1, 2))  # (B, K)
    empty = mass <= EMPTY_EPS
    denom = mass.clamp_min(EMPTY_EPS)[..., None]
    cent = torch.einsum("bhwk,bhwc->bkc", weights, features) / denom
    pos = torch.einsum("bhwk,bhwc->bkc", weights.to(grid.dtype), grid) / denom.to(grid.dtype)
    cent = torch.where(empty[..., None], previous.centroids, cent)
    pos = torch.where(empty[..., None], previous.positions, pos)
    return PrototypeBank(cent, pos, empty)


@torch.no_grad()
def cluster(features: Tensor, grid: Tensor, reduction: int, iters: int, fwhm: float, tau: float) -> PrototypeBank:
    """Seed on a lattice, then ``iters`` rounds of assign, damp, update."""
    features = features.detach()
    grid = torch.as_tensor(grid, dtype=torch.float64)
    bank = seed_prototypes(features, grid, reduction)
    for _ in range(iters):
        phi = assign(features, bank.centroids, tau)
        weights = spatial_weights(grid, bank.positions, fwhm).to(phi.dtype) * phi
        bank = update_prototypes(features, weights, grid, bank)
    return bank


def correspondence(student_grid: Tensor, teacher_grid: Tensor) -> Tensor:
    """Flat row-major teacher index closest in world space to each student cell;
    ties go to the smaller index."""
    s = torch.as_tensor(student_grid, dtype=torch.float64)
    t = torch.as_tensor(teacher_grid, dtype=torch.float64)
    lead = s.shape[:-3]
    s_flat = s.reshape(*lead, -1, 1, 2)
    t_flat = t.reshape(*t.shape[:-3], 1, -1, 2)
    d2 = ((s_flat - t_flat) ** 2).sum(-1)
    return d2.argmin(dim=-1).reshape(*s.shape[:-1])


def cross_entropy(target: Tensor, pred: Tensor) -> Tensor:
    """Per-row soft cross-entropy ``-sum_k target log pred``."""
    return -(target * torch.log(pred.clamp_min(LOG_EPS))).sum(dim=-1)


def cpa_loss(student_phis: list[Tensor], teacher_phi: Tensor, corrs: list[Tensor]) -> Tensor:
    """Mean over students of the mean soft cross-entropy against the teacher
    assignment at the corresponding location.

    ``student_phis[n]``: ``(B, h, w, K)``; ``teacher_phi``: ``(B, H, W, K)``;
    ``corrs[n]``: ``(B, h, w)`` flat teacher indices.
    """
    target_flat = teacher_phi.detach().flatten(1, 2)
    losses = []
    for phi_s, idx in zip(student_phis, corrs):
        b, _, _, k = phi_s.shape
        gathered = torch.gather(target_flat, 1, idx.reshape(b, -1, 1).expand(-1, -1, k))
        losses.append(cross_entropy(gathered, phi_s.flatten(1, 2)).mean())
    return sum(losses) / len(losses)


@dataclass
class CPAResult:
    loss: Tensor
    bank: PrototypeBank
    teacher_phi: Tensor
    student_phis: list[Tensor]


def cpa_step(teacher_F: Tensor, teacher_grid: Tensor, student_Fs: list[Tensor], student_grids: list[Tensor],
             config: ExperimentConfig, rng: np.random.Generator) -> CPAResult:
    """Cluster the full teacher embedding, then compare assignments on ×2
    subsampled maps (students jittered by 0 or 1 cell per axis)."""
    teacher_grid = torch.as_tensor(teacher_grid, dtype=torch.float64)
    bank = cluster(teacher_F, teacher_grid, config.proto_reduction, config.cluster_iters, config.fwhm,
                   config.tau_teacher)
    with torch.no_grad():
        t_sub = teacher_F[:, ::2, ::2].detach()
        g_sub = teacher_grid[:, ::2, ::2]
        phi_t = assign(t_sub, bank.centroids, config.tau_teacher)
    phis, corrs = [], []
    for f_s, g_s in zip(student_Fs, student_grids):
        dy, dx = (int(v) for v in rng.integers(0, 2, size=2))
        g_s = torch.as_tensor(g_s, dtype=torch.float64)[:, dy::2, dx::2]
        phi_s = assign(f_s[:, dy::2, dx::2], bank.centroids.to(f_s.dtype), config.tau_student)
        phis.append(phi_s)
        corrs.append(correspondence(g_s, g_sub))
    return CPAResult(cpa_loss(phis, phi_t, corrs), bank, phi_t, phis)


# ---------------------------------------------------------------- similarity maps


def similarity_map(student_F: Tensor, teacher_F: Tensor, query: tuple[int, int]) -> Tensor:
    """Cosine similarity of one student feature to every teacher feature,
    ``(H_t, W_t)`` for single-element inputs."""
    q = student_F[0, query[0], query[1]]
    return F.cosine_similarity(teacher_F[0], q[None, None, :].expand_as(teacher_F[0]), dim=-1, eps=EPS)


def to_gray8(sim: Tensor) -> np.ndarray:
    """Map ``[-1, 1]`` to ``0..255``."""
    return np.round((sim.detach().cpu().numpy().clip(-1, 1) + 1.0) * 127.5).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
