"""Window partition/reverse, cyclic shifts and world-coordinate grids.

Arrays are channel-last. Functions accept optional leading batch dimensions,
so ``values`` is ``(..., H, W, C)`` and ``grid`` is ``(..., H, W, 2)`` holding
``(x, y)`` positions in pixels of the un-augmented source slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor


class GeometryError(ValueError):
    pass


@dataclass
class FeatureMap:
    values: Tensor
    grid: Tensor
    level_stride: float = 1.0
    shift: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.values = torch.as_tensor(self.values)
        self.grid = torch.as_tensor(self.grid, dtype=torch.float64)
        if self.values.shape[:-1] != self.grid.shape[:-1]:
            raise GeometryError(f"values {tuple(self.values.shape)} and grid {tuple(self.grid.shape)} disagree")

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.values.shape[-3:-1])


@dataclass
class WindowedContent:
    windows: Tensor  # (..., n_windows, window*window, C)
    provenance: np.ndarray  # (n_windows, window*window, 2) source (row, col)
    shape: tuple[int, int]
    window: int
    grid: Tensor | None = None
    level_stride: float = 1.0
    shift: tuple[int, int] = (0, 0)
    shifted: bool = field(init=False)

    def __post_init__(self):
        self.shifted = tuple(self.shift) != (0, 0)


def make_grid(origin: tuple[float, float], stride: float, shape: tuple[int, int]) -> np.ndarray:
    """``grid[i, j] = origin + stride * (j, i)`` as an ``(H, W, 2)`` float64 array."""
    if stride <= 0:
        raise GeometryError("stride must be positive")
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([origin[0] + stride * cols, origin[1] + stride * rows], axis=-1)


def window_partition(x: Tensor, window: int) -> Tensor:
    """``(..., H, W, C) -> (..., nW, window*window, C)`` in row-major window order."""
    *lead, h, w, c = x.shape
    if h % window or w % window:
        raise GeometryError(f"{h}x{w} not divisible by window {window}")
    x = x.reshape(*lead, h // window, window, w // window, window, c)
    x = x.transpose(-4, -3)
    return x.reshape(*lead, (h // window) * (w // window), window * window, c)


def window_reverse(xw: Tensor, window: int, shape: tuple[int, int]) -> Tensor:
    *lead, nw, nc, c = xw.shape
    h, w = shape
    if nc != window * window or nw != (h // window) * (w // window) or h % window or w % window:
        raise GeometryError(f"windowed shape {tuple(xw.shape)} does not cover {h}x{w}")
    x = xw.reshape(*lead, h // window, w // window, window, window, c)
    x = x.transpose(-4, -3)
    return x.reshape(*lead, h, w, c)


def roll(x: Tensor, shift: tuple[int, int]) -> Tensor:
    return torch.roll(x, shifts=tuple(shift), dims=(-3, -2))


def cyclic_shift(fm: FeatureMap, shift: tuple[int, int]) -> FeatureMap:
    """Move ``values[i, j]`` to ``[(i + rows) % H, (j + cols) % W]``; the grid follows."""
    total = (fm.shift[0] + shift[0], fm.shift[1] + shift[1])
    return FeatureMap(roll(fm.values, shift), roll(fm.grid, shift), fm.level_stride, total)


def _provenance(shape: tuple[int, int], window: int, shift: tuple[int, int]) -> np.ndarray:
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # cell (i, j) of the shifted map came from ((i - s) mod H, (j - s) mod W)
    src = np.stack([(rows - shift[0]) % h, (cols - shift[1]) % w], axis=-1)
    return window_partition(torch.from_numpy(src), window).numpy()


def partition(fm: FeatureMap, window: int) -> WindowedContent:
    h, w = fm.hw
    if h % window or w % window:
        raise GeometryError(f"{h}x{w} not divisible by window {window}; no implicit padding")
    return WindowedContent(
        windows=window_partition(fm.values, window),
        provenance=_provenance((h, w), window, fm.shift),
        shape=(h, w),
        window=window,
        grid=window_partition(fm.grid, window),
        level_stride=fm.level_stride,
        shift=fm.shift,
    )


def reverse(wc: WindowedContent, shape: tuple[int, int] | None = None) -> FeatureMap:
    """Scatter windows back through ``provenance``; undoes any recorded shift."""
    shape = tuple(shape or wc.shape)
    h, w = shape
    prov = np.asarray(wc.provenance).reshape(-1, 2)
    if prov.shape[0] != h * w:
        raise GeometryError(f"provenance covers {prov.shape[0]} cells, shape needs {h * w}")
    if prov.min() < 0 or (prov[:, 0] >= h).any() or (prov[:, 1] >= w).any():
        raise GeometryError("provenance points outside the target shape")
    flat = prov[:, 0] * w + prov[:, 1]
    if np.unique(flat).size != flat.size:
        raise GeometryError("provenance is not a bijection")
    order = torch.from_numpy(np.argsort(flat))

    def scatter(t: Tensor) -> Tensor:
        *lead, nw, nc, c = t.shape
        t = t.reshape(*lead, nw * nc, c)
        return t.index_select(-2, order).reshape(*lead, h, w, c)

    grid = scatter(wc.grid) if wc.grid is not None else torch.zeros(h, w, 2, dtype=torch.float64)
    return FeatureMap(scatter(wc.windows), grid, wc.level_stride, (0, 0))
