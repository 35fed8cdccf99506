"""Dice overlap, average symmetric surface distance, per-subject aggregation
and the paired t-test used to compare adaptation runs."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

CSV_HEADER = ("run", "subject", "class", "dsc", "assd")


def _check(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(pred, gt) -> float:
    """``2|A and B| / (|A| + |B|)``; two empty masks score 1.0."""
    a, b = _check(pred, gt)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background pixel among their full
    (8-connected in 2D) neighbourhood; the outside of the array counts as
    background."""
    struct = ndimage.generate_binary_structure(mask.ndim, mask.ndim)
    return mask & ~ndimage.binary_erosion(mask, structure=struct, border_value=0)


def assd(pred, gt, spacing=None) -> float:
    """Mean of the two directed average surface distances. ``nan`` if either
    mask is empty."""
    a, b = _check(pred, gt)
    if not a.any() or not b.any():
        return math.nan
    sa, sb = surface(a), surface(b)
    spacing = None if spacing is None else tuple(float(s) for s in spacing)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    return float((dist_to_b[sa].mean() + dist_to_a[sb].mean()) / 2.0)


@dataclass
class EvalReport:
    run: str
    rows: list[dict] = field(default_factory=list)  # one per subject x class
    excluded_assd: int = 0

    def per_subject(self, metric: str = "dsc") -> dict[int, float]:
        """Foreground-class mean per subject, ``nan`` entries skipped."""
        out: dict[int, list[float]] = {}
        for r in self.rows:
            if not math.isnan(r[metric]):
                out.setdefault(r["subject"], []).append(r[metric])
        return {s: float(np.mean(v)) for s, v in sorted(out.items())}

    def summary(self, metric: str = "dsc") -> dict[str, float]:
        vals = np.array(list(self.per_subject(metric).values()))
        if vals.size == 0:
            return {"mean": math.nan, "std": math.nan, "median": math.nan, "n": 0}
        return {"mean": float(vals.mean()), "std": float(vals.std()), "median": float(np.median(vals)),
                "n": int(vals.size)}

    def per_class(self, metric: str = "dsc") -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            if not math.isnan(r[metric]):
                out.setdefault(r["class"], []).append(r[metric])
        return {c: float(np.mean(v)) for c, v in sorted(out.items())}


def evaluate_volume(run: str, subject: int, pred: np.ndarray, gt: np.ndarray, classes) -> list[dict]:
    """Metrics of one subject's slice stack, treated as a volume with unit spacing."""
    rows = []
    for c in classes:
        p, g = pred == c, gt == c
        rows.append({"run": run, "subject": int(subject), "class": int(c),
                     "dsc": 100.0 * dsc(p, g), "assd": assd(p, g)})
    return rows


def aggregate(run: str, rows: list[dict]) -> EvalReport:
    excluded = sum(1 for r in rows if math.isnan(r["assd"]))
    return EvalReport(run, list(rows), excluded)


def paired_t_test(a, b) -> float:
    """Two-sided paired t-test p-value.

    Identical series give 1.0; a constant non-zero difference (zero variance)
    gives 0.0.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired series must be 1-D and of equal length")
    if a.size < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    if np.all(d == 0):
        return 1.0
    if np.all(d == d[0]):
        return 0.0
    return float(stats.ttest_rel(a, b).pvalue)


def write_csv(reports: list[EvalReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rep in reports:
            for r in rep.rows:
                w.writerow([r["run"], r["subject"], r["class"], f"{r['dsc']:.6f}",
                            "nan" if math.isnan(r["assd"]) else f"{r['assd']:.6f}"])


def read_csv(path: str | os.PathLike) -> dict[str, EvalReport]:
    out: dict[str, EvalReport] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rep = out.setdefault(r["run"], EvalReport(r["run"]))
            rep.rows.append({"run": r["run"], "subject": int(r["subject"]), "class": int(r["class"]),
                             "dsc": float(r["dsc"]), "assd": float(r["assd"])})
    for rep in out.values():
        rep.excluded_assd = sum(1 for r in rep.rows if math.isnan(r["assd"]))
    return out
