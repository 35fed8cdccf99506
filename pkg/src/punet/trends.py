"""Desk-scale trend suite: pretraining variants and adaptation schemes on the
synthetic phantom, compared by mean test DSC."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig
from .data import Dataset
from .harness import adapt_p2, evaluate, pretrain_p1
from .metrics import EvalReport, read_csv, write_csv

log = logging.getLogger(__name__)

MARGIN = 5.0  # percentage points
TOLERANCE = 2.0  # allowed shortfall of joint pretraining against single-loss variants
TARGET_DSC = 85.0

# (pretraining variant, adaptation scheme) cells
RUNS = (
    ("joint", "prompt"),
    ("joint", "full"),
    ("joint", "fixed"),
    ("seg", "prompt"),
    ("self", "prompt"),
    ("random", "prompt"),
)


@dataclass
class TrendCheck:
    name: str
    description: str
    lhs: float
    rhs: float
    passed: bool

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.description} ({self.lhs:.2f} vs {self.rhs:.2f})"


def run_name(variant: str, scheme: str) -> str:
    return f"{variant}/{scheme}"


def run_trend_suite(config: ExperimentConfig, ds: Dataset, out: str | os.PathLike | None = None,
                    runs=RUNS) -> dict[str, EvalReport]:
    """Pretrain each variant once, adapt and evaluate every requested scheme.

    With ``out`` set, the combined per-subject CSV goes to ``out/trends.csv``
    and each pretrained checkpoint to ``out/p1_<variant>``.
    """
    out = Path(out) if out is not None else None
    reports: dict[str, EvalReport] = {}
    for variant in dict.fromkeys(v for v, _ in runs):
        t0 = time.time()
        pre = pretrain_p1(config, ds, variant)
        log.info("P1 %s done in %.0fs", variant, time.time() - t0)
        if out is not None:
            pre.save(out / f"p1_{variant}")
        for v, scheme in runs:
            if v != variant:
                continue
            t0 = time.time()
            name = run_name(variant, scheme)
            reports[name] = evaluate(adapt_p2(pre, ds, scheme), ds, name)
            log.info("%s DSC %.2f (%.0fs)", name, reports[name].summary()["mean"], time.time() - t0)
    if out is not None:
        write_csv(list(reports.values()), out / "trends.csv")
    return reports


def load_trends(path: str | os.PathLike) -> dict[str, EvalReport]:
    return read_csv(path)


def check_trends(reports: dict[str, EvalReport]) -> list[TrendCheck]:
    dsc = {k: r.summary("dsc")["mean"] for k, r in reports.items()}
    jp = dsc[run_name("joint", "prompt")]
    single = max(dsc[run_name("self", "prompt")], dsc[run_name("seg", "prompt")])
    rand = dsc[run_name("random", "prompt")]
    full = dsc[run_name("joint", "full")]
    fixed = dsc[run_name("joint", "fixed")]
    return [
        TrendCheck("6a", f"joint pretraining beats random init under frozen prompting by >= {MARGIN:g} pp",
                   jp, rand, jp - rand >= MARGIN),
        TrendCheck("6b", f"joint pretraining >= best single-loss pretraining - {TOLERANCE:g} pp",
                   jp, single, jp >= single - TOLERANCE),
        TrendCheck("6c", "full fine-tuning >= frozen prompting", full, jp, full >= jp),
        TrendCheck("6d", f"frozen prompting beats fixed-layer adaptation by >= {MARGIN:g} pp",
                   jp, fixed, jp - fixed >= MARGIN),
        TrendCheck("6e", f"frozen prompting reaches DSC >= {TARGET_DSC:g}%", jp, TARGET_DSC, jp >= TARGET_DSC),
    ]
