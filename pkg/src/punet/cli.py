"""Command line entry point.

Exit codes: 0 success, 2 invalid input (config, data, checkpoint), 3 numeric
failure (non-finite loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config, toy_preset
from .data import DataError, PhantomSpec, generate, read_dataset, write_dataset
from .freeze import registry
from .harness import (NumericError, ablate, adapt_p2, evaluate, load_adapted, load_pretrained, pretrain_p1,
                      save_prompts, write_run_json)
from .metrics import write_csv

log = logging.getLogger("punet")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else toy_preset()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _budget(text: str) -> int | None:
    return None if text == "all" else int(text)


def cmd_generate_data(args, cfg):
    spec = PhantomSpec(subjects=args.subjects, slices_per_subject=args.slices)
    ds = generate(spec, cfg.seed)
    write_dataset(ds, args.out)
    return {"checksum": ds.checksum(), "splits": ds.splits}


def cmd_pretrain(args, cfg):
    ds = read_dataset(args.data)
    pre = pretrain_p1(cfg, ds, args.variant, args.steps, out=args.out, log_every=args.log_every)
    pre.save(Path(args.out) / "checkpoint")
    _write_logs(pre.logs, Path(args.out) / "losses.csv")
    return {"variant": args.variant, "steps": pre.plan.steps}


def cmd_adapt(args, cfg):
    ds = read_dataset(args.data)
    pre = load_pretrained(args.checkpoint, cfg)
    adapted = adapt_p2(pre, ds, args.scheme, _budget(args.budget), args.steps, out=args.out)
    adapted.save(Path(args.out) / "checkpoint")
    if adapted.plan.prompts:
        save_prompts(adapted, Path(args.out) / "prompts")
    _write_logs(adapted.logs, Path(args.out) / "losses.csv")
    params = registry(adapted.model, adapted.store)
    return {"scheme": args.scheme, "subjects": adapted.subjects, "frozen_checksum": adapted.frozen_after,
            "trainable": adapted.mask.count(params)}


def cmd_eval(args, cfg):
    ds = read_dataset(args.data)
    adapted = load_adapted(args.checkpoint, cfg)
    rep = evaluate(adapted, ds, args.run or adapted.plan.scheme, args.split)
    write_csv([rep], Path(args.out) / "report.csv")
    summary = {"dsc": rep.summary("dsc"), "assd": rep.summary("assd"), "excluded_assd": rep.excluded_assd}
    print(json.dumps(summary, indent=1))
    return summary


def cmd_ablate(args, cfg):
    ds = read_dataset(args.data)
    pre = load_pretrained(args.checkpoint, cfg)
    schemes = args.schemes.split(",")
    budgets = [_budget(b) for b in args.budgets.split(",")]
    reports = ablate(pre, ds, schemes, budgets, args.steps)
    write_csv(reports, Path(args.out) / "ablation.csv")
    return {r.run: r.summary() for r in reports}


def cmd_simmap(args, cfg):
    from .selfsup import feature_grid, make_views, similarity_map, to_gray8, write_pgm

    ds = read_dataset(args.data)
    pre = load_pretrained(args.checkpoint, cfg)
    net = pre.teacher if pre.teacher is not None else pre.student
    views = make_views(ds.images[args.index], cfg, np.random.default_rng(cfg.seed))
    student = views.students[0]
    with torch.no_grad():
        F_s = pre.student(torch.from_numpy(student.image)[None, None])
        F_t = net(torch.from_numpy(views.teacher.image)[None, None])
    q = tuple(int(v) for v in args.query.split(","))
    sim = similarity_map(F_s, F_t, q)
    out = Path(args.out)
    write_pgm(out / "simmap.pgm", to_gray8(sim))
    grid = feature_grid(views.teacher.grid)
    with open(out / "simmap.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "x", "y", "cosine"])
        for i in range(sim.shape[0]):
            for j in range(sim.shape[1]):
                w.writerow([i, j, f"{grid[i, j, 0]:.3f}", f"{grid[i, j, 1]:.3f}", f"{float(sim[i, j]):.6f}"])
    return {"query": q, "query_world": feature_grid(student.grid)[q].tolist()}


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_all

    reports = run_all(args.ops.split(",") if args.ops else None)
    rows = [{"op": r.op, "max_rel_error": r.max_rel_error, "coords": r.n_coords, "tol": r.tol, "passed": r.passed}
            for r in reports]
    for r in rows:
        print(f"{r['op']:<20} {r['max_rel_error']:.3e} {'PASS' if r['passed'] else 'FAIL'}")
    (Path(args.out) / "gradcheck.json").write_text(json.dumps(rows, indent=1))
    if not all(r["passed"] for r in rows):
        raise NumericError("gradient check failed", {"reports": rows})
    return {"ops": len(rows)}


def _write_logs(logs: list[dict], path: Path) -> None:
    keys = sorted({k for e in logs for k in e}, key=lambda k: (k != "step", k))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys or ["step"], lineterminator="\n")
        w.writeheader()
        w.writerows(logs)


def parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; the toy preset when omitted")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="punet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="write a synthetic phantom dataset")
    g.add_argument("--subjects", type=int, default=30)
    g.add_argument("--slices", type=int, default=6)

    t = sub.add_parser("pretrain", parents=[common], help="P1 pretraining on class group A")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", default="joint", choices=("joint", "seg", "self", "random"))
    t.add_argument("--steps", type=int)
    t.add_argument("--log-every", type=int, default=100)

    a = sub.add_parser("adapt", parents=[common], help="P2 adaptation to class group B")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--scheme", default="prompt")
    a.add_argument("--budget", default="all", help="number of training subjects or 'all'")
    a.add_argument("--steps", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate an adapted checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--run")

    b = sub.add_parser("ablate", parents=[common], help="scheme x annotation-budget grid")
    b.add_argument("--data", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--schemes", default="fixed,bias,prompt_no_bias,prompt,bias_plus_prompt,adapter,decoder,full")
    b.add_argument("--budgets", default="2,4,all")
    b.add_argument("--steps", type=int)

    s = sub.add_parser("simmap", parents=[common], help="student-to-teacher cosine similarity map")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--index", type=int, default=0, help="slice index in the dataset")
    s.add_argument("--query", default="8,8", help="row,col in the student embedding")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--ops", help="comma-separated subset")
    return p


COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "simmap": cmd_simmap,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg)
        write_run_json(args.out, args.command, cfg, {"argv": sys.argv[1:] if argv is None else list(argv),
                                                      "result": result})
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, CheckpointError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
