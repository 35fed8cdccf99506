"""Run the desk-scale trend suite and print one line per trend check.

    python3 scripts/run_trends.py --out runs/trends
    python3 scripts/run_trends.py --out runs/trends --reuse   # re-check a finished run
"""

import argparse
import logging
import sys
from pathlib import Path

import torch

from punet.config import toy_preset
from punet.data import PhantomSpec, generate
from punet.harness import write_run_json
from punet.trends import check_trends, load_trends, run_trend_suite


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--reuse", action="store_true", help="check an existing trends.csv instead of training")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = toy_preset()
    if args.reuse:
        reports = load_trends(out / "trends.csv")
    else:
        ds = generate(PhantomSpec(), args.seed)
        reports = run_trend_suite(cfg, ds, out)
        write_run_json(out, "trends", cfg, {"data_seed": args.seed,
                                            "dsc": {k: r.summary()["mean"] for k, r in reports.items()}})
    checks = check_trends(reports)
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
