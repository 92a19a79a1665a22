#!/usr/bin/env python3
"""Run the full desk-scale comparison: all four methods on the blobs task.

Executes every config in configs/ against the same task, then prints the
cost-to-target table with the forward-difference baseline as reference.

    python scripts/run_blobs_suite.py --out runs/blobs [--force] [--workers 2]

Roughly two minutes single-threaded; the central-difference baseline is the
slow one (two forwards per direction, whole model).
"""

import argparse
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from fedspzo.config import load_config
from fedspzo.experiment import compare_report, format_report, run_experiment

CONFIGS = ["blobs_forward_zo", "blobs_fedspzo", "blobs_central_zo", "blobs_fedavg"]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/blobs", help="parent directory for run outputs")
    parser.add_argument("--force", action="store_true", help="overwrite existing run directories")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--rounds", type=int, default=None,
                        help="override the configured round count (quick smoke runs)")
    args = parser.parse_args()

    out_root = Path(args.out)
    metrics = []
    for name in CONFIGS:
        env = {"FEDSPZO_ROUNDS": str(args.rounds)} if args.rounds else {}
        cfg = load_config(REPO / "configs" / f"{name}.yaml", env=env)
        start = time.monotonic()
        run_dir = run_experiment(cfg, out_root / name, force=args.force,
                                 workers=args.workers)
        print(f"{cfg.method:11s} finished in {time.monotonic() - start:6.1f}s "
              f"-> {run_dir / 'metrics.jsonl'}")
        metrics.append(run_dir / "metrics.jsonl")

    print()
    print(format_report(compare_report(metrics, baseline_index=0)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
