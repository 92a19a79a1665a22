"""Command-line front door.

    fedspzo run --config cfg.yaml --out runs/exp1 [--force] [--workers N]
    fedspzo compare runs/a/metrics.jsonl runs/b/metrics.jsonl [--baseline N]
    fedspzo inspect-payload runs/exp1/payloads/round00010_client0003.fspb
    fedspzo verify --config cfg.yaml

Any config key can be overridden via FEDSPZO_* environment variables
(nested keys with double underscores), which beats editing files in sweeps.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .errors import ConfigError, ContractViolation, NumericError
from .experiment import compare_report, format_report, run_experiment
from .protocol import decode_payload
from .verify import run_verification


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedspzo", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute an experiment config")
    run_p.add_argument("--config", required=True, help="YAML experiment config")
    run_p.add_argument("--out", required=True, help="output directory for the run")
    run_p.add_argument("--force", action="store_true",
                       help="overwrite a non-empty output directory")
    run_p.add_argument("--workers", type=int, default=1,
                       help="thread pool size for clients within a round")

    cmp_p = sub.add_parser("compare", help="cost-to-target table across metrics files")
    cmp_p.add_argument("metrics", nargs="+", help="metrics.jsonl files (>= 2)")
    cmp_p.add_argument("--baseline", type=int, default=0,
                       help="index of the baseline metrics file")
    cmp_p.add_argument("--acc-threshold", type=float, action="append", default=None,
                       help="accuracy target (repeatable); default 0.9")
    cmp_p.add_argument("--json", action="store_true", help="emit the report as JSON")

    ins_p = sub.add_parser("inspect-payload", help="field and hex dump of a payload file")
    ins_p.add_argument("payload", help="binary .fspb payload file")
    ins_p.add_argument("--hex", action="store_true", help="also dump raw bytes")

    ver_p = sub.add_parser("verify", help="run reduced-scale invariant checks on a config")
    ver_p.add_argument("--config", required=True, help="YAML experiment config")
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = run_experiment(cfg, args.out, force=args.force, workers=args.workers)
    print(f"run complete: {out / 'metrics.jsonl'}")
    return 0


def _cmd_compare(args) -> int:
    thresholds = tuple(args.acc_threshold) if args.acc_threshold else (0.9,)
    report = compare_report(args.metrics, baseline_index=args.baseline,
                            acc_thresholds=thresholds)
    print(json.dumps(report, indent=2) if args.json else format_report(report))
    return 0


def _cmd_inspect(args) -> int:
    blob = open(args.payload, "rb").read()
    payload = decode_payload(blob)
    print(f"file:      {args.payload} ({len(blob)} bytes)")
    print(f"client_id: {payload.client_id}")
    print(f"round_id:  {payload.round_id}")
    print(f"mode:      {payload.mode}")
    print(f"steps:     {payload.k_steps}   p1: {payload.p1}   p2: {payload.p2}")
    if payload.root_seed is not None:
        print(f"root_seed: {payload.root_seed}")
    for k, rec in enumerate(payload.steps):
        print(f"  step {k:3d}  g1 {rec.g1:+.12e}  g2 {rec.g2:+.12e}")
        if rec.s1:
            print(f"           s1 {list(rec.s1)}")
        if rec.s2:
            print(f"           s2 {list(rec.s2)}")
    if args.hex:
        for off in range(0, len(blob), 16):
            chunk = blob[off:off + 16]
            hexes = " ".join(f"{b:02x}" for b in chunk)
            print(f"  {off:08x}  {hexes}")
    return 0


def _cmd_verify(args) -> int:
    cfg = load_config(args.config)
    results = run_verification(cfg)
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}: {detail}")
        failed += 0 if ok else 1
    return 1 if failed else 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "compare": _cmd_compare,
                "inspect-payload": _cmd_inspect, "verify": _cmd_verify}
    try:
        return handlers[args.command](args)
    except (ConfigError, ContractViolation, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
