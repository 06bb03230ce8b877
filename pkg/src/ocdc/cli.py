"""Command line entry point: ``ocdc <experiment> [options]``.

Exit codes: 0 success, 2 configuration error, 3 a threshold check failed
under ``--check``, 1 any other error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, OcdcError
from .experiments import EXPERIMENTS, load_config, resolve_config, run_experiment

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CHECK = 3

_HELP = {
    "characterize": "splitter evenness, transmission fits and alignment curves",
    "calibrate": "bias-null and phase-alignment recovery on deviated chips",
    "bpc": "backpropagation control on coarse-calibrated chips",
    "lower": "run one FC and one conv layer on a simulated chip",
    "train": "train a reconstruction network on one imaging process",
    "reconstruct": "exact vs error-injected reconstruction for each process",
    "sweep": "reconstruction error against injected per-layer error",
    "ablate": "domain-mode ablation (CBD, CID, NCBD, InOn)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocdc", description="Coherent optical dot-product chip simulator.")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="experiment")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", type=Path, help="JSON config (or a previous run's manifest.json)")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--out", type=Path, help="output directory (default runs/<experiment>-seed<seed>)")
        p.add_argument("--backend", choices=["exact", "chip"], help="inference backend")
        p.add_argument("--mode", choices=["cbd", "cid", "ncbd", "inon"], help="domain mode")
        p.add_argument("--check", action="store_true", help="exit 3 if any threshold check fails")
        if name == "lower":
            p.add_argument("--dump-schedule", type=Path, help="write the FC schedule in binary form")
            p.add_argument("--csv", action="store_true", help="also write the dumped schedule as CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = dict(seed=args.seed, backend=args.backend, mode=args.mode)
        cfg = load_config(args.config, **overrides) if args.config else resolve_config(None, **overrides)
        if args.experiment == "lower":
            if args.dump_schedule:
                cfg["lower"]["dump_schedule"] = str(args.dump_schedule)
            cfg["lower"]["dump_csv"] = cfg["lower"]["dump_csv"] or args.csv
        out = args.out or Path("runs") / f"{args.experiment}-seed{cfg['seed']}"
        summary = run_experiment(args.experiment, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OcdcError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    checks = summary.get("checks", {})
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(json.dumps({"out": str(out), "csv_sha256": summary["csv_sha256"]}))
    if args.check and not all(checks.values()):
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
