"""``disir-bench`` command line: run an experiment and write CSV and JSON results."""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from ..core import DegenerateWeightsError, SupportError
from .config import EXPERIMENTS, ConfigError, RunConfig
from .experiments import COMMANDS, NumericalFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CAPPED = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disir-bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (0 = all cores)")
    return parser


def _capped_breach(cfg: RunConfig, table) -> Optional[str]:
    if cfg.experiment == "bias-bench":
        for name, s in table.summary["estimators"].items():
            frac = s.get("capped_fraction")
            if frac is not None and frac > cfg.bench.capped_threshold:
                return f"{name}: capped fraction {frac:.4f} exceeds {cfg.bench.capped_threshold}"
    if cfg.experiment == "meeting-times":
        for K, s in table.summary["by_K"].items():
            frac = s["c-isir-disir"]["capped_fraction"]
            if frac > cfg.bench.capped_threshold:
                return f"c-isir-disir K={K}: capped fraction {frac:.4f} exceeds {cfg.bench.capped_threshold}"
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        changes = {"experiment": args.command}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["output"] = args.out
        if args.threads is not None:
            changes["threads"] = args.threads
        cfg = cfg.with_overrides(**changes)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        table = COMMANDS[cfg.experiment](cfg)
    except (NumericalFailure, SupportError, DegenerateWeightsError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    csv_path, json_path = table.write(cfg.output)
    print(f"wrote {csv_path} ({table.n_rows} rows) and {json_path}")
    breach = _capped_breach(cfg, table)
    if breach:
        print(f"capped-run threshold breached: {breach}", file=sys.stderr)
        return EXIT_CAPPED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
