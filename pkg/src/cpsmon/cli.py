"""Command line: ``cpsmon run | verify | list-attacks``."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import scenario as scenario_mod
from .attacks import ATTACK_TABLE
from .errors import CorruptLog, CpsMonError, ParseError
from .sim import EXIT_CONFIG, EXIT_DETECTED, EXIT_SAFE, run_scenario

LOG_DIR_ENV = "CPSMON_LOG_DIR"


def default_log_path(name: str) -> Path:
    return Path(os.environ.get(LOG_DIR_ENV, "logs")) / f"{name}.jsonl"


def cmd_run(args) -> int:
    try:
        sc = scenario_mod.load(args.scenario).with_overrides(args.seed, args.ticks)
    except ParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else default_log_path(sc.name)
    try:
        result = run_scenario(sc, out)
    except CpsMonError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for tick, mid, ids in result.rejected:
        print(f"rejected  tick={tick:<7} monitor={mid:<4} witnesses={','.join(ids)}")
    status = "detection" if result.exit_code == EXIT_DETECTED else "safe"
    print(f"{sc.name}: {sc.horizon_ticks} ticks, {len(result.rejected)} rejected verdicts, {status}; log {out}")
    return result.exit_code


def cmd_verify(args) -> int:
    from .replay import verify

    try:
        report = verify(args.log)
    except (OSError, CorruptLog) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for d in report.divergences:
        print(d)
    print(report.summary())
    return EXIT_SAFE if report.ok else EXIT_DETECTED


def cmd_list_attacks(args) -> int:
    rows = [("kind", "layer", "params", "monitor")]
    rows += [(a.kind, a.layer, a.params, a.monitor) for a in ATTACK_TABLE.values()]
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return EXIT_SAFE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpsmon", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file or shipped scenario name")
    run.add_argument("scenario")
    run.add_argument("--out", help=f"log path (default: ${LOG_DIR_ENV}/<name>.jsonl, else logs/)")
    run.add_argument("--seed", type=int)
    run.add_argument("--ticks", type=int, help="override horizon_ticks")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="replay a log and check it")
    ver.add_argument("log")
    ver.set_defaults(func=cmd_verify)

    la = sub.add_parser("list-attacks", help="show the available attack kinds")
    la.set_defaults(func=cmd_list_attacks)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)
