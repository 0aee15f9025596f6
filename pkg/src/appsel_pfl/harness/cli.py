"""Command line entry point: ``appsel-pfl <mode> [--config F] [--seed S] [--out D] [--preset P]``.

Exit codes: 0 success, 1 unexpected error, 2 invalid configuration,
3 feasibility gate failed, 4 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from appsel_pfl.harness import report as report_mod
from appsel_pfl.harness.config import MODES, PRESETS, ConfigError, from_dict, load_raw
from appsel_pfl.harness.runner import EXIT_CONFIG, EXIT_ERROR, run


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="appsel-pfl",
                                description="Private federated app-selection experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for mode in MODES:
        m = sub.add_parser(mode, help=f"run the {mode} mode")
        m.add_argument("--config", help="YAML or JSON experiment config")
        m.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        m.add_argument("--out", help="output directory")
        m.add_argument("--preset", choices=sorted(PRESETS), help="experiment preset")
        m.add_argument("--resume", help="resume from a checkpoint written by this config")
        m.add_argument("--init-checkpoint", help="start from these parameters")
    c = sub.add_parser("compare", help="compare run reports")
    c.add_argument("reports", nargs="+", help="report.json files or run directories")
    c.add_argument("--baseline", type=int, default=0, help="index of the baseline report")
    c.add_argument("--json", action="store_true", help="emit JSON rows instead of a table")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _compare(args) -> int:
    try:
        rows = report_mod.compare([report_mod.load_report(r) for r in args.reports], args.baseline)
    except report_mod.ComparisonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(rows, indent=1) if args.json else report_mod.format_table(rows))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare":
        return _compare(args)
    try:
        raw = load_raw(args.config) if args.config else {}
        if raw.get("mode") not in (None, args.command):
            raise ConfigError(f"mode: config says {raw['mode']!r} but the command is {args.command!r}")
        raw = {**raw, "mode": args.command}
        if args.resume:
            raw["resume_from"] = args.resume
        if args.init_checkpoint:
            raw["init_checkpoint"] = args.init_checkpoint
        cfg = from_dict(raw, args.preset, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        logging.getLogger(__name__).exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    rep = result.report
    summary = {"status": rep["status"], "out": str(result.out_dir), **rep.get("final", {})}
    print(json.dumps(summary))
    if rep.get("error"):
        print(f"{rep['status']}: {rep['error']}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
