"""Command line: ``python -m trustdd <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .errors import TrustDDError


def _config(args):
    return runner.load_config(args.config, args.set or ())


def _distill(args):
    cfg = _config(args)
    for d in runner.cmd_distill(cfg, args.out):
        print(d)


def _eval(args):
    cfg = _config(args)
    arms = []
    for item in args.arm:
        name, sep, path = item.partition("=")
        arms.append((name, path) if sep else (None, item))
    reports = runner.cmd_eval(cfg, arms, args.out)
    for score in cfg["eval.scores"]:
        print(runner.format_table(reports, score))


def _ablate(args):
    cfg = _config(args)
    reports, failures = runner.cmd_ablate(cfg, args.axis, args.out)
    if reports:
        print(runner.summary_text(reports, cfg["eval.scores"]))
    for arm, err in failures.items():
        print(f"arm {arm} failed: {err}", file=sys.stderr)
    return 1 if failures else 0


def _forge(args):
    print(runner.cmd_forge(_config(args), args.out))


def _export_grid(args):
    print(runner.cmd_export_grid(args.distilled, args.image))


def _report(args):
    print(runner.cmd_report(args.reports, args.scores.split(",")), end="")


def build_parser():
    parser = argparse.ArgumentParser(prog="trustdd", description="Outlier-aware dataset distillation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", help="key=value config file (defaults used when omitted)")
        p.add_argument("-s", "--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("-o", "--out", type=Path, help="output directory")
        return p

    with_config(sub.add_parser("distill", help="distill experiment.runs times")).set_defaults(func=_distill)
    p = with_config(sub.add_parser("eval", help="train models on distilled sets and report OOD metrics"))
    p.add_argument("arm", nargs="+", help="[NAME=]DIR with run*/ containers or a single container")
    p.set_defaults(func=_eval)
    p = with_config(sub.add_parser("ablate", help="sweep one ablation axis"))
    p.add_argument("axis", choices=runner.ABLATION_AXES)
    p.set_defaults(func=_ablate)
    with_config(sub.add_parser("forge", help="write the outlier training pool")).set_defaults(func=_forge)
    p = sub.add_parser("export-grid", help="tile a distilled set into a PGM/PPM image")
    p.add_argument("distilled", type=Path)
    p.add_argument("image", type=Path)
    p.set_defaults(func=_export_grid)
    p = sub.add_parser("report", help="summarize mean rows of report directories")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--scores", default="msp")
    p.set_defaults(func=_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except TrustDDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
