"""Command-line entry point: ``eatvul <subcommand> [flags]``."""

import argparse
import json
import logging
import sys

from . import pipeline
from .config import RunConfig
from .errors import EatVulError

SUBCOMMANDS = pipeline.ORDER + ["all"]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="override every named seed")
    common.add_argument("--snippet-size", type=int, metavar="N", dest="snippet_size")
    common.add_argument("--victim", choices=("bow", "self", "remote"))
    common.add_argument("--generator", choices=("offline", "remote"))
    common.add_argument("--out", metavar="DIR", default="run", help="run directory (default: run)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="eatvul",
                                     description="Evasion attacks on code vulnerability detectors.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("ingest", "all"):
            p.add_argument("--dataset", metavar="PATH",
                           help="JSONL dataset (default: the bundled synthetic corpus)")
        if name in ("report", "all"):
            p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return parser


def resolve_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    return cfg.override(seed=args.seed, snippet_size=args.snippet_size, victim=args.victim,
                        generator=args.generator)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = pipeline.Run(resolve_config(args), args.out)
        if args.command == "all":
            summary = pipeline.run_all(run, args.dataset, not args.no_figures)
        elif args.command == "ingest":
            summary = pipeline.ingest(run, args.dataset)
        elif args.command == "report":
            summary = pipeline.report_stage(run, not args.no_figures)
        else:
            summary = pipeline.STAGES[args.command](run)
    except EatVulError as exc:
        print(f"eatvul {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
