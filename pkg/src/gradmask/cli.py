"""Command line entry point: ``gradmask {threshold-sweep,convergence,attack-demo}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from .config import ConfigError
from .harness import RUNNERS

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradmask", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="INI experiment file")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seeds", metavar="a,b,c", help="comma separated seeds")
        p.add_argument("--jobs", type=int, metavar="N", help="worker processes")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key (repeatable)")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def load_config(args) -> config_mod.ExperimentConfig:
    overrides = [f"experiment.kind={args.command}"] + list(args.set)
    if args.out is not None:
        overrides.append(f"experiment.out={args.out}")
    if args.seeds is not None:
        overrides.append(f"experiment.seeds={args.seeds}")
    if args.jobs is not None:
        overrides.append(f"experiment.jobs={args.jobs}")
    return config_mod.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        outcome = RUNNERS[cfg.kind](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        sys.stdout.write(outcome.summary)
        for path in outcome.paths.values():
            print(f"wrote {path}")
    if outcome.failures:
        print(f"{outcome.failures} cell(s) failed; see the status column", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
