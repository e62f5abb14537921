"""Command-line entry point: ``dcnv2 <command> [--config PATH] [--seed N] [--out DIR] [--repeats N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .experiments import EXIT_CONFIG, run_experiment
from .io import COMMANDS, ConfigError, load_config, parse_config

HELP = {
    "synth-fit": "train on a built-in synthetic polynomial dataset",
    "train": "train on a tabular CSV file",
    "gradcheck": "finite-difference check of every layer and architecture",
    "oracle": "symbolic polynomial checks of small cross networks",
    "analyze": "singular-value spectra and block norms of a checkpoint",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="key = value config file")
    p.add_argument("--seed", type=int, metavar="N", default=argparse.SUPPRESS, help="base seed (overrides config)")
    p.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory (overrides config)")
    p.add_argument("--repeats", type=int, metavar="N", default=argparse.SUPPRESS, help="number of seeds to run")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="dcnv2", description="Deep & cross network toolkit", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts = vars(args)
    logging.basicConfig(
        level=logging.DEBUG if opts.get("verbose") else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    overrides = {
        "command": args.command,
        "seed": opts.get("seed"),
        "out_dir": opts.get("out"),
        "repeats": opts.get("repeats"),
    }
    try:
        if "config" in opts:
            cfg = load_config(opts["config"], **overrides)
        else:
            cfg = parse_config("", **overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
