"""Command-line entry point.

Exit codes: 0 success or PASS, 1 verification FAIL, 2 usage or configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import CatalogMiss, ConfigError, NumericalError
from .reporting import COMMANDS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbsdegame", description="Delayed noisy-memory stochastic differential games.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, cmd in COMMANDS.items():
        p = sub.add_parser(name, help=cmd.help, description=cmd.help)
        p.add_argument("--config", metavar="PATH", help="JSON configuration (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--paths", type=int, help="override solver.n_paths")
        p.add_argument("--steps", type=int, help="override grid.n_steps")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, paths=args.paths, steps=args.steps)
        code, files = COMMANDS[args.command].run(cfg)
    except (ConfigError, CatalogMiss) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    for f in files:
        print(f)
    if code == EXIT_FAIL:
        print(f"{args.command}: FAIL", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
