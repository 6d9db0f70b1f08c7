"""Command-line entry point.

    mtsloc [--config PATH] [--out DIR] [--seed N] [--force] <command>

Commands ``generate``, ``train``, ``detect``, ``localize``, ``evaluate`` and
``sweep`` run one pipeline stage each; ``run`` runs the whole pipeline;
``demo-spread`` runs the anomaly-spread demonstration; ``show-config``
prints the effective configuration.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, default_config
from .errors import ConfigError, MtslocError, NumericalError

STAGE_COMMANDS = ("generate", "train", "detect", "localize", "evaluate", "sweep")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from resetting flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="run configuration file (defaults to the built-in WVS setup)")
    common.add_argument("--out", type=Path, help="output directory (overrides [run] out_dir)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides [run] seed)")
    common.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mtsloc", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    demo = sub.add_parser("demo-spread", parents=[common], help="anomaly-spread demonstration on two uncorrelated series")
    demo.add_argument("--offset", type=float, default=8.0, help="size of the additive anomaly")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return parser


def load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else default_config()
    if args.seed is not None:
        config.seed = args.seed
    return config


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("out", None), ("seed", None), ("force", False), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = load_config(args)
        if args.command == "show-config":
            config.validate()
            sys.stdout.write(config.to_text())
            return 0
        if args.command == "demo-spread":
            from .spread import demo_spread

            result = demo_spread(seed=config.seed, offset=args.offset)
            text = json.dumps(result.to_dict(), indent=2)
            if args.out:
                args.out.mkdir(parents=True, exist_ok=True)
                (args.out / "spread.json").write_text(text)
            print(text)
            return 0

        from .pipeline import STAGES, run_pipeline

        stages = STAGES[:5] if args.command == "run" else (args.command,)
        status = run_pipeline(config, stages, out_dir=args.out, force=args.force)
        for stage, state in status.items():
            print(f"{stage}: {state}")
        return 0
    except MtslocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
