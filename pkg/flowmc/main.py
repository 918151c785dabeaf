"""Command-line entry point: flowmc --config run.toml [--seed N] [--out DIR] [--quiet]"""

from pathlib import Path
from typing import List, Optional
import argparse
import logging
import sys

from flowmc.commands import COMMANDS
from flowmc.commands.common import output_dir
from flowmc.config import get_settings
from flowmc.errors import FlowMCError
from flowmc.formats import load_run_config

logger = logging.getLogger("flowmc")


def configure_logging(quiet: bool = False) -> None:
    settings = get_settings()
    level = logging.DEBUG if settings.debug else getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=logging.WARNING if quiet else level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout),
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowmc",
        description="Train normalizing flows for Monte Carlo importance sampling and run the benchmarks.",
    )
    parser.add_argument("--config", required=True, type=Path, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--out", type=str, default=None, help="output directory (overrides out_dir)")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet)
    try:
        config = load_run_config(args.config, seed=args.seed, out_dir=args.out)
        out = output_dir(config)
        logger.info(f"Running {config.command} with seed {config.seed}, writing to {out}")
        code = COMMANDS[config.command](config, out, progress=not args.quiet, base_dir=args.config.parent)
        logger.info(f"{config.command} finished")
        return code
    except FlowMCError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
