"""
Main entry point for the NLW torus solver.
Parses the command line, builds the runner and installs graceful shutdown signals.
"""

import argparse
import signal
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from core.errors import ConfigError
from core.logger import Logger
from core.torus_runner import TorusRunner
from utils.config import EXIT_CONFIG
from utils.config_parser import RunConfig, load_config

COMMANDS = ("solve", "measure", "verify", "normal-form")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlw-tori",
                                     description="Quasi-periodic tori of the nonlinear wave equation")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="flat key = value run file")
    parser.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, help="sampler seed (overrides seed)")
    parser.add_argument("--levels", type=int, help="RG levels (overrides solver.max_levels)")
    parser.add_argument("--solution", type=Path, help="solution artefact for verify")
    parser.add_argument("--quiet", action="store_true", help="log warnings and errors only")
    return parser


def apply_overrides(config: RunConfig, seed: Optional[int], levels: Optional[int]) -> RunConfig:
    """
    Command-line values win over the file.

    Raises:
        ConfigError: An override fails validation
    """
    data = config.model_dump(by_alias=True)
    if seed is not None:
        data["seed"] = seed
    if levels is not None:
        data["solver"]["max_levels"] = levels
    try:
        return RunConfig.model_validate(data)
    except ValidationError as error:
        first = error.errors()[0]
        raise ConfigError(f"override rejected: {first['msg']}",
                          key=".".join(str(p) for p in first["loc"])) from error


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one command and return its exit code.
    Malformed configurations exit with EXIT_CONFIG and the offending line or key.
    """
    args = build_parser().parse_args(argv)
    logger = Logger().get_logger()
    Logger().set_level("WARNING" if args.quiet else "INFO")

    try:
        config, text = load_config(args.config)
        config = apply_overrides(config, args.seed, args.levels)
        runner = TorusRunner(config, text, args.out)
    except ConfigError as error:
        logger.error(f"Configuration error: {error}")
        return EXIT_CONFIG

    signal.signal(signal.SIGINT, lambda *_: runner.stop())
    signal.signal(signal.SIGTERM, lambda *_: runner.stop())

    kwargs = {"solution_path": args.solution} if args.command == "verify" else {}
    return runner.run(args.command, **kwargs)


if __name__ == "__main__":
    sys.exit(main())
