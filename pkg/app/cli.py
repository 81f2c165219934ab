"""Command line entry point: one subcommand per verdict suite"""
import argparse
import json
import sys
from typing import List, Optional

from app import __version__
from app.core.config import load_run_config, settings
from app.core.exceptions import LabError
from app.core.logging import get_logger, setup_logging
from app.models.schemas import RunConfig

logger = get_logger(__name__)

SUITES = ("linear", "simulate", "scattering", "tails", "weak", "all")

EXIT_PASS = 0
EXIT_VERDICT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vp-lab",
        description="Vlasov-Poisson asymptotics lab: simulations and verdict suites",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUITES:
        cmd = sub.add_parser(name, help=f"Run the {name} suite")
        cmd.add_argument("--config", help="Run configuration JSON (defaults when omitted)")
        cmd.add_argument("--out", help="Output directory")
        cmd.add_argument("--threads", type=int, help="Worker threads for FFTs and parallel maps")
        cmd.add_argument("--deterministic", action="store_true", help="Fixed-order reductions")
        cmd.add_argument("--order", type=int, help="Expansion order n_max")
    sub.add_parser("schema", help="Print the run configuration JSON Schema")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file plus CLI overrides, re-validated"""
    config = load_run_config(args.config) if args.config else RunConfig()
    update = {}
    if args.out:
        update["output_dir"] = args.out
    if args.threads is not None:
        if args.threads < 1:
            raise argparse.ArgumentTypeError("--threads must be >= 1")
        update["threads"] = args.threads
    if args.deterministic:
        update["deterministic"] = True
    if args.order is not None:
        update["policy"] = {**config.policy.model_dump(), "n_max": args.order}
    if not update:
        return config
    return RunConfig.model_validate({**config.model_dump(), **update})


def run_command(command: str, config: RunConfig) -> bool:
    """Run one subcommand; True when no verdict failed"""
    from app.services.suites import SuiteRunner

    if config.threads is not None:
        settings.threads = config.threads
    settings.deterministic = settings.deterministic or config.deterministic
    runner = SuiteRunner(config)
    logger.info(
        f"Running {command} into {runner.output_dir}",
        extra={"suite": command, "config_hash": runner.config_hash},
    )
    with open(runner.output_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump({"config_hash": runner.config_hash, **config.model_dump(mode="json")}, f, indent=2)
    getattr(runner, command)()
    return runner.finish()


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_PASS

    setup_logging()
    if args.command == "schema":
        print(json.dumps(RunConfig.model_json_schema(), indent=2))
        return EXIT_PASS

    try:
        config = resolve_config(args)
        passed = run_command(args.command, config)
    except LabError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return e.exit_code
    except (argparse.ArgumentTypeError, ValueError) as e:
        logger.error(f"Invalid arguments: {str(e)}")
        return EXIT_USAGE
    except FileNotFoundError as e:
        logger.error(f"{str(e)}; run the simulate suite first")
        return EXIT_USAGE
    return EXIT_PASS if passed else EXIT_VERDICT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
