import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import orjson
import structlog

from ringsim import __version__
from ringsim.commands import COMMANDS, CommandContext
from ringsim.core.config import get_settings
from ringsim.core.exceptions import RingSimError
from ringsim.models.results import ErrorReport
from ringsim.services.scenario import ScenarioFile, default_scenario, load_scenario, resolved_defaults
from ringsim.utils.helpers import dump_json
from ringsim.utils.logging import setup_logging

logger = structlog.get_logger(__name__)


def _seed(value: str) -> int:
    seed = int(value, 0)
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return seed


def _workers(value: str) -> int:
    workers = int(value)
    if workers < 1:
        raise argparse.ArgumentTypeError("worker count must be at least 1")
    return workers


def create_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog="ringsim",
        description="Ring-cavity PDH frequency metrology simulator",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="subcommand", required=True, metavar="subcommand")
    for name, command in COMMANDS.items():
        sub = subparsers.add_parser(name, help=command.help, description=command.help)
        sub.add_argument("--scenario", type=Path, help="scenario TOML file (defaults apply when omitted)")
        sub.add_argument("--seed", type=_seed, help="override the scenario seed")
        sub.add_argument("--out", type=Path, help=f"output directory (default {settings.DEFAULT_OUTPUT_DIR}/<subcommand>)")
        sub.add_argument("--workers", type=_workers, default=settings.DEFAULT_WORKERS, help="parallel runs for sense")
        sub.add_argument(
            "--print-defaults",
            action="store_true",
            help="print the fully resolved configuration, including calibrated servo values, and exit",
        )
    return parser


def _report_error(report: ErrorReport) -> None:
    sys.stderr.write(orjson.dumps(
        report.model_dump(),
        option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY,
        default=str,
    ).decode() + "\n")


def run(args: argparse.Namespace) -> int:
    settings = get_settings()
    scenario_file: ScenarioFile = load_scenario(args.scenario) if args.scenario else default_scenario()
    if args.seed is not None:
        scenario_file = scenario_file.with_seed(args.seed)

    if args.print_defaults:
        sys.stdout.write(dump_json(resolved_defaults(scenario_file)).decode())
        return 0

    output_dir = args.out or Path(settings.DEFAULT_OUTPUT_DIR) / args.subcommand
    ctx = CommandContext(
        subcommand=args.subcommand,
        scenario_file=scenario_file,
        output_dir=output_dir,
        workers=args.workers,
    )
    log = logger.bind(subcommand=args.subcommand, seed=scenario_file.seed)
    log.info("subcommand started", output_dir=str(output_dir))
    COMMANDS[args.subcommand].handler(ctx)
    ctx.write_manifest()
    log.info("subcommand finished", files=ctx.files)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    args = create_parser().parse_args(argv)
    try:
        return run(args)
    except RingSimError as e:
        logger.error("subcommand failed", error=e.code, message=e.message)
        _report_error(e.to_report())
        return e.exit_status
    except Exception as e:
        logger.exception("unexpected failure")
        _report_error(ErrorReport(error="internal_error", message=str(e)))
        return 1


if __name__ == "__main__":
    sys.exit(main())
