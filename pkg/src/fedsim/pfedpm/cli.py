"""Command line interface: ``pfedpm run|sweep|replay|inspect-partition``."""
import argparse
import logging
import sys
from dataclasses import replace
from typing import Optional
from typing import Sequence

from .config import PRESETS
from .config import ExperimentConfig
from .config import apply_preset
from .config import config_help
from .config import parse_config
from .errors import ConfigError
from .errors import DataFormatError
from .errors import NumericError
from .errors import PFedPMError
from .runner import inspect_partition
from .runner import replay
from .runner import run_experiment
from .runner import sweep
from .runner import version

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_experiment_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="config file of 'key = value' lines")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="preset applied before the config file")
    parser.add_argument("--seed", type=int, help="master seed, overrides the config")
    parser.add_argument("--out", help="output directory, overrides the config")
    parser.add_argument("--threads", type=int, help="worker threads, overrides the config")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parses the command line."""
    parser = argparse.ArgumentParser(
        prog="pfedpm",
        description="Personalized federated learning with prototype mixing, simulated on one machine",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {version()}")
    parser.add_argument("--log-level", default="INFO", help="logging level (DEBUG, INFO, WARNING, ERROR)")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one experiment")
    _add_experiment_arguments(run)

    sweep_parser = commands.add_parser("sweep", help="run one experiment per value of a parameter")
    _add_experiment_arguments(sweep_parser)
    sweep_parser.add_argument("--parameter", required=True, help="a, lam, stdev or n_mean")
    sweep_parser.add_argument("--values", required=True, help="comma-separated values")

    replay_parser = commands.add_parser("replay", help="rerun the experiment of a manifest and compare outputs")
    replay_parser.add_argument("manifest", help="manifest.json of an earlier run")
    replay_parser.add_argument("--out", help="directory of the replay, defaults to <manifest dir>/replay")
    replay_parser.add_argument("--threads", type=int, help="worker threads for the replay")

    inspect = commands.add_parser("inspect-partition", help="write partition.json and print per-client sizes")
    _add_experiment_arguments(inspect)

    return parser.parse_args(argv)


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then preset, then config file, then flags."""
    cfg = ExperimentConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    if args.config:
        cfg = parse_config(args.config, base=cfg, check_files=False)
    overrides = {"seed": args.seed, "out_dir": args.out, "threads": args.threads}
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"invalid sweep values {text!r}", key="values") from e


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "replay":
        mismatches = replay(args.manifest, args.out, args.threads)
        return EXIT_FAILURE if mismatches else EXIT_OK

    cfg = resolve_config(args)
    if args.command == "run":
        run_experiment(cfg)
    elif args.command == "sweep":
        sweep(cfg, args.parameter, _parse_values(args.values))
    else:
        print(inspect_partition(cfg).to_string())
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the ``pfedpm`` console script, returning the exit code."""
    args = parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as e:
        logger.error("Data error: %s", e)
        return EXIT_DATA
    except NumericError as e:
        logger.error("Numeric error: %s", e)
        for note in getattr(e, "__notes__", []):
            logger.error("  %s", note)
        return EXIT_NUMERIC
    except PFedPMError as e:
        logger.error("%s", e, exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
