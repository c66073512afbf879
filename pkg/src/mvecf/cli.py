"""Command-line entry point.

    mvecf experiment --config run.yaml --hyper.lambda_mv 10 --threads 4

Any configuration field can be overridden with ``--<dotted.name> VALUE``;
values are parsed as YAML scalars or lists.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import ExperimentConfig, load_config, parse_override_args
from .errors import ConfigError, DataError, MVECFError, NumericalError
from .pipeline import (
    StageError,
    generate,
    run_eval,
    run_experiment,
    run_fit,
    run_recommend,
    run_sweep,
    write_manifest,
)

logger = logging.getLogger("mvecf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OTHER = 0, 2, 3, 4, 1

COMMANDS = {
    "gen": "write synthetic returns and holdings as CSV inputs",
    "fit": "fit the configured model; writes model.bin and loss_trace.csv",
    "recommend": "write top-k lists for both exclusion protocols from model.bin",
    "eval": "score stored recommendation lists; writes report.json and per_user.csv",
    "experiment": "fit, recommend and evaluate in one run",
    "sweep": "grid over lambda_mv then gamma; writes summary_table.csv",
}


def exit_code(exc: BaseException) -> int:
    err = exc.error if isinstance(exc, StageError) else exc
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, DataError):
        return EXIT_DATA
    if isinstance(err, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_OTHER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvecf", description="Risk-aware stock recommenders: fit, recommend, evaluate.")
    parser.add_argument("--version", action="version", version=f"mvecf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--output-dir", dest="output_dir", help="directory for outputs")
        p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def resolve_config(args, extra) -> ExperimentConfig:
    overrides = parse_override_args(extra)
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.threads is not None:
        overrides["threads"] = args.threads
    return load_config(args.config, overrides)


def dispatch(command: str, cfg: ExperimentConfig) -> None:
    out = Path(cfg.output_dir)
    if command == "gen":
        if cfg.data.source != "synthetic":
            raise ConfigError("gen needs data.source: synthetic")
        out.mkdir(parents=True, exist_ok=True)
        paths = generate(cfg, out)
        write_manifest(cfg, out, "gen", {"outputs": paths})
        print(json.dumps(paths, indent=2))
    elif command == "fit":
        run_fit(cfg, out)
        write_manifest(cfg, out, "fit")
    elif command == "recommend":
        run_recommend(cfg, out)
        write_manifest(cfg, out, "recommend")
    elif command == "eval":
        report = run_eval(cfg, out)
        write_manifest(cfg, out, "eval")
        print(json.dumps(report.metrics(), indent=2, sort_keys=True, default=str))
    elif command == "experiment":
        report = run_experiment(cfg, out)
        print(json.dumps(report.metrics(), indent=2, sort_keys=True, default=str))
    elif command == "sweep":
        for row in run_sweep(cfg, out):
            print(", ".join(f"{k}={v}" for k, v in row.items()))


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args, extra)
        # BLAS stays single-threaded so results are independent of --threads
        with threadpool_limits(limits=1):
            dispatch(args.command, cfg)
    except StageError as exc:
        logger.error("%s", exc)
        return exit_code(exc)
    except MVECFError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
