"""Command-line interface for the track-monitoring experiment pipeline.

Subcommands mirror the pipeline stages::

    trackmon simulate  --config cfg.json --run RUN [--set key=value ...]
    trackmon inject    --run RUN
    trackmon train     --run RUN
    trackmon embed     --run RUN
    trackmon detect    --run RUN
    trackmon evaluate  --run RUN
    trackmon reproduce --config cfg.json --run RUN [--set key=value ...]

``--run`` names the run directory; a relative name is placed under the
directory in ``$TRACKMON_RUNS`` (default ``./runs``).  ``simulate`` and
``reproduce`` read ``--config`` (omit it for built-in defaults), apply any
``--set section.key=value`` overrides, and freeze the result into the run's
``config.snapshot``; the later stages configure themselves from that
snapshot so a run stays self-consistent.

Exit codes: 0 on success, 1 on domain/schema errors (bad data, contract
violations), 2 on usage errors (unknown flags, malformed overrides).  With
``--error-json``, failures also print a one-line machine-readable JSON
object to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from trackmon.config import (
    PipelineConfig,
    UsageError,
    apply_overrides,
    config_from_dict,
    dump_config,
)
from trackmon.objects import DomainError
from trackmon.pipeline import (
    cmd_detect,
    cmd_embed,
    cmd_evaluate,
    cmd_inject,
    cmd_reproduce,
    cmd_simulate,
    cmd_train,
)

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE_ERROR = 2

RUN_ROOT_ENV = "TRACKMON_RUNS"


def resolve_run_dir(run: str) -> Path:
    """Relative run names land under $TRACKMON_RUNS (default ./runs)."""
    path = Path(run)
    if path.is_absolute():
        return path
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / path


def _load_config_with_overrides(config_path: str | None, assignments: list[str]) -> PipelineConfig:
    if config_path is None:
        data: dict = {}
    else:
        path = Path(config_path)
        if not path.exists():
            raise DomainError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DomainError(f"config {path}: invalid JSON: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise DomainError(f"config {path}: expected a JSON object")
    data = apply_overrides(data, assignments)
    return config_from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's unset flag from clobbering the same flag
    # given before the subcommand (argparse parents + subparsers pitfall).
    common.add_argument(
        "--error-json",
        action="store_true",
        default=argparse.SUPPRESS,
        help="on failure, also print {error, message} as JSON to stderr",
    )
    common.add_argument(
        "--quiet",
        action="store_true",
        default=argparse.SUPPRESS,
        help="suppress progress output",
    )

    parser = argparse.ArgumentParser(
        prog="trackmon",
        description="Self-supervised track embeddings scored by classical "
        "outlier detectors, end to end.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flag(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--run",
            required=True,
            help=f"run directory (relative names resolve under ${RUN_ROOT_ENV} "
            "or ./runs)",
        )

    for name, help_text in (
        ("simulate", "generate train/test tracks and start a run directory"),
        ("reproduce", "full pipeline at n_seeds seeds plus aggregate table"),
    ):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument(
            "--set",
            dest="assignments",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry by dotted name, e.g. training.epochs=40",
        )
        if name == "reproduce":
            p.add_argument(
                "--workers",
                type=int,
                default=1,
                help="run constituent seeds in this many parallel processes "
                "(outputs are identical to the serial schedule)",
            )
        add_run_flag(p)

    for name, help_text in (
        ("inject", "build labeled eval sets from the run's test tracks"),
        ("train", "fit the embedding model on the run's train tracks"),
        ("embed", "embed all splits with the run's checkpoint"),
        ("detect", "fit detectors and score eval splits (latent + baseline)"),
        ("evaluate", "compute the metrics report and figure CSVs"),
    ):
        p = sub.add_parser(name, help=help_text, parents=[common])
        add_run_flag(p)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return EXIT_USAGE_ERROR if exc.code else EXIT_OK
    quiet = getattr(args, "quiet", False)
    error_json = getattr(args, "error_json", False)
    echo = None if quiet else (lambda message: print(message, file=sys.stderr))

    try:
        run_dir = resolve_run_dir(args.run)
        if args.command in ("simulate", "reproduce"):
            config = _load_config_with_overrides(args.config, args.assignments)
            if args.command == "simulate":
                cmd_simulate(config, run_dir, echo)
            else:
                cmd_reproduce(config, run_dir, echo, workers=max(1, args.workers))
                print((run_dir / "report" / "table.txt").read_text(encoding="utf-8"), end="")
        elif args.command == "inject":
            cmd_inject(run_dir, echo)
        elif args.command == "train":
            cmd_train(run_dir, echo)
        elif args.command == "embed":
            cmd_embed(run_dir, echo)
        elif args.command == "detect":
            cmd_detect(run_dir, echo)
        elif args.command == "evaluate":
            cmd_evaluate(run_dir, echo)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        if error_json:
            payload = {"error": type(exc).__name__, "message": str(exc)}
            print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return EXIT_USAGE_ERROR
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if error_json:
            payload = {"error": type(exc).__name__, "message": str(exc)}
            print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return EXIT_DOMAIN_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
