"""Command-line entrypoint

    python cli.py run --config CONFIG.json [--output-dir DIR] [--workers N]
    python cli.py plot --run-dir DIR [--log-y | --no-log-y]
    python cli.py report --run-dir DIR [--window W]
    python cli.py dist-test --run-dir DIR [--reference analytic|two-sample] [--alpha A]
    python cli.py order-check --kind KIND [--h0 H] [--levels K] ...
    python cli.py serve [--host HOST] [--port PORT]
    python cli.py version

Exit codes: 0 success, 2 invalid config or precondition, 3 every seed
diverged, 4 other runtime failure.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

from logging_utils.config import setup_logging
from services import __version__
from services.errors import OrderLabError
from services.experiment_runner import (
    ORDER_CHECK_KINDS,
    dist_test,
    load_manifest,
    order_check_table,
    plot_run,
    report_run,
    run_experiment,
)
from utils.io_utils import write_rows_csv
from validators.config_schema import parse_config
from validators.config_validator import load_config

logger = logging.getLogger(__name__)


def _print_json(document) -> None:
    print(json.dumps(document, indent=2, sort_keys=True))


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    summary = run_experiment(config, output_dir=args.output_dir, workers=args.workers)
    print(summary.run_dir)
    for job in summary.manifest["jobs"]:
        print(f"seed={job['seed']} mode={job['mode']} status={job['status']}")
    return summary.exit_code


def cmd_plot(args: argparse.Namespace) -> int:
    for path in plot_run(args.run_dir, log_y=args.log_y):
        print(path)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    window = args.window
    if window is None:
        window = parse_config(load_manifest(args.run_dir)["config"]).stability_window
    _print_json(report_run(args.run_dir, window).to_dict())
    return 0


def cmd_dist_test(args: argparse.Namespace) -> int:
    _print_json(dist_test(args.run_dir, reference=args.reference, alpha=args.alpha))
    return 0


def cmd_order_check(args: argparse.Namespace) -> int:
    rows = order_check_table(
        args.kind, h0=args.h0, levels=args.levels, steps=args.steps, dim=args.dim,
        batches=args.batches, rows_per_batch=args.rows_per_batch, c=args.c, seed=args.seed,
    )
    for row in rows:
        ratio = "" if row.ratio is None else f"{row.ratio:.4f}"
        print(f"h={row.h:<10g} error={row.error:.6e} ratio={ratio}")
    if args.output:
        write_rows_csv(args.output, ("h", "error", "ratio"), rows)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port)
    return 0


def cmd_version(args: argparse.Namespace) -> int:
    print(f"iteration-order-lab {__version__}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iteration-order-lab",
                                     description="Forward vs backward operator-composition experiments")
    parser.add_argument("--verbose", action="store_true", help="also log to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--output-dir", default=None, help="overrides the config's output_dir")
    run.add_argument("--workers", type=int, default=None, help="concurrent jobs (default ORDER_LAB_WORKERS or 1)")
    run.set_defaults(handler=cmd_run)

    plot = sub.add_parser("plot", help="re-render per-seed plots of a run")
    plot.add_argument("--run-dir", required=True, type=Path)
    plot.add_argument("--log-y", action=argparse.BooleanOptionalAction, default=True,
                      help="logarithmic y axis (default); --no-log-y for a linear one")
    plot.set_defaults(handler=cmd_plot)

    report = sub.add_parser("report", help="stability report over a final window")
    report.add_argument("--run-dir", required=True, type=Path)
    report.add_argument("--window", type=int, default=None, help="default: the config's stability_window")
    report.set_defaults(handler=cmd_report)

    dist = sub.add_parser("dist-test", help="distribution test of backward limits")
    dist.add_argument("--run-dir", required=True, type=Path)
    dist.add_argument("--reference", choices=("analytic", "two-sample"), default="analytic")
    dist.add_argument("--alpha", type=float, default=0.01)
    dist.set_defaults(handler=cmd_dist_test)

    order = sub.add_parser("order-check", help="order-of-accuracy table over a halving ladder")
    order.add_argument("--kind", choices=ORDER_CHECK_KINDS, required=True)
    order.add_argument("--h0", type=float, default=0.1)
    order.add_argument("--levels", type=int, default=4)
    order.add_argument("--steps", type=int, default=10)
    order.add_argument("--dim", type=int, default=5)
    order.add_argument("--batches", type=int, default=10)
    order.add_argument("--rows-per-batch", type=int, default=12)
    order.add_argument("--c", type=int, default=3)
    order.add_argument("--seed", type=int, default=0)
    order.add_argument("--output", type=Path, default=None, help="also write the table as CSV")
    order.set_defaults(handler=cmd_order_check)

    serve = sub.add_parser("serve", help="start the HTTP API")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=int(os.environ.get("FASTAPI_PORT", "5678")))
    serve.set_defaults(handler=cmd_serve)

    version = sub.add_parser("version", help="print the version")
    version.set_defaults(handler=cmd_version)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose)
    try:
        return args.handler(args)
    except OrderLabError as e:
        logger.error("%s failed: %s", args.command, e.raw_error or e.message)
        print(f"error: {e.message}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
