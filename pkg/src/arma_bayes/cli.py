"""Command line entry point: ``arma-bayes run <config> [options]``.

Exit codes: 0 when every job passes its verdict, 2 when any verdict fails,
1 on configuration or operational errors.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ExperimentConfig
from .errors import ArmaBayesError, ConfigInvalid
from .risk import WORKERS_ENV

log = logging.getLogger("arma_bayes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arma-bayes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the jobs of an experiment config")
    run.add_argument("config", help="path to a JSON experiment config")
    run.add_argument("--jobs", type=int, default=None,
                     help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    run.add_argument("--out", default=None, help="output directory (default: results/<hash>)")
    run.add_argument("--formats", default="csv,json,svg",
                     help="comma separated subset of csv,json,svg")
    run.add_argument("--seed", type=int, default=None, help="override the master seed")
    run.add_argument("-q", "--quiet", action="store_true")
    show = sub.add_parser("show-config", help="print the canonical config and its hash")
    show.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.command == "show-config":
            sys.stdout.write(cfg.to_text())
            print(f"hash {cfg.hash}")
            return 0
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        formats = [f.strip() for f in args.formats.split(",") if f.strip()]
        workers = args.jobs if args.jobs is not None else int(os.environ.get(WORKERS_ENV, "1"))
        out = args.out or os.path.join("results", cfg.hash)

        from .harness import emit_report, run_experiment

        bundle = run_experiment(cfg, workers=workers, log=log.info)
        for path in emit_report(bundle, out, formats):
            log.info(f"wrote {path}")
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ArmaBayesError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for job in bundle.jobs:
        print(f"{job.job}: {'pass' if job.verdict else 'FAIL'}")
    return 0 if bundle.verdict else 2


if __name__ == "__main__":
    sys.exit(main())
