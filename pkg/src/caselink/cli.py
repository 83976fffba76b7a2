"""Command-line entry point.

One subcommand per pipeline stage plus ``pipeline`` (all stages in order)
and ``compare`` (metric deltas and significance between two finished runs).

Exit codes: 0 success, 2 missing or stale upstream artifact (the message
names the stage to run), 3 configuration error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import resolve_config
from .corpus import ConfigurationError, DatasetError
from .pipeline import (
    STAGE_ORDER,
    MissingUpstream,
    StaleUpstream,
    compare_runs,
    run_pipeline,
    run_stage,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_UPSTREAM = 2
EXIT_CONFIG = 3


def _add_run_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--run", default="runs/default", help="run directory")
    sub.add_argument("--config", default=None, help="flat key=value config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override one config key")
    sub.add_argument("--dry-run", action="store_true",
                     help="print the resolved plan without executing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caselink",
        description="Graph-based legal case retrieval pipeline",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    for stage in STAGE_ORDER:
        sub = subs.add_parser(stage, help=f"run the {stage} stage")
        _add_run_args(sub)

    sub = subs.add_parser("pipeline", help="run every stage in order")
    _add_run_args(sub)

    cmp_ = subs.add_parser("compare", help="compare two finished runs")
    cmp_.add_argument("run_a")
    cmp_.add_argument("run_b")
    cmp_.add_argument("--metric", default="NDCG@5")
    cmp_.add_argument("--subsets", type=int, default=5)
    cmp_.add_argument("--alpha", type=float, default=0.05)
    cmp_.add_argument("--comparisons", type=int, default=1,
                      help="Bonferroni divisor")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            report = compare_runs(args.run_a, args.run_b, metric=args.metric,
                                  n_subsets=args.subsets, alpha=args.alpha,
                                  comparisons=args.comparisons)
            print(json.dumps(report, indent=2, sort_keys=True))
            tt = report["ttest"]
            verdict = "significant" if tt["significant"] else "not significant"
            print(f"# {args.metric}: t={tt['t']:.4f} p={tt['p']:.6f} -> {verdict} "
                  f"at alpha={tt['alpha']}/{tt['comparisons']}", file=sys.stderr)
            return EXIT_OK

        cfg = resolve_config(args.config, args.overrides)
        if args.command == "pipeline":
            run_pipeline(args.run, cfg, dry_run=args.dry_run)
        else:
            run_stage(args.command, args.run, cfg, dry_run=args.dry_run)
        return EXIT_OK
    except (MissingUpstream, StaleUpstream) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_UPSTREAM
    except DatasetError as exc:
        print(f"error: {exc}; run 'synth' first or point data.root at a dataset",
              file=sys.stderr)
        return EXIT_MISSING_UPSTREAM
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
