"""Command-line entry point.

Subcommands: run, flops, heatmap, report. Exit codes: 0 success,
2 config error, 3 I/O error, 4 numeric failure. SMOEFED_OUTPUT_ROOT
sets the default output root (overridden by --out).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .errors import ConfigError, DomainError, IntegrityError, NumericError
from .experiment import ExperimentConfig, export_heatmap, run_experiment
from .flops import ArchSpec, compare_budgets, count_model

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _output_root(args) -> str:
    if args.out:
        return args.out
    return os.environ.get("SMOEFED_OUTPUT_ROOT", "runs")


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.rounds is not None:
        cfg.rounds = args.rounds
    cfg.validate()
    name = args.name or os.path.splitext(os.path.basename(args.config))[0]
    run_dir = os.path.join(_output_root(args), name)
    artifacts = run_experiment(cfg, run_dir, rounds_limit=args.rounds_limit,
                               resume=args.resume)
    print(f"run complete: {artifacts.run_dir}")
    print(f"metrics: {artifacts.metrics_path}")
    return 0


def cmd_flops(args) -> int:
    spec = ArchSpec.from_file(args.archspec)
    sweep_specs = [spec]
    if args.k_sweep:
        sweep_specs = [spec.replace(k_active=int(k), name=f"{spec.name}_k{k}")
                       for k in args.k_sweep.split(",")]
    elif args.r_sweep:
        sweep_specs = [spec.replace(lora_rank=int(r), name=f"{spec.name}_r{r}")
                       for r in args.r_sweep.split(",")]
    rows = compare_budgets(sweep_specs)
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    return 0


def cmd_heatmap(args) -> int:
    path = export_heatmap(args.run, args.round)
    with open(path) as f:
        sys.stdout.write(f.read())
    return 0


def cmd_report(args) -> int:
    """Merge per-run metrics into one comparison table."""
    rows = []
    for run_dir in args.runs:
        metrics = os.path.join(run_dir, "metrics.csv")
        with open(metrics, newline="") as f:
            for rec in csv.DictReader(f):
                rec["run"] = os.path.basename(os.path.normpath(run_dir))
                rows.append(rec)
    if not rows:
        print("no metric rows found", file=sys.stderr)
        return EXIT_IO
    fields = ["run"] + [k for k in rows[0] if k != "run"]
    writer = csv.DictWriter(sys.stdout, fieldnames=fields, extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoefed",
        description="Desk-scale federated SMoE + LoRA fine-tuning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output root (default $SMOEFED_OUTPUT_ROOT or ./runs)")
    p_run.add_argument("--name", help="run directory name (default: config stem)")
    p_run.add_argument("--seed", type=int, help="override config seed")
    p_run.add_argument("--rounds", type=int, help="override config rounds")
    p_run.add_argument("--rounds-limit", type=int,
                       help="stop after this many rounds (for later resume)")
    p_run.add_argument("--resume", action="store_true",
                       help="continue from the run's latest checkpoint")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="client training parallelism (updates are always "
                            "aggregated in client-id order)")
    p_run.set_defaults(func=cmd_run)

    p_flops = sub.add_parser("flops", help="analytic FLOPs table for an arch spec")
    p_flops.add_argument("archspec")
    p_flops.add_argument("--k-sweep", help="comma-separated active-expert sweep")
    p_flops.add_argument("--r-sweep", help="comma-separated LoRA-rank sweep")
    p_flops.set_defaults(func=cmd_flops)

    p_hm = sub.add_parser("heatmap", help="print a round's activation heatmap CSV")
    p_hm.add_argument("run")
    p_hm.add_argument("--round", type=int, required=True)
    p_hm.set_defaults(func=cmd_heatmap)

    p_rep = sub.add_parser("report", help="merge metrics CSVs from several runs")
    p_rep.add_argument("runs", nargs="+")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IntegrityError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
