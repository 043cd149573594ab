"""Command-line entry point: ``learnfx analyze | detect | simulate | power``.

Exit codes: 0 success, 1 error, 2 sample ratio mismatch under ``--strict-srm``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import timedelta

from . import __version__
from .estimators import EstimationError, quick_detect
from .extrapolate import FitError
from .inference import power_comparison
from .panel import MalformedInputError, bucket_windows, impute, ingest, load_schedule
from .report import (
    build_report,
    dumps,
    file_digest,
    format_period_table,
    parse_periods,
    render_svg,
    series_table,
    to_csv,
)
from .simulate import ConfigError, SimulationConfig, load_config, paper_preset, run_replications

EXIT_OK, EXIT_ERROR, EXIT_SRM = 0, 1, 2


def _ratios(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated proportions, got {text!r}") from None


def _alpha(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return value


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _load_panel(args):
    panel = ingest(args.input, window_length=timedelta(days=args.window_length))
    panel = bucket_windows(panel, args.mode)
    return impute(panel, args.impute)


def cmd_analyze(args) -> int:
    panel = _load_panel(args)
    schedule = load_schedule(args.schedule)
    config = {
        "mode": args.mode, "impute": args.impute, "alpha": args.alpha, "method": args.method,
        "fit": args.fit, "bootstrap": args.bootstrap, "window_length_days": args.window_length,
        "expected_ratios": args.expected_ratios, "periods": args.periods,
    }
    metadata = {
        "input_sha256": file_digest(args.input),
        "schedule_sha256": file_digest(args.schedule),
        "seed": args.seed,
        "config": config,
    }
    report = build_report(
        panel, schedule,
        alpha=args.alpha, method=args.method, fit=args.fit or args.bootstrap > 0,
        n_boot=args.bootstrap, seed=args.seed, expected_ratios=args.expected_ratios,
        periods=parse_periods(args.periods) if args.periods else None,
        metadata=metadata,
    )
    if args.format == "json":
        _write(args.output, dumps(report))
    else:
        _write(args.output, to_csv(series_table(report), args.csv_digits))
    if args.svg:
        _write(args.svg, render_svg(report))
    if args.table:
        print(format_period_table(report["periods"]), file=sys.stderr if args.output in (None, "-") else sys.stdout)
    for note in report["warnings"]:
        print(f"warning: {note}", file=sys.stderr)
    if args.strict_srm and report["srm"]["flagged"]:
        print("error: sample ratio mismatch (strict mode)", file=sys.stderr)
        return EXIT_SRM
    return EXIT_OK


def cmd_detect(args) -> int:
    panel = _load_panel(args)
    result = quick_detect(panel, level=1.0 - args.alpha)
    flag = None
    if result.p_value < args.alpha:
        flag = "novelty" if result.delta2_hat < 0 else "primacy"
    out = {
        "delta2": result.delta2_hat,
        "se": result.std_error,
        "p_value": result.p_value,
        "n_units": result.n_units_used,
        "alpha": args.alpha,
        "flag": flag,
    }
    print(json.dumps(out))
    return EXIT_OK


_SIM_FLAGS = {
    "n_units": "n_units", "k": "k", "sigma": "sigma", "rho": "rho",
    "effect_a": "effect_a", "effect_b": "effect_b", "effect_sd": "effect_sd",
    "replications": "replications", "seed": "seed", "design": "design",
}


def cmd_simulate(args) -> int:
    if args.paper_preset:
        config = paper_preset()
    elif args.config:
        config = load_config(args.config)
    else:
        config = SimulationConfig()
    for flag, attr in _SIM_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            setattr(config, attr, value)
    config.validate()
    summary = run_replications(config)
    _write(args.output, json.dumps(summary.to_json(), indent=2, allow_nan=False) + "\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["replication", "approach", "A", "B", "converged"],
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(summary.rows)
    return EXIT_OK


def cmd_power(args) -> int:
    pc = power_comparison(args.n, args.k, args.sigma_sq, args.rho)
    print(json.dumps({
        "n": pc.n, "k": pc.k, "sigma_sq": pc.sigma_sq, "rho": pc.rho,
        "var_experimental": pc.var_experimental,
        "var_observational": pc.var_observational,
        "crossover_rho": pc.crossover_rho,
        "winner": pc.winner,
    }))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learnfx", description="User-learning analysis for A/B tests")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def panel_flags(p):
        p.add_argument("--input", required=True, help="long-format CSV: unit_id, cohort, window|timestamp, value")
        p.add_argument("--mode", choices=["calendar", "exposure"], default="calendar")
        p.add_argument("--impute", choices=["zero", "observed"], default="zero")
        p.add_argument("--window-length", type=float, default=1.0,
                       help="window length in days for timestamped input")
        p.add_argument("--alpha", type=_alpha, default=0.05)

    p = sub.add_parser("analyze", help="full effect and user-learning report")
    panel_flags(p)
    p.add_argument("--schedule", required=True, help="schedule JSON")
    p.add_argument("--method", choices=["did", "ladder", "cross", "all"], default="all")
    p.add_argument("--fit", action="store_true", help="fit the exponential learning curve")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap replicates (implies --fit)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--csv-digits", type=int, default=6)
    p.add_argument("--expected-ratios", type=_ratios, default=None)
    p.add_argument("--periods", default=None, help="e.g. 'First 3 days=3,Week 1=7'")
    p.add_argument("--strict-srm", action="store_true")
    p.add_argument("--svg", default=None)
    p.add_argument("--table", action="store_true", help="print the period summary table")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("detect", help="two-half quick test for user-learning")
    panel_flags(p)
    p.set_defaults(func=cmd_detect, mode="exposure")

    p = sub.add_parser("simulate", help="replication study of both approaches")
    p.add_argument("--config", default=None)
    p.add_argument("--paper-preset", action="store_true")
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-units", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--effect-a", type=float)
    p.add_argument("--effect-b", type=float)
    p.add_argument("--effect-sd", type=float)
    p.add_argument("--design", choices=["two-cohort", "ladder"])
    p.add_argument("--output", default=None)
    p.add_argument("--csv", default=None, help="per-replication fitted (A, B)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("power", help="closed-form variance comparison")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--sigma-sq", type=float, default=1.0)
    p.add_argument("--rho", type=float, required=True)
    p.set_defaults(func=cmd_power)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MalformedInputError, ConfigError, EstimationError, FitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
