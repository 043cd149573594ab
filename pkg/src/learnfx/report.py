"""Analysis report assembly and serialization (JSON, tidy CSV, SVG)."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import asdict

import numpy as np

from . import __version__
from .estimators import (
    EstimationError,
    EffectSeries,
    LearningSeries,
    learning_series,
    quick_detect,
    treatment_effect_series,
)
from .extrapolate import (
    BootstrapError,
    FitError,
    bootstrap_fit,
    fit_exponential,
    long_term_effect,
    with_bootstrap,
)
from .inference import (
    ConservativeVarianceWarning,
    annotate_effects,
    annotate_learning,
    estimate_rho,
    power_comparison,
)
from .panel import CohortSchedule, ExperimentPanel, cell_means, srm_check

SCHEMA_VERSION = "1.0"
METHOD_TAGS = {"did": "did", "ladder": "ladder", "cross": "cross-sectional"}


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def default_periods(n_windows: int) -> list[tuple[str, int]]:
    """First three windows, then one row per completed week (windows read as days)."""
    if n_windows < 7:
        return [(f"Window {t}", t) for t in range(2, n_windows + 1)]
    periods = [("First 3 days", 3)]
    periods += [(f"Week {i}", 7 * i) for i in range(1, n_windows // 7 + 1)]
    return periods


def parse_periods(text: str) -> list[tuple[str, int]]:
    out = []
    for item in text.split(","):
        label, _, end = item.rpartition("=")
        if not label or not end.strip().isdigit():
            raise ValueError(f"period must look like 'Label=window', got {item!r}")
        out.append((label.strip(), int(end)))
    return out


def effect_rows(effects: EffectSeries) -> list[dict]:
    return [
        {
            "window": int(t),
            "point": _num(effects.tau_hat[t - 1]),
            "window_diff": _num(effects.window_diff[t - 1]),
            "variance": _num(effects.variance[t - 1]),
            "ci_low": _num(effects.ci_low[t - 1]),
            "ci_high": _num(effects.ci_high[t - 1]),
            "p_value": _num(effects.p_value[t - 1]),
        }
        for t in effects.windows
    ]


def learning_rows(series: LearningSeries) -> list[dict]:
    return [
        {
            "window": int(t),
            "point": _num(series.delta_hat[t - 1]),
            "variance": _num(series.variance[t - 1]),
            "ci_low": _num(series.ci_low[t - 1]),
            "ci_high": _num(series.ci_high[t - 1]),
            "p_value": _num(series.p_value[t - 1]),
        }
        for t in series.windows
    ]


def _fit_dict(fit) -> dict:
    return {k: (_num(v) if isinstance(v, float) else v) for k, v in asdict(fit).items()}


def period_rows(panel: ExperimentPanel, effects: EffectSeries, cells, periods, alpha: float) -> list[dict]:
    """Period summary: effect and two-half learning estimate through each period end."""
    rows = []
    control = cells.mean[0]
    for label, end in periods:
        if not 1 <= end <= panel.n_windows:
            raise ValueError(f"period {label!r} ends at window {end}, outside 1..{panel.n_windows}")
        base = float(np.mean(control[:end]))
        tau = float(effects.tau_hat[end - 1])
        row = {
            "period": label,
            "end_window": end,
            "tau_hat": _num(tau),
            "tau_pct": _num(100.0 * tau / base) if base else None,
            "tau_p_value": _num(effects.p_value[end - 1]),
            "delta2": None,
            "delta2_pct": None,
            "delta2_p_value": None,
            "significant": False,
        }
        try:
            qd = quick_detect(panel.truncate(end), level=1 - alpha)
        except EstimationError:
            qd = None
        if qd is not None:
            row["delta2"] = _num(qd.delta2_hat)
            row["delta2_pct"] = _num(100.0 * qd.delta2_hat / base) if base else None
            row["delta2_p_value"] = _num(qd.p_value)
            row["significant"] = bool(qd.p_value < alpha)
        rows.append(row)
    return rows


def format_period_table(rows: list[dict]) -> str:
    def pct(x, p):
        if x is None:
            return "n/a"
        return f"{x:.2f}% ({p:.2g})"

    lines = [f"{'Time Period':<16}{'tau in % (p-value)':<24}{'delta2 in % (p-value)':<26}"]
    for r in rows:
        star = "*" if r["significant"] else ""
        lines.append(
            f"{r['period']:<16}{pct(r['tau_pct'], r['tau_p_value']):<24}"
            f"{pct(r['delta2_pct'], r['delta2_p_value']):<26}{star}"
        )
    return "\n".join(lines)


def _methods_for(requested: str, schedule: CohortSchedule) -> list[str]:
    if requested == "all":
        return ["did", "ladder", "cross"] if schedule.design == "ladder" else ["did"]
    return [requested]


def build_report(
    panel: ExperimentPanel,
    schedule: CohortSchedule,
    *,
    alpha: float = 0.05,
    method: str = "all",
    fit: bool = False,
    n_boot: int = 0,
    seed: int = 0,
    expected_ratios=None,
    periods=None,
    metadata: dict | None = None,
    threads: int | None = None,
) -> dict:
    level = 1.0 - alpha
    notes: list[str] = []
    srm = srm_check(panel, expected_ratios)
    if srm.is_srm:
        notes.append(f"sample ratio mismatch: chi2={srm.statistic:.4g}, p={srm.p_value:.3g}")
    if panel.policy == "observed":
        notes.append(
            "observed-only analysis assumes missingness is distributed alike across arms; "
            "this is not tested beyond SRM"
        )

    cells = cell_means(panel, schedule)
    effects = annotate_effects(treatment_effect_series(cells), panel, level)

    learning: dict[str, LearningSeries] = {}
    for m in _methods_for(method, schedule):
        series = learning_series(cells, m)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConservativeVarianceWarning)
            series = annotate_learning(series, panel, cells, level)
        if any(issubclass(w.category, ConservativeVarianceWarning) for w in caught):
            notes.append(f"{series.method}: variance uses the unpaired conservative fallback")
        learning[series.method] = series
    if learning:
        notes.append("per-window p-values are not adjusted for multiple testing")

    try:
        qd = quick_detect(panel, level=level)
        quick = {
            "delta2": _num(qd.delta2_hat), "se": _num(qd.std_error), "p_value": _num(qd.p_value),
            "n_units": qd.n_units_used, "n_excluded": qd.n_excluded,
            "ci_low": _num(qd.ci_low), "ci_high": _num(qd.ci_high),
        }
    except EstimationError as exc:
        quick = None
        notes.append(f"quick detection skipped: {exc}")

    fits, long_term = {}, None
    if fit:
        for tag, series in learning.items():
            try:
                f = fit_exponential(series)
            except ValueError as exc:
                notes.append(f"{tag}: exponential fit skipped: {exc}")
                continue
            if not f.converged:
                notes.append(f"{tag}: exponential fit did not converge")
            if n_boot:
                try:
                    boot = bootstrap_fit(panel, tag, n_boot, seed, schedule, threads=threads)
                    f = with_bootstrap(f, boot)
                    if boot.n_dropped:
                        notes.append(f"{tag}: {boot.n_dropped} of {n_boot} bootstrap replicates dropped (non-converged)")
                except BootstrapError as exc:
                    notes.append(f"{tag}: bootstrap failed: {exc}")
            fits[tag] = f
        primary = next(iter(fits), None)
        if primary is not None:
            try:
                lt = long_term_effect(effects, fits[primary], level)
                long_term = {
                    "method": primary,
                    "observed_effect": _num(lt.observed_effect),
                    "learning_limit": _num(lt.learning_limit),
                    "long_term_effect": _num(lt.long_term_effect),
                    "ci_low": _num(lt.interval.ci_low),
                    "ci_high": _num(lt.interval.ci_high),
                    "p_value": _num(lt.interval.p_value),
                    "final_observed_effect": _num(lt.final_observed_effect),
                    "final_long_term_effect": _num(lt.final_observed_effect + lt.learning_limit),
                }
                if not lt.includes_fit_uncertainty:
                    notes.append("long-term interval excludes extrapolation uncertainty (no bootstrap)")
            except FitError as exc:
                notes.append(f"long-term effect unavailable: {exc}")

    power = None
    if panel.policy == "zero" and panel.n_windows >= 2:
        rho = estimate_rho(panel)
        sigma_sq = float(np.nanmean(cells.var[0]))
        if math.isfinite(rho) and math.isfinite(sigma_sq) and sigma_sq > 0:
            try:
                pc = power_comparison(panel.n_units, panel.n_windows + 1, sigma_sq, max(rho, 0.0))
                power = {**asdict(pc), "winner": pc.winner, "rho_estimated": rho}
            except ValueError:
                power = None

    periods = periods if periods is not None else default_periods(panel.n_windows)
    report = {
        "schema_version": SCHEMA_VERSION,
        "metadata": {"tool": "learnfx", "tool_version": __version__, **(metadata or {})},
        "panel": {
            "units": panel.n_units, "windows": panel.n_windows, "cohorts": panel.n_cohorts,
            "mode": panel.mode, "imputation": panel.policy, "design": schedule.design,
        },
        "srm": {"statistic": _num(srm.statistic), "p_value": _num(srm.p_value),
                "observed": list(srm.observed), "expected": [_num(e) for e in srm.expected],
                "flagged": srm.is_srm},
        "alpha": alpha,
        "treatment_effect": effect_rows(effects),
        "learning": {tag: learning_rows(s) for tag, s in learning.items()},
        "quick_detect": quick,
        "fits": {tag: _fit_dict(f) for tag, f in fits.items()},
        "long_term": long_term,
        "periods": period_rows(panel, effects, cells, periods, alpha) if periods else [],
        "power": {k: (_num(v) if isinstance(v, float) else v) for k, v in power.items()} if power else None,
        "warnings": notes,
    }
    return report


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


CSV_FIELDS = ("table", "window", "estimate", "ci_low", "ci_high", "p_value")


def series_table(report: dict) -> list[dict]:
    rows = [{"table": "treatment_effect", **{k: r[k] for k in ("window", "ci_low", "ci_high", "p_value")},
             "estimate": r["point"]} for r in report["treatment_effect"]]
    for tag, series in report["learning"].items():
        rows += [{"table": f"learning_{tag}", **{k: r[k] for k in ("window", "ci_low", "ci_high", "p_value")},
                  "estimate": r["point"]} for r in series]
    return rows


def to_csv(rows: list[dict], digits: int = 6) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({
            k: ("" if r[k] is None else (f"{r[k]:.{digits}g}" if isinstance(r[k], float) else r[k]))
            for k in CSV_FIELDS
        })
    return buf.getvalue()


def read_csv_table(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {"table": r["table"], "window": int(r["window"])}
        for k in ("estimate", "ci_low", "ci_high", "p_value"):
            row[k] = float(r[k]) if r[k] != "" else None
        out.append(row)
    return out


def render_svg(report: dict, width: int = 640, height: int = 360) -> str:
    """Line chart of the effect and learning series with interval bands."""
    tables = {"treatment_effect": report["treatment_effect"]}
    tables.update({f"learning {k}": v for k, v in report["learning"].items()})
    pts = [(r["window"], v) for rows in tables.values() for r in rows
           for v in (r["point"], r["ci_low"], r["ci_high"]) if v is not None]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>\n'
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts] + [0.0]
    x0, x1 = min(xs), max(max(xs), min(xs) + 1)
    y0, y1 = min(ys), max(ys)
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 40

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{pad}" y1="{sy(0):.1f}" x2="{width - pad}" y2="{sy(0):.1f}" stroke="#999"/>']
    for i, (name, rows) in enumerate(tables.items()):
        c = colors[i % len(colors)]
        band = [r for r in rows if r["ci_low"] is not None and r["ci_high"] is not None]
        if band:
            poly = [f"{sx(r['window']):.1f},{sy(r['ci_high']):.1f}" for r in band]
            poly += [f"{sx(r['window']):.1f},{sy(r['ci_low']):.1f}" for r in reversed(band)]
            parts.append(f'<polygon points="{" ".join(poly)}" fill="{c}" fill-opacity="0.15"/>')
        line = [f"{sx(r['window']):.1f},{sy(r['point']):.1f}" for r in rows if r["point"] is not None]
        parts.append(f'<polyline points="{" ".join(line)}" fill="none" stroke="{c}"/>')
        parts.append(f'<text x="{pad + 5}" y="{pad / 2 + 14 * i}" fill="{c}" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
