"""Variances, z-intervals and the closed-form power comparison."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr, ndtri

from .panel import CellMeans, CohortSchedule, ExperimentPanel

CONTROL_COHORT = 1
TREATMENT_COHORT = 2


class ConservativeVarianceWarning(UserWarning):
    """Emitted when a paired variance is replaced by the unpaired upper bound."""


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    variance: float
    std_error: float
    ci_low: float
    ci_high: float
    p_value: float
    level: float


def z_quantile(level: float) -> float:
    return float(ndtri(1.0 - (1.0 - level) / 2.0))


def gaussian_test(point: float, variance: float, level: float = 0.95) -> IntervalEstimate:
    """Two-sided z interval at confidence ``level`` and the p-value for H0: point == 0."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if variance < 0 or math.isnan(variance):
        raise ValueError(f"variance must be non-negative, got {variance}")
    se = math.sqrt(variance)
    half = z_quantile(level) * se
    if se == 0.0:
        p = 1.0 if point == 0.0 else 0.0
    else:
        p = float(2.0 * ndtr(-abs(point) / se))
    return IntervalEstimate(float(point), float(variance), se, point - half, point + half, p, level)


def _arm_rows(panel: ExperimentPanel, cohort: int) -> np.ndarray:
    return panel.values[panel.cohorts == cohort]


def _linearized_variance(block: np.ndarray, weights: np.ndarray) -> float:
    """Variance of ``sum_j w_j * mean_j`` over independent units.

    Each arm statistic is a weighted sum of per-window means taken over the
    units observed in that window; it is linear in unit contributions, so its
    variance is N times the sample variance of those contributions.
    """
    seen = ~np.isnan(block)
    n = seen.sum(axis=0)
    active = weights != 0
    if np.any(n[active] == 0):
        raise ValueError("a window used by the estimate has no observed units")
    scale = np.zeros_like(weights, dtype=float)
    scale[active] = weights[active] / n[active]
    contrib = (np.where(seen, block, 0.0) * scale).sum(axis=1)
    used = (seen & active).any(axis=1)
    contrib = contrib[used]
    if contrib.size < 2:
        raise ValueError("fewer than 2 units in an arm")
    return float(contrib.size * contrib.var(ddof=1))


def did_variance(panel: ExperimentPanel, t: int) -> float:
    """Variance of the difference-in-differences learning estimate at window ``t``.

    On a zero-imputed panel this is ``s2_T/n_T + s2_C/n_C`` over the paired
    per-unit differences ``y(t) - y(1)``, which carries the within-unit
    correlation. On a sparse panel the pairing is unreliable and the sum of
    the four cell-mean variances is returned instead, with a
    :class:`ConservativeVarianceWarning`.
    """
    if not 2 <= t <= panel.n_windows:
        raise ValueError(f"t must lie in 2..{panel.n_windows}, got {t}")
    if panel.policy != "zero":
        warnings.warn(
            "observed-only panel: DID variance uses the unpaired (conservative) fallback",
            ConservativeVarianceWarning,
            stacklevel=2,
        )
        return did_variance_unpaired(panel, t)
    weights = np.zeros(panel.n_windows)
    weights[0] = -1.0
    weights[t - 1] = 1.0
    total = 0.0
    for cohort in (TREATMENT_COHORT, CONTROL_COHORT):
        total += _linearized_variance(_arm_rows(panel, cohort), weights)
    return total


def did_variance_unpaired(panel: ExperimentPanel, t: int) -> float:
    total = 0.0
    for cohort in (TREATMENT_COHORT, CONTROL_COHORT):
        block = _arm_rows(panel, cohort)
        for j in (1, t):
            col = block[:, j - 1]
            col = col[~np.isnan(col)]
            if col.size < 2:
                raise ValueError(f"fewer than 2 units in cohort {cohort}, window {j}")
            total += col.var(ddof=1) / col.size
    return float(total)


def _cell_mean_variance(cells: CellMeans, cohort: int, window: int) -> float:
    _, n, s2 = cells.get(cohort, window)
    if n < 2:
        raise ValueError(f"degenerate cell (cohort {cohort}, window {window}) has {n} unit(s)")
    return s2 / n


def ladder_variance(cells: CellMeans, t: int) -> float:
    return _cell_mean_variance(cells, 2, t) + _cell_mean_variance(cells, t + 1, t)


def cross_sectional_variance(cells: CellMeans, t: int) -> float:
    k = cells.schedule.n_cohorts
    last = k - 1
    return _cell_mean_variance(cells, k - t + 1, last) + _cell_mean_variance(cells, k, last)


def effect_variance(panel: ExperimentPanel, t: int) -> float:
    """Variance of the cumulative treatment effect through window ``t``.

    Zero-imputed panels use per-unit cumulative averages; sparse panels add
    the per-window two-sample variances as if windows were independent.
    """
    if panel.policy == "zero":
        weights = np.zeros(panel.n_windows)
        weights[:t] = 1.0 / t
        return sum(
            _linearized_variance(_arm_rows(panel, c), weights)
            for c in (TREATMENT_COHORT, CONTROL_COHORT)
        )
    total = 0.0
    for c in (TREATMENT_COHORT, CONTROL_COHORT):
        block = _arm_rows(panel, c)[:, :t]
        for j in range(t):
            col = block[:, j]
            col = col[~np.isnan(col)]
            if col.size < 2:
                raise ValueError(f"fewer than 2 units in cohort {c}, window {j + 1}")
            total += col.var(ddof=1) / col.size
    return total / (t * t)


def annotate_effects(effects, panel: ExperimentPanel, level: float = 0.95):
    """Return ``effects`` with variance, interval and p-value per window."""
    tests = [gaussian_test(effects.tau_hat[j], effect_variance(panel, j + 1), level)
             for j in range(len(effects.tau_hat))]
    return replace(effects, **_stack(tests), level=level)


def annotate_learning(series, panel: ExperimentPanel | None, cells: CellMeans | None,
                      level: float = 0.95):
    """Attach variance, interval and p-value to every window ``t >= 2`` of a learning series."""
    tests = [gaussian_test(0.0, 0.0, level)]
    for t in range(2, len(series.delta_hat) + 1):
        if series.method == "did":
            var = did_variance(panel, t)
        elif series.method == "ladder":
            var = ladder_variance(cells, t)
        elif series.method == "cross-sectional":
            var = cross_sectional_variance(cells, t)
        else:
            raise ValueError(f"unknown method {series.method!r}")
        tests.append(gaussian_test(series.delta_hat[t - 1], var, level))
    out = _stack(tests)
    out["p_value"][0] = np.nan
    return replace(series, **out, level=level)


def _stack(tests: list[IntervalEstimate]) -> dict[str, np.ndarray]:
    return {
        "variance": np.array([x.variance for x in tests]),
        "ci_low": np.array([x.ci_low for x in tests]),
        "ci_high": np.array([x.ci_high for x in tests]),
        "p_value": np.array([x.p_value for x in tests]),
    }


@dataclass(frozen=True)
class PowerComparison:
    n: int
    k: int
    sigma_sq: float
    rho: float
    var_experimental: float
    var_observational: float
    crossover_rho: float

    @property
    def observational_wins(self) -> bool:
        return self.var_observational < self.var_experimental and not self.tie

    @property
    def tie(self) -> bool:
        return math.isclose(self.var_observational, self.var_experimental, rel_tol=1e-12)

    @property
    def winner(self) -> str:
        if self.tie:
            return "tie"
        return "observational" if self.observational_wins else "experimental"


def power_comparison(n: int, k: int, sigma_sq: float, rho: float) -> PowerComparison:
    """Closed-form variances of the ladder and DID learning estimates under an equal split.

    The ladder contrast uses two cohorts of ``n / k`` units; the DID contrast
    uses two arms of ``n / 2`` units whose window differences share the
    within-unit correlation ``rho``.
    """
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    if n < k:
        raise ValueError(f"n must be >= k, got n={n}, k={k}")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    if not sigma_sq > 0:
        raise ValueError(f"sigma_sq must be positive, got {sigma_sq}")
    return PowerComparison(
        n=n, k=k, sigma_sq=sigma_sq, rho=rho,
        var_experimental=2.0 * k * sigma_sq / n,
        var_observational=8.0 * (1.0 - rho) * sigma_sq / n,
        crossover_rho=1.0 - k / 4.0,
    )


def estimate_rho(panel: ExperimentPanel) -> float:
    """Mean pairwise cross-window correlation of cohort-centred unit values.

    Only units observed in every window contribute. Returns NaN when fewer
    than two windows or three complete units are available.
    """
    if panel.n_windows < 2:
        return float("nan")
    complete = ~np.isnan(panel.values).any(axis=1)
    parts = []
    for c in np.unique(panel.cohorts[complete]):
        block = panel.values[complete & (panel.cohorts == c)]
        if block.shape[0] >= 2:
            parts.append(block - block.mean(axis=0))
    if not parts:
        return float("nan")
    centred = np.vstack(parts)
    if centred.shape[0] < 3:
        return float("nan")
    sd = centred.std(axis=0)
    if np.any(sd == 0):
        return float("nan")
    corr = np.corrcoef(centred, rowvar=False)
    w = corr.shape[0]
    return float((corr.sum() - np.trace(corr)) / (w * (w - 1)))
