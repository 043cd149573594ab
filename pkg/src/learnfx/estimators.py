"""Treatment-effect and user-learning point estimators.

All estimators read cohort 1 as control and cohort 2 as always-treated, which
holds for both the two-cohort and the ladder schedule. Interval attachment
lives in :mod:`learnfx.inference`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import CONTROL_COHORT, TREATMENT_COHORT, gaussian_test
from .panel import CellMeans, ExperimentPanel, bucket_windows

LEARNING_METHODS = ("did", "ladder", "cross-sectional")


class EstimationError(ValueError):
    """The data cannot support the requested estimate."""


def _nan_like(n: int) -> np.ndarray:
    return np.full(n, np.nan)


@dataclass(frozen=True, eq=False)
class EffectSeries:
    """Cumulative treatment effect per window, ``tau_hat[t - 1]`` for window ``t``."""

    tau_hat: np.ndarray
    window_diff: np.ndarray
    variance: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    p_value: np.ndarray | None = None
    level: float | None = None

    @property
    def windows(self) -> np.ndarray:
        return np.arange(1, len(self.tau_hat) + 1)


@dataclass(frozen=True, eq=False)
class LearningSeries:
    """User-learning estimates; ``delta_hat[0]`` is window 1 and is 0 by definition."""

    method: str
    delta_hat: np.ndarray
    variance: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    p_value: np.ndarray | None = None
    level: float | None = None

    @property
    def windows(self) -> np.ndarray:
        return np.arange(1, len(self.delta_hat) + 1)


@dataclass(frozen=True)
class QuickDetectResult:
    delta2_hat: float
    std_error: float
    p_value: float
    n_units_used: int
    n_treatment: int = 0
    n_control: int = 0
    n_excluded: int = 0
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    level: float = 0.95
    excluded_units: tuple = field(default=(), repr=False)


def _require_cells(cells: CellMeans, pairs) -> None:
    for cohort, window in pairs:
        if cohort > cells.count.shape[0] or window > cells.count.shape[1]:
            raise EstimationError(f"cell (cohort {cohort}, window {window}) is outside the schedule")
        if cells.count[cohort - 1, window - 1] < 1:
            raise EstimationError(f"empty cell: cohort {cohort}, window {window}")


def treatment_effect_series(cells: CellMeans) -> EffectSeries:
    """Running mean of the per-window treatment minus control difference."""
    w = cells.schedule.n_windows
    _require_cells(cells, [(c, j) for c in (CONTROL_COHORT, TREATMENT_COHORT) for j in range(1, w + 1)])
    diff = cells.mean[TREATMENT_COHORT - 1] - cells.mean[CONTROL_COHORT - 1]
    tau = np.cumsum(diff) / np.arange(1, w + 1)
    return EffectSeries(tau_hat=tau, window_diff=diff.copy())


def did_learning_series(cells: CellMeans) -> LearningSeries:
    """Difference-in-differences: ``(T^t - T^1) - (C^t - C^1)``."""
    w = cells.schedule.n_windows
    if w < 2:
        raise EstimationError("need at least 2 windows to estimate user-learning")
    _require_cells(cells, [(c, j) for c in (CONTROL_COHORT, TREATMENT_COHORT) for j in range(1, w + 1)])
    t_arm = cells.mean[TREATMENT_COHORT - 1]
    c_arm = cells.mean[CONTROL_COHORT - 1]
    delta = (t_arm - t_arm[0]) - (c_arm - c_arm[0])
    delta[0] = 0.0
    return LearningSeries("did", delta)


def _require_ladder(cells: CellMeans) -> int:
    if cells.schedule.design != "ladder":
        raise EstimationError("ladder estimators need a ladder schedule")
    return cells.schedule.n_cohorts


def ladder_learning_series(cells: CellMeans) -> LearningSeries:
    """Contemporaneous ladder contrast ``T_2^t - T_{t+1}^t``."""
    k = _require_ladder(cells)
    w = k - 1
    if w < 2:
        raise EstimationError("need at least 2 windows to estimate user-learning")
    _require_cells(cells, [(2, t) for t in range(2, w + 1)] + [(t + 1, t) for t in range(2, w + 1)])
    delta = np.zeros(w)
    for t in range(2, w + 1):
        delta[t - 1] = cells.mean[1, t - 1] - cells.mean[t, t - 1]
    return LearningSeries("ladder", delta)


def cross_sectional_learning_series(cells: CellMeans) -> LearningSeries:
    """Final-window contrast across exposure ages: ``T_{k-t+1}^{k-1} - T_k^{k-1}``."""
    k = _require_ladder(cells)
    w = k - 1
    if w < 2:
        raise EstimationError("need at least 2 windows to estimate user-learning")
    _require_cells(cells, [(i, w) for i in range(2, k + 1)])
    last = cells.mean[:, w - 1]
    delta = np.zeros(w)
    for t in range(2, w + 1):
        delta[t - 1] = last[k - t] - last[k - 1]
    return LearningSeries("cross-sectional", delta)


def learning_series(cells: CellMeans, method: str) -> LearningSeries:
    if method == "did":
        return did_learning_series(cells)
    if method == "ladder":
        return ladder_learning_series(cells)
    if method in ("cross", "cross-sectional"):
        return cross_sectional_learning_series(cells)
    raise ValueError(f"unknown learning method {method!r}")


def half_differences(panel: ExperimentPanel) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit (second-half mean - first-half mean) over each unit's own exposure span.

    The first half holds ``ceil(m / 2)`` of the ``m`` exposed windows. Returns
    the differences and a mask of qualifying units; units with fewer than two
    exposed windows, or with a half lacking any observation, do not qualify.
    """
    aligned = bucket_windows(panel, "exposure")
    span = aligned.exposure_end - aligned.exposure_start + 1
    first = (span + 1) // 2
    w = np.arange(1, aligned.n_windows + 1)[None, :]
    seen = ~np.isnan(aligned.values)
    x = np.where(seen, aligned.values, 0.0)
    in_first = seen & (w <= first[:, None])
    in_second = seen & (w > first[:, None]) & (w <= span[:, None])
    n1 = in_first.sum(axis=1)
    n2 = in_second.sum(axis=1)
    ok = (span >= 2) & (n1 > 0) & (n2 > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = (x * in_second).sum(axis=1) / n2 - (x * in_first).sum(axis=1) / n1
    return np.where(ok, diff, np.nan), ok


def quick_detect(panel: ExperimentPanel, level: float = 0.95) -> QuickDetectResult:
    """Two-half DID on user-level exposure windows.

    Compares the average within-unit change from the first to the second half
    of exposure between treatment (cohort 2) and control (cohort 1).
    """
    diff, ok = half_differences(panel)
    arms = {}
    for cohort in (TREATMENT_COHORT, CONTROL_COHORT):
        d = diff[ok & (panel.cohorts == cohort)]
        if d.size < 2:
            raise EstimationError(
                f"no qualifying units: cohort {cohort} has {d.size} unit(s) with >= 2 exposed windows"
            )
        arms[cohort] = d
    dt, dc = arms[TREATMENT_COHORT], arms[CONTROL_COHORT]
    point = float(dt.mean() - dc.mean())
    var = float(dt.var(ddof=1) / dt.size + dc.var(ddof=1) / dc.size)
    test = gaussian_test(point, var, level)
    arm_units = np.isin(panel.cohorts, (CONTROL_COHORT, TREATMENT_COHORT))
    excluded = panel.unit_ids[arm_units & ~ok]
    return QuickDetectResult(
        delta2_hat=point,
        std_error=test.std_error,
        p_value=test.p_value,
        n_units_used=int(dt.size + dc.size),
        n_treatment=int(dt.size),
        n_control=int(dc.size),
        n_excluded=int(excluded.size),
        ci_low=test.ci_low,
        ci_high=test.ci_high,
        level=level,
        excluded_units=tuple(excluded.tolist()),
    )
