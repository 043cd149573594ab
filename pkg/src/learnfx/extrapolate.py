"""Exponential user-learning curves, bootstrap errors and long-term effects.

The learning curve is ``delta(t) = A * (exp(-B t) - exp(-B))``, which is zero
at ``t = 1`` and tends to ``-A * exp(-B)``. It is fitted by damped
Gauss-Newton (Levenberg-Marquardt) in ``(A, log B)`` so ``B`` stays positive
and ``A`` may take either sign (novelty or primacy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._parallel import ordered_map
from .estimators import EffectSeries, LearningSeries, learning_series
from .inference import IntervalEstimate, gaussian_test
from .panel import CohortSchedule, ExperimentPanel, cell_means

GTOL = 1e-10
MAX_ITER = 200
B_GRID = np.logspace(np.log10(0.01), np.log10(5.0), 120)
_THETA_BOUND = 50.0


class FitError(RuntimeError):
    pass


class BootstrapError(FitError):
    pass


@dataclass(frozen=True)
class ExponentialFit:
    A: float
    B: float
    converged: bool
    residual_sse: float
    delta_infinity: float
    n_iter: int = 0
    no_learning: bool = False
    form: str = "learning"
    se_A: float | None = None
    se_B: float | None = None
    se_delta_infinity: float | None = None
    n_boot_dropped: int | None = None


def learning_curve(t, A: float, B: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return A * (np.exp(-B * t) - np.exp(-B))


def effect_curve(t, A: float, B: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return A * np.exp(-B * t)


def learning_jacobian(A: float, B: float, t) -> np.ndarray:
    """d(model)/d(A, B) for the learning curve; also the residual Jacobian."""
    t = np.asarray(t, dtype=float)
    et, e1 = np.exp(-B * t), np.exp(-B)
    return np.column_stack([et - e1, A * (e1 - t * et)])


def effect_jacobian(A: float, B: float, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    et = np.exp(-B * t)
    return np.column_stack([et, -A * t * et])


_FORMS = {
    "learning": (learning_curve, learning_jacobian),
    "effect": (effect_curve, effect_jacobian),
}


def _grid_start(t, y, model) -> tuple[float, float]:
    best = (math.inf, 0.0, 1.0)
    for b in B_GRID:
        g = model(t, 1.0, b)
        gg = g @ g
        if gg == 0:
            continue
        a = (g @ y) / gg
        r = a * g - y
        sse = r @ r
        if sse < best[0]:
            best = (sse, a, b)
    return best[1], best[2]


def _ratio_start(t, y, form) -> tuple[float, float] | None:
    # successive differences of the learning curve (or the curve itself) decay by exp(-B)
    d = np.diff(y) if form == "learning" else y
    prev, nxt = d[:-1], d[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = nxt / prev
    ratio = ratio[(prev != 0) & np.isfinite(ratio) & (ratio > 0) & (ratio < 1)]
    if ratio.size == 0:
        return None
    b0 = -float(np.median(np.log(ratio)))
    if not (b0 > 0 and math.isfinite(b0)):
        return None
    model = _FORMS[form][0]
    m = int(np.argmax(np.abs(y)))
    g = float(model(t[m], 1.0, b0))
    if g == 0 or not math.isfinite(g):
        return None
    return float(y[m]) / g, b0


def _levenberg_marquardt(t, y, a0, b0, form, max_iter, gtol):
    model, jac = _FORMS[form]
    p = np.array([a0, math.log(b0)])

    def evaluate(p):
        b = math.exp(p[1])
        r = model(t, p[0], b) - y
        j = jac(p[0], b, t)
        j[:, 1] *= b  # chain rule for log-parameterised B
        return r, j

    r, J = evaluate(p)
    sse = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    while it < max_iter:
        g = J.T @ r
        if np.max(np.abs(g)) < gtol:
            converged = True
            break
        it += 1
        H = J.T @ J
        damp = lam * np.maximum(np.diag(H), 1e-12)
        try:
            step = np.linalg.solve(H + np.diag(damp), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        trial = p + step
        trial[1] = min(max(trial[1], -_THETA_BOUND), _THETA_BOUND)
        r_new, J_new = evaluate(trial)
        sse_new = float(r_new @ r_new)
        # near the optimum the SSE change drops below float resolution; polish on the gradient
        polish = sse_new <= sse * (1.0 + 4 * np.finfo(float).eps) and (
            np.max(np.abs(J_new.T @ r_new)) < np.max(np.abs(g))
        )
        if sse_new < sse or polish:
            p, r, J, sse = trial, r_new, J_new, sse_new
            lam = max(lam / 10.0, 1e-15)
        else:
            lam *= 10.0
            if lam > 1e20:
                break
    else:
        converged = bool(np.max(np.abs(J.T @ r)) < gtol)
    return float(p[0]), math.exp(p[1]), converged, sse, it


def fit_curve(t, y, form: str = "learning", max_iter: int = MAX_ITER, gtol: float = GTOL) -> ExponentialFit:
    """Least-squares fit of an exponential curve to ``(t, y)``.

    The data are scaled to unit maximum before fitting, so the gradient
    tolerance is relative and the fit is scale-equivariant in ``A``.
    """
    if form not in _FORMS:
        raise ValueError(f"form must be one of {tuple(_FORMS)}, got {form!r}")
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.size < 3:
        raise ValueError("need at least 3 points of matching shape")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    scale = float(np.max(np.abs(y)))
    if scale == 0.0:
        return ExponentialFit(A=0.0, B=math.nan, converged=True, residual_sse=0.0,
                              delta_infinity=0.0, no_learning=True, form=form)
    ys = y / scale

    starts = []
    ratio = _ratio_start(t, ys, form)
    if ratio is not None:
        starts.append(ratio)
    starts.append(_grid_start(t, ys, _FORMS[form][0]))

    best = None
    for a0, b0 in starts:
        res = _levenberg_marquardt(t, ys, a0, b0, form, max_iter, gtol)
        if best is None or (res[2] and not best[2]) or (res[2] == best[2] and res[3] < best[3]):
            best = res
        if res[2]:
            break
    a, b, converged, sse, it = best
    A = float(a * scale)
    limit = -A * math.exp(-b) if form == "learning" else 0.0
    return ExponentialFit(A=A, B=float(b), converged=converged, residual_sse=float(sse * scale * scale),
                          delta_infinity=limit, n_iter=it, form=form)


def fit_exponential(series: LearningSeries, **kw) -> ExponentialFit:
    """Fit the learning curve to ``delta_hat`` over windows ``1..k-1``."""
    if len(series.delta_hat) < 3:
        raise ValueError("need a learning series with at least 3 windows")
    return fit_curve(series.windows, series.delta_hat, "learning", **kw)


def fit_effect_curve(effects: EffectSeries, **kw) -> ExponentialFit:
    """Fit ``A * exp(-B t)`` to the per-window effect differences ``T^t - C^t``."""
    return fit_curve(effects.windows, effects.window_diff, "effect", **kw)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    se_A: float
    se_B: float
    se_delta_infinity: float
    n_reps: int
    n_dropped: int
    replicates: np.ndarray  # (n_reps, 4): A, B, delta_infinity, converged


def _resample_index(panel: ExperimentPanel, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for c in range(1, panel.n_cohorts + 1):
        group = np.flatnonzero(panel.cohorts == c)
        if group.size:
            parts.append(group[rng.integers(0, group.size, size=group.size)])
    return np.concatenate(parts)


def bootstrap_fit(
    panel: ExperimentPanel,
    method: str = "did",
    n_boot: int = 200,
    seed: int = 0,
    schedule: CohortSchedule | None = None,
    threads: int | None = None,
    max_drop_fraction: float = 0.2,
) -> BootstrapResult:
    """Bootstrap standard errors of the fitted ``(A, B)``.

    Units are resampled with replacement within each cohort, the learning
    series is recomputed and refitted. Replicate ``r`` draws from its own
    stream seeded by ``(seed, r)``, so results do not depend on scheduling.
    """
    if n_boot < 50:
        raise ValueError(f"n_boot must be >= 50, got {n_boot}")
    if schedule is None:
        schedule = CohortSchedule.two_cohort(panel.n_windows)

    def one(r: int):
        rng = np.random.default_rng([seed, r])
        sample = panel.take(_resample_index(panel, rng))
        series = learning_series(cell_means(sample, schedule), method)
        fit = fit_exponential(series)
        return fit.A, fit.B, fit.delta_infinity, float(fit.converged)

    reps = np.array(ordered_map(one, range(n_boot), threads), dtype=float)
    ok = reps[:, 3] == 1.0
    dropped = int(n_boot - ok.sum())
    if dropped > max_drop_fraction * n_boot:
        raise BootstrapError(
            f"{dropped} of {n_boot} bootstrap replicates did not converge "
            f"(limit {max_drop_fraction:.0%}); the learning curve is poorly identified"
        )
    kept = reps[ok]
    if kept.shape[0] < 2:
        raise BootstrapError("fewer than 2 converged bootstrap replicates")
    sd = kept[:, :3].std(axis=0, ddof=1)
    return BootstrapResult(float(sd[0]), float(sd[1]), float(sd[2]), n_boot, dropped, reps)


def with_bootstrap(fit: ExponentialFit, boot: BootstrapResult) -> ExponentialFit:
    return replace(fit, se_A=boot.se_A, se_B=boot.se_B,
                   se_delta_infinity=boot.se_delta_infinity, n_boot_dropped=boot.n_dropped)


@dataclass(frozen=True)
class LongTermEstimate:
    observed_effect: float
    learning_limit: float
    long_term_effect: float
    interval: IntervalEstimate
    final_observed_effect: float
    includes_fit_uncertainty: bool


def long_term_effect(effects: EffectSeries, fit: ExponentialFit, level: float = 0.95) -> LongTermEstimate:
    """First-window effect plus the limit of the fitted learning curve.

    The interval adds the variance of the first-window effect and the
    bootstrap variance of the limit as if independent; without a bootstrap
    only the former is counted.
    """
    if not fit.converged:
        raise FitError("learning-curve fit did not converge; no long-term extrapolation")
    tau1 = float(effects.tau_hat[0])
    var = 0.0
    if effects.variance is not None:
        var += float(effects.variance[0])
    has_boot = fit.se_delta_infinity is not None and math.isfinite(fit.se_delta_infinity)
    if has_boot:
        var += fit.se_delta_infinity ** 2
    total = tau1 + fit.delta_infinity
    return LongTermEstimate(
        observed_effect=tau1,
        learning_limit=fit.delta_infinity,
        long_term_effect=total,
        interval=gaussian_test(total, var, level),
        final_observed_effect=float(effects.tau_hat[-1]),
        includes_fit_uncertainty=has_boot or fit.no_learning,
    )
