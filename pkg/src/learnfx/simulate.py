"""Synthetic experiments with injected exponential user-learning.

Each unit's metric in window ``j`` is ``intercept + window_effect[j] + noise``
where the noise is Gaussian with SD ``sigma`` and cross-window correlation
``rho`` (a shared per-unit component). Treated cells get an extra
independent draw ``N(A * exp(-B * s), effect_sd)`` with ``s`` the cohort's
exposure age, 1 in its first treated window.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._parallel import ordered_map
from .estimators import did_learning_series, ladder_learning_series
from .extrapolate import fit_exponential
from .panel import CohortSchedule, ExperimentPanel, cell_means

APPROACHES = ("observational", "experimental")


class ConfigError(ValueError):
    pass


@dataclass
class SimulationConfig:
    n_units: int = 20000
    k: int = 15
    sigma: float = 2.0
    effect_a: float = 1.0
    effect_b: float = 1.0 / 3.0
    effect_sd: float | None = None
    baseline_intercept: float = 0.0
    window_effects: list[float] | None = None
    rho: float = 0.0
    design: str = "two-cohort"
    replications: int = 200
    seed: int = 7

    @property
    def n_windows(self) -> int:
        return self.k - 1

    def effect_noise(self) -> float:
        return self.sigma if self.effect_sd is None else self.effect_sd

    def window_effect_array(self) -> np.ndarray:
        if self.window_effects is None:
            return np.zeros(self.n_windows)
        return np.asarray(self.window_effects, dtype=float)

    def validate(self) -> "SimulationConfig":
        if self.k < 3:
            raise ConfigError(f"k must be >= 3, got {self.k}")
        if self.n_units < 2 * self.k:
            raise ConfigError(f"n_units must be >= 2k = {2 * self.k}, got {self.n_units}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.effect_sd is not None and self.effect_sd < 0:
            raise ConfigError(f"effect_sd must be non-negative, got {self.effect_sd}")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if self.window_effects is not None and len(self.window_effects) != self.n_windows:
            raise ConfigError(
                f"window_effects needs k - 1 = {self.n_windows} entries, got {len(self.window_effects)}"
            )
        if self.design not in ("two-cohort", "ladder"):
            raise ConfigError(f"design must be 'two-cohort' or 'ladder', got {self.design!r}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        for name in ("sigma", "effect_a", "effect_b", "baseline_intercept", "rho"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        return self

    @classmethod
    def from_json(cls, doc: dict) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> dict:
        return asdict(self)


def paper_preset(**overrides) -> SimulationConfig:
    """Desk-scale two-design study: 14 daily windows, A=1, B=1/3, SD 2.

    ``rho=0.5`` models the day-to-day correlation of a real usage metric.
    """
    cfg = SimulationConfig(n_units=20000, k=15, sigma=2.0, effect_a=1.0, effect_b=1.0 / 3.0,
                           rho=0.5, replications=200, seed=7)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


def _baseline(cfg: SimulationConfig, rng: np.random.Generator) -> np.ndarray:
    n, w = cfg.n_units, cfg.n_windows
    shared = rng.standard_normal(n)
    fresh = rng.standard_normal((n, w))
    noise = math.sqrt(cfg.rho) * shared[:, None] + math.sqrt(1.0 - cfg.rho) * fresh
    return cfg.baseline_intercept + cfg.window_effect_array()[None, :] + cfg.sigma * noise


def _split(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Random near-equal split of ``n`` units into cohorts ``1..m``."""
    sizes = [len(part) for part in np.array_split(np.arange(n), m)]
    labels = np.repeat(np.arange(1, m + 1), sizes)
    return labels[rng.permutation(n)]


def _inject(values: np.ndarray, cohorts: np.ndarray, schedule: CohortSchedule,
            cfg: SimulationConfig, rng: np.random.Generator) -> np.ndarray:
    age = schedule.exposure_age()[cohorts - 1]
    treated = age > 0
    mean = cfg.effect_a * np.exp(-cfg.effect_b * age[treated])
    out = values.copy()
    out[treated] += mean + cfg.effect_noise() * rng.standard_normal(mean.size)
    return out


def _schedule(design: str, k: int) -> CohortSchedule:
    return CohortSchedule.ladder(k) if design == "ladder" else CohortSchedule.two_cohort(k - 1)


def _panel(values: np.ndarray, cohorts: np.ndarray) -> ExperimentPanel:
    n, w = values.shape
    return ExperimentPanel(
        unit_ids=np.arange(n),
        cohorts=cohorts,
        exposure_start=np.ones(n, dtype=np.int64),
        exposure_end=np.full(n, w, dtype=np.int64),
        values=values,
        policy="zero",
        mode="calendar",
        calendar_windows=w,
    )


def _streams(seed: int, replication: int) -> list[np.random.Generator]:
    seq = np.random.SeedSequence([seed, replication])
    return [np.random.default_rng(s) for s in seq.spawn(3)]


def generate_experiment(config: SimulationConfig, seed: int | None = None,
                        design: str | None = None) -> tuple[ExperimentPanel, CohortSchedule]:
    """One synthetic panel under ``config.design`` (or ``design``), all units exposed from window 1."""
    config.validate()
    design = design or config.design
    base_rng, two_rng, ladder_rng = _streams(config.seed if seed is None else seed, 0)
    base = _baseline(config, base_rng)
    schedule = _schedule(design, config.k)
    rng = ladder_rng if design == "ladder" else two_rng
    cohorts = _split(config.n_units, schedule.n_cohorts, rng)
    return _panel(_inject(base, cohorts, schedule, config, rng), cohorts), schedule


def generate_pair(config: SimulationConfig, replication: int):
    """Both designs on one simulated unit pool: ``((two-cohort panel, schedule), (ladder panel, schedule))``."""
    base_rng, two_rng, ladder_rng = _streams(config.seed, replication)
    base = _baseline(config, base_rng)
    out = []
    for design, rng in (("two-cohort", two_rng), ("ladder", ladder_rng)):
        schedule = _schedule(design, config.k)
        cohorts = _split(config.n_units, schedule.n_cohorts, rng)
        out.append((_panel(_inject(base, cohorts, schedule, config, rng), cohorts), schedule))
    return tuple(out)


@dataclass
class ApproachSummary:
    mean_A: float
    sd_A: float
    mean_B: float
    sd_B: float
    n_converged: int
    n_nonconverged: int
    delta_mean: list[float]
    delta_var: list[float]


@dataclass
class ReplicationSummary:
    config: SimulationConfig
    approaches: dict[str, ApproachSummary]
    rows: list[dict] = field(repr=False)
    deltas: dict[str, np.ndarray] = field(repr=False)

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "replications": self.config.replications,
            "approaches": {k: asdict(v) for k, v in self.approaches.items()},
        }


def _replicate(config: SimulationConfig, r: int) -> dict:
    (two, two_sched), (lad, lad_sched) = generate_pair(config, r)
    out = {}
    obs = did_learning_series(cell_means(two, two_sched))
    exp = ladder_learning_series(cell_means(lad, lad_sched))
    for approach, series in (("observational", obs), ("experimental", exp)):
        fit = fit_exponential(series)
        out[approach] = (series.delta_hat, fit.A, fit.B, fit.converged)
    return out


def _mean_sd(x: np.ndarray) -> tuple[float, float]:
    if x.size == 0:
        return math.nan, math.nan
    sd = float(x.std(ddof=1)) if x.size > 1 else math.nan
    return float(x.mean()), sd


def run_replications(config: SimulationConfig, threads: int | None = None) -> ReplicationSummary:
    """Repeat the two-approach comparison; replication ``r`` uses stream ``(seed, r)``."""
    config.validate()
    if config.replications < 2:
        raise ConfigError("run_replications needs replications >= 2")

    def one(r):
        try:
            return _replicate(config, r)
        except Exception as exc:
            raise RuntimeError(f"replication {r} failed: {exc}") from exc

    results = ordered_map(one, range(config.replications), threads)
    approaches, rows, deltas = {}, [], {}
    for approach in APPROACHES:
        d = np.array([res[approach][0] for res in results])
        a = np.array([res[approach][1] for res in results])
        b = np.array([res[approach][2] for res in results])
        ok = np.array([res[approach][3] for res in results], dtype=bool)
        mean_a, sd_a = _mean_sd(a[ok])
        mean_b, sd_b = _mean_sd(b[ok])
        approaches[approach] = ApproachSummary(
            mean_A=mean_a, sd_A=sd_a, mean_B=mean_b, sd_B=sd_b,
            n_converged=int(ok.sum()), n_nonconverged=int((~ok).sum()),
            delta_mean=d.mean(axis=0).tolist(),
            delta_var=d.var(axis=0, ddof=1).tolist(),
        )
        deltas[approach] = d
    for r, res in enumerate(results):
        for approach in APPROACHES:
            _, a, b, ok = res[approach]
            rows.append({"replication": r, "approach": approach, "A": a, "B": b, "converged": ok})
    return ReplicationSummary(config, approaches, rows, deltas)


def load_config(path) -> SimulationConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return SimulationConfig.from_json(doc)
