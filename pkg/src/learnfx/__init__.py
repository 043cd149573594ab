"""Estimate user-learning (novelty and primacy effects) in A/B tests."""

__version__ = "0.1.0"

from .panel import (  # noqa: E402
    CellMeans,
    CohortSchedule,
    ExperimentPanel,
    MalformedInputError,
    bucket_windows,
    cell_means,
    impute,
    ingest,
    load_schedule,
    srm_check,
)
from .estimators import (  # noqa: E402
    EffectSeries,
    EstimationError,
    LearningSeries,
    QuickDetectResult,
    cross_sectional_learning_series,
    did_learning_series,
    ladder_learning_series,
    quick_detect,
    treatment_effect_series,
)
from .inference import (  # noqa: E402
    IntervalEstimate,
    PowerComparison,
    did_variance,
    gaussian_test,
    ladder_variance,
    power_comparison,
)
from .extrapolate import (  # noqa: E402
    ExponentialFit,
    LongTermEstimate,
    bootstrap_fit,
    fit_exponential,
    long_term_effect,
)
from .simulate import SimulationConfig, generate_experiment, paper_preset, run_replications  # noqa: E402
