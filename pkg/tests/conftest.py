import numpy as np
import pytest

from learnfx.panel import ExperimentPanel, ingest


def rows_to_panel(rows, policy=None):
    """Build a panel from (unit, cohort, window, value) tuples."""
    panel = ingest([{"unit_id": u, "cohort": c, "window": w, "value": v} for u, c, w, v in rows])
    if policy == "zero":
        from learnfx.panel import impute

        panel = impute(panel, "zero")
    return panel


def dense_panel(values, cohorts, policy="zero"):
    values = np.asarray(values, dtype=float)
    n, w = values.shape
    return ExperimentPanel(
        unit_ids=np.array([f"u{i}" for i in range(n)], dtype=object),
        cohorts=np.asarray(cohorts, dtype=np.int64),
        exposure_start=np.ones(n, dtype=np.int64),
        exposure_end=np.full(n, w, dtype=np.int64),
        values=values,
        policy=policy,
        calendar_windows=w,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
