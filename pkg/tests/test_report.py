import math

import numpy as np
import pytest

from learnfx._parallel import ordered_map, thread_count
from learnfx.panel import CohortSchedule
from learnfx.report import (
    build_report,
    default_periods,
    dumps,
    format_period_table,
    parse_periods,
    read_csv_table,
    render_svg,
    series_table,
    to_csv,
)
from learnfx.simulate import SimulationConfig, generate_experiment


@pytest.mark.parametrize(
    "windows, expected",
    [
        (4, [("Window 2", 2), ("Window 3", 3), ("Window 4", 4)]),
        (7, [("First 3 days", 3), ("Week 1", 7)]),
        (21, [("First 3 days", 3), ("Week 1", 7), ("Week 2", 14), ("Week 3", 21)]),
        (16, [("First 3 days", 3), ("Week 1", 7), ("Week 2", 14)]),
    ],
)
def test_default_periods(windows, expected):
    assert default_periods(windows) == expected


def test_parse_periods():
    assert parse_periods("First 3 days=3, Week 1=7") == [("First 3 days", 3), ("Week 1", 7)]
    assert parse_periods("a=b=2") == [("a=b", 2)]
    for bad in ("Week", "=3", "Week=x"):
        with pytest.raises(ValueError, match="Label=window"):
            parse_periods(bad)


def test_period_outside_panel():
    panel, sched = generate_experiment(SimulationConfig(n_units=200, k=5), seed=1)
    with pytest.raises(ValueError, match="outside"):
        build_report(panel, sched, periods=[("Late", 9)])


def test_period_table_marks_significance():
    rows = [
        {"period": "A", "tau_pct": 1.5, "tau_p_value": 0.01, "delta2_pct": -2.0, "delta2_p_value": 0.001,
         "significant": True},
        {"period": "B", "tau_pct": 0.5, "tau_p_value": 0.4, "delta2_pct": None, "delta2_p_value": None,
         "significant": False},
    ]
    lines = format_period_table(rows).splitlines()
    assert lines[1].rstrip().endswith("*") and "-2.00% (0.001)" in lines[1]
    assert "n/a" in lines[2] and not lines[2].rstrip().endswith("*")


def test_report_serializes_without_nan():
    panel, sched = generate_experiment(SimulationConfig(n_units=400, k=6, rho=0.5), seed=2)
    report = build_report(panel, sched, fit=True)
    text = dumps(report)
    assert "NaN" not in text and text.endswith("\n")
    assert report["learning"]["did"][0]["p_value"] is None
    rows = read_csv_table(to_csv(series_table(report), 17))
    assert rows[0]["estimate"] == report["treatment_effect"][0]["point"]
    assert render_svg(report).count("<polyline") >= 2


def test_ladder_power_section():
    panel, sched = generate_experiment(SimulationConfig(n_units=1400, k=8, rho=0.5, design="ladder"), seed=3)
    report = build_report(panel, sched)
    power = report["power"]
    assert power["k"] == 8 and power["winner"] == "observational"
    assert math.isclose(power["crossover_rho"], -1.0)


def test_thread_count(monkeypatch):
    monkeypatch.setenv("LEARNFX_THREADS", "3")
    assert thread_count() == 3
    assert thread_count(2) == 2
    monkeypatch.setenv("LEARNFX_THREADS", "many")
    with pytest.raises(ValueError, match="LEARNFX_THREADS"):
        thread_count()
    with pytest.raises(ValueError):
        thread_count(0)


def test_ordered_map_preserves_order():
    items = list(range(50))
    assert ordered_map(lambda x: x * x, items, threads=8) == [x * x for x in items]
    assert ordered_map(np.sqrt, [], threads=4) == []
