"""Experiment panels: ingestion, window bucketing, imputation and cell means.

A panel is a dense ``(unit, window)`` matrix of metric values with ``NaN``
marking cells that carry no observation. Each unit also has an exposure span
``[exposure_start, exposure_end]`` (1-based, inclusive); cells outside the span
are never observed and are never imputed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Any, NamedTuple

import numpy as np
from scipy import stats

IMPUTATION_POLICIES = ("zero", "observed")
BUCKET_MODES = ("calendar", "exposure")
SRM_THRESHOLD = 0.001

DEFAULT_SCHEMA = {
    "unit_id": "unit_id",
    "cohort": "cohort",
    "window": "window",
    "timestamp": "timestamp",
    "value": "value",
    "exposure_start": "exposure_start",
}


class MalformedInputError(ValueError):
    """Raised for unreadable or inconsistent input records."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RawEvents:
    """Timestamped events kept so a panel can be re-bucketed later."""

    unit_index: np.ndarray
    seconds: np.ndarray
    value: np.ndarray


@dataclass(frozen=True, eq=False)
class ExperimentPanel:
    unit_ids: np.ndarray
    cohorts: np.ndarray
    exposure_start: np.ndarray
    exposure_end: np.ndarray
    values: np.ndarray
    policy: str = "observed"
    mode: str = "calendar"
    # calendar window preceding each unit's exposure window 1 (exposure mode)
    offsets: np.ndarray | None = None
    calendar_windows: int | None = None
    window_length: timedelta | None = None
    events: RawEvents | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.policy not in IMPUTATION_POLICIES:
            raise ValueError(f"unknown imputation policy {self.policy!r}")
        if self.mode not in BUCKET_MODES:
            raise ValueError(f"unknown bucketing mode {self.mode!r}")
        for name in ("unit_ids", "cohorts", "exposure_start", "exposure_end", "values"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.values.ndim != 2 or self.values.shape[0] != len(self.cohorts):
            raise ValueError("values must be a (units, windows) matrix")

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @property
    def n_windows(self) -> int:
        """Number of time windows, i.e. k - 1."""
        return self.values.shape[1]

    @property
    def n_cohorts(self) -> int:
        return int(self.cohorts.max()) if self.n_units else 0

    def span_mask(self) -> np.ndarray:
        """Boolean (unit, window) mask of cells inside each unit's exposure span."""
        w = np.arange(1, self.n_windows + 1)
        return (w >= self.exposure_start[:, None]) & (w <= self.exposure_end[:, None])

    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def observations(self):
        """Yield ``(unit_id, cohort, window, value)`` for every non-missing cell."""
        rows, cols = np.nonzero(self.observed_mask())
        for r, c in zip(rows, cols):
            yield self.unit_ids[r], int(self.cohorts[r]), int(c) + 1, float(self.values[r, c])

    def take(self, index: np.ndarray) -> "ExperimentPanel":
        """Panel restricted to (possibly repeated) unit rows, e.g. for resampling."""
        index = np.asarray(index)
        return replace(
            self,
            unit_ids=self.unit_ids[index],
            cohorts=self.cohorts[index],
            exposure_start=self.exposure_start[index],
            exposure_end=self.exposure_end[index],
            values=self.values[index],
            offsets=None if self.offsets is None else self.offsets[index],
            events=None,
        )

    def truncate(self, n_windows: int) -> "ExperimentPanel":
        """Keep windows ``1..n_windows`` and drop units not yet exposed by then."""
        if n_windows < 1:
            raise ValueError("n_windows must be >= 1")
        n_windows = min(n_windows, self.n_windows)
        keep = self.exposure_start <= n_windows
        sub = self.take(np.nonzero(keep)[0])
        return replace(
            sub,
            values=sub.values[:, :n_windows],
            exposure_end=np.minimum(sub.exposure_end, n_windows),
            calendar_windows=None if self.mode == "exposure" else n_windows,
        )


class CohortSchedule:
    """Arm assignment of every cohort in every window.

    ``treated[i - 1, j - 1]`` is True when cohort ``i`` is in treatment during
    window ``j``.
    """

    def __init__(self, treated, design: str):
        treated = np.array(treated, dtype=bool)
        if treated.ndim != 2:
            raise ValueError("assignments must be a cohort x window matrix")
        if design not in ("two-cohort", "ladder"):
            raise ValueError(f"unknown design {design!r}")
        self.treated = _frozen(treated)
        self.design = design
        self._validate()

    @classmethod
    def two_cohort(cls, n_windows: int) -> "CohortSchedule":
        treated = np.zeros((2, n_windows), dtype=bool)
        treated[1] = True
        return cls(treated, "two-cohort")

    @classmethod
    def ladder(cls, k: int) -> "CohortSchedule":
        """Ladder design with ``k`` cohorts over ``k - 1`` windows."""
        if k < 3:
            raise ValueError("a ladder needs at least 3 cohorts")
        treated = np.zeros((k, k - 1), dtype=bool)
        treated[1] = True
        for i in range(3, k + 1):
            treated[i - 1, i - 2:] = True
        return cls(treated, "ladder")

    @property
    def n_cohorts(self) -> int:
        return self.treated.shape[0]

    @property
    def n_windows(self) -> int:
        return self.treated.shape[1]

    def is_treated(self, cohort: int, window: int) -> bool:
        return bool(self.treated[cohort - 1, window - 1])

    def exposure_age(self) -> np.ndarray:
        """Windows since each cohort entered treatment (1 on the first treated window, 0 if control)."""
        age = np.cumsum(self.treated, axis=1)
        return np.where(self.treated, age, 0)

    def _validate(self):
        t = self.treated
        m, w = t.shape
        if m < 2 or w < 1:
            raise ValueError("schedule needs at least 2 cohorts and 1 window")
        if t[0].any():
            raise ValueError("cohort 1 must always be control")
        if not t[1].all():
            raise ValueError("cohort 2 must always be treatment")
        if self.design == "two-cohort":
            if m != 2:
                raise ValueError("two-cohort design has exactly 2 cohorts")
            return
        if m != w + 1:
            raise ValueError(f"ladder with {m} cohorts must span {m - 1} windows, got {w}")
        for i in range(3, m + 1):
            expected = np.arange(1, w + 1) >= i - 1
            if not np.array_equal(t[i - 1], expected):
                raise ValueError(f"ladder cohort {i} must switch to treatment at window {i - 1}")

    def to_json(self) -> dict:
        return {
            "design": self.design,
            "cohorts": self.n_cohorts,
            "windows": self.n_windows,
            "assignments": [["T" if x else "C" for x in row] for row in self.treated],
        }

    def __eq__(self, other):
        return (
            isinstance(other, CohortSchedule)
            and self.design == other.design
            and np.array_equal(self.treated, other.treated)
        )

    def __repr__(self):
        return f"CohortSchedule(design={self.design!r}, cohorts={self.n_cohorts}, windows={self.n_windows})"


def schedule_from_json(doc: Mapping[str, Any]) -> CohortSchedule:
    design = doc.get("design")
    try:
        m = int(doc["cohorts"])
        w = int(doc["windows"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInputError(f"schedule needs integer 'cohorts' and 'windows': {exc}") from None
    if "assignments" in doc:
        rows = doc["assignments"]
        if len(rows) != m or any(len(r) != w for r in rows):
            raise MalformedInputError("assignments matrix shape does not match cohorts x windows")
        bad = {x for r in rows for x in r} - {"C", "T"}
        if bad:
            raise MalformedInputError(f"assignments must be 'C' or 'T', got {sorted(bad)}")
        treated = [[x == "T" for x in r] for r in rows]
        try:
            return CohortSchedule(treated, design)
        except ValueError as exc:
            raise MalformedInputError(str(exc)) from None
    if design == "two-cohort":
        if m != 2:
            raise MalformedInputError("two-cohort design has exactly 2 cohorts")
        return CohortSchedule.two_cohort(w)
    if design == "ladder":
        if m != w + 1:
            raise MalformedInputError(f"ladder with {m} cohorts must span {m - 1} windows")
        return CohortSchedule.ladder(m)
    raise MalformedInputError(f"unknown design {design!r}")


def load_schedule(path: str | os.PathLike) -> CohortSchedule:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedInputError(f"schedule is not valid JSON: {exc}") from None
    return schedule_from_json(doc)


# --------------------------------------------------------------------------
# ingestion


def _parse_timestamp(text: str) -> float:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.timestamp()


def _positive_int(text: str, what: str, line: int) -> int:
    try:
        value = int(str(text).strip())
    except ValueError:
        raise MalformedInputError(f"{what} must be an integer, got {text!r}", line) from None
    if value < 1:
        raise MalformedInputError(f"{what} must be >= 1, got {value}", line)
    return value


def _records(source) -> Iterable[tuple[int, Mapping[str, Any]]]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            yield from _records(fh)
        return
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        reader = csv.DictReader(source)
        for row in reader:
            yield reader.line_num, row
        return
    for i, row in enumerate(source):
        yield i + 2, row


def ingest(
    source,
    schema: Mapping[str, str] | None = None,
    window_length: timedelta = timedelta(days=1),
) -> ExperimentPanel:
    """Build a panel from long-format records.

    ``source`` is a CSV path, an open text file, or an iterable of mappings.
    Records carry a ``window`` index or an ISO-8601 ``timestamp``; timestamped
    events are bucketed into calendar windows of ``window_length`` and summed
    within a window. Window-indexed input must already hold one row per
    (unit, window).
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)

    unit_index: dict[str, int] = {}
    unit_cohort: list[int] = []
    unit_exposure: list[int | None] = []
    rows_u: list[int] = []
    rows_w: list[float] = []
    rows_v: list[float] = []
    seen: set[tuple[int, int]] = set()
    by_timestamp = None

    for line, rec in _records(source):
        if by_timestamp is None:
            has_window = rec.get(cols["window"]) not in (None, "")
            has_ts = rec.get(cols["timestamp"]) not in (None, "")
            if not has_window and not has_ts:
                raise MalformedInputError("record needs a window or timestamp column", line)
            by_timestamp = not has_window
        uid = rec.get(cols["unit_id"])
        if uid is None or str(uid).strip() == "":
            raise MalformedInputError("missing unit_id", line)
        uid = str(uid).strip()
        cohort = _positive_int(rec.get(cols["cohort"], ""), "cohort", line)
        raw_value = rec.get(cols["value"])
        try:
            value = float(raw_value)
        except (TypeError, ValueError):
            raise MalformedInputError(f"value is not a number: {raw_value!r}", line) from None
        if not math.isfinite(value):
            raise MalformedInputError(f"value must be finite, got {raw_value!r}", line)

        if by_timestamp:
            raw_ts = rec.get(cols["timestamp"])
            if raw_ts in (None, ""):
                raise MalformedInputError("missing timestamp", line)
            try:
                when = _parse_timestamp(str(raw_ts))
            except ValueError:
                raise MalformedInputError(f"bad ISO-8601 timestamp {raw_ts!r}", line) from None
        else:
            raw_w = rec.get(cols["window"])
            if raw_w in (None, ""):
                raise MalformedInputError("missing window", line)
            when = _positive_int(raw_w, "window", line)

        exposure = rec.get(cols["exposure_start"])
        exposure = None if exposure in (None, "") else _positive_int(exposure, "exposure_start", line)

        u = unit_index.get(uid)
        if u is None:
            u = unit_index[uid] = len(unit_cohort)
            unit_cohort.append(cohort)
            unit_exposure.append(exposure)
        else:
            if unit_cohort[u] != cohort:
                raise MalformedInputError(
                    f"unit {uid!r} appears in cohorts {unit_cohort[u]} and {cohort}", line
                )
            if exposure is not None:
                if unit_exposure[u] not in (None, exposure):
                    raise MalformedInputError(f"unit {uid!r} has conflicting exposure_start", line)
                unit_exposure[u] = exposure
        if not by_timestamp:
            key = (u, int(when))
            if key in seen:
                raise MalformedInputError(
                    f"duplicate observation for unit {uid!r} in window {int(when)}; "
                    "pre-aggregate to one row per unit and window",
                    line,
                )
            seen.add(key)
        rows_u.append(u)
        rows_w.append(when)
        rows_v.append(value)

    if not rows_u:
        raise MalformedInputError("empty source: no observations")
    cohorts = np.array(unit_cohort, dtype=np.int64)
    present = np.unique(cohorts)
    if not np.array_equal(present, np.arange(1, present.size + 1)):
        raise MalformedInputError(f"cohort labels must be contiguous 1..m, got {present.tolist()}")

    unit_ids = np.array(list(unit_index), dtype=object)
    u_arr = np.array(rows_u, dtype=np.int64)
    v_arr = np.array(rows_v, dtype=float)

    if by_timestamp:
        events = RawEvents(u_arr, np.array(rows_w, dtype=float), v_arr)
        values = _bucket_events(events, len(unit_ids), window_length)
        override = None
        if any(e is not None for e in unit_exposure):
            override = unit_exposure
        return _assemble(unit_ids, cohorts, values, override, window_length=window_length, events=events)

    w_arr = np.array(rows_w, dtype=np.int64)
    values = np.full((len(unit_ids), int(w_arr.max())), np.nan)
    values[u_arr, w_arr - 1] = v_arr
    return _assemble(unit_ids, cohorts, values, unit_exposure)


def _assemble(unit_ids, cohorts, values, exposure_override, **extra) -> ExperimentPanel:
    observed = ~np.isnan(values)
    first = np.argmax(observed, axis=1) + 1
    start = first.copy()
    if exposure_override is not None:
        for u, e in enumerate(exposure_override):
            if e is None:
                continue
            if e > first[u]:
                raise MalformedInputError(
                    f"unit {unit_ids[u]!r}: exposure_start {e} is after its first observation (window {first[u]})"
                )
            start[u] = e
    n_windows = values.shape[1]
    return ExperimentPanel(
        unit_ids=unit_ids,
        cohorts=cohorts,
        exposure_start=start.astype(np.int64),
        exposure_end=np.full(len(unit_ids), n_windows, dtype=np.int64),
        values=values,
        policy="observed",
        mode="calendar",
        calendar_windows=n_windows,
        **extra,
    )


def _bucket_events(events: RawEvents, n_units: int, window_length: timedelta) -> np.ndarray:
    length = window_length.total_seconds()
    if length <= 0:
        raise ValueError("window_length must be positive")
    origin = math.floor(events.seconds.min() / length) * length
    w = np.floor((events.seconds - origin) / length).astype(np.int64)
    values = np.zeros((n_units, int(w.max()) + 1))
    hit = np.zeros_like(values, dtype=bool)
    np.add.at(values, (events.unit_index, w), events.value)
    hit[events.unit_index, w] = True
    values[~hit] = np.nan
    return values


def bucket_windows(
    panel: ExperimentPanel,
    mode: str,
    window_length: timedelta | None = None,
) -> ExperimentPanel:
    """Index windows from the experiment start (calendar) or each unit's exposure (exposure).

    Changing ``window_length`` re-buckets the raw timestamps and therefore
    needs a panel ingested from timestamped events; the result is sparse
    (policy ``observed``) and should be imputed afterwards.
    """
    if mode not in BUCKET_MODES:
        raise ValueError(f"mode must be one of {BUCKET_MODES}, got {mode!r}")
    if window_length is not None and window_length != panel.window_length:
        if panel.events is None:
            raise ValueError("timestamps absent: re-bucketing to a new window length needs timestamped input")
        values = _bucket_events(panel.events, panel.n_units, window_length)
        fresh = _assemble(
            panel.unit_ids, panel.cohorts, values, None,
            window_length=window_length, events=panel.events,
        )
        return fresh if mode == "calendar" else _to_exposure(fresh)
    if panel.mode == mode:
        return panel
    if mode == "exposure":
        return _to_exposure(panel)
    return _to_calendar(panel)


def _to_exposure(panel: ExperimentPanel) -> ExperimentPanel:
    shift = panel.exposure_start - 1
    span = panel.exposure_end - panel.exposure_start + 1
    n, w = panel.values.shape
    cols = np.arange(w)[None, :] + shift[:, None]
    inside = cols < w
    values = np.full((n, w), np.nan)
    rows = np.broadcast_to(np.arange(n)[:, None], (n, w))
    values[inside] = panel.values[rows[inside], cols[inside]]
    return replace(
        panel,
        values=values,
        exposure_start=np.ones(n, dtype=np.int64),
        exposure_end=span,
        mode="exposure",
        offsets=shift,
        calendar_windows=w,
    )


def _to_calendar(panel: ExperimentPanel) -> ExperimentPanel:
    if panel.offsets is None or panel.calendar_windows is None:
        raise ValueError("calendar positions unknown for this exposure-aligned panel")
    n = panel.n_units
    w = panel.calendar_windows
    values = np.full((n, w), np.nan)
    for u in range(n):
        span = panel.exposure_end[u] - panel.exposure_start[u] + 1
        o = panel.offsets[u]
        values[u, o:o + span] = panel.values[u, :span]
    start = panel.offsets + 1
    return replace(
        panel,
        values=values,
        exposure_start=start,
        exposure_end=start + panel.exposure_end - panel.exposure_start,
        mode="calendar",
        offsets=None,
    )


def impute(panel: ExperimentPanel, policy: str) -> ExperimentPanel:
    """Apply a missing-data policy.

    ``zero`` fills every missing in-span cell with 0; windows before a unit's
    exposure are left empty. ``observed`` keeps the panel sparse so estimators
    average over the units observed in each window.
    """
    if policy not in IMPUTATION_POLICIES:
        raise ValueError(f"policy must be one of {IMPUTATION_POLICIES}, got {policy!r}")
    if policy == "observed":
        return panel if panel.policy == "observed" else replace(panel, policy="observed")
    values = panel.values.copy()
    values[panel.span_mask() & np.isnan(values)] = 0.0
    return replace(panel, values=values, policy="zero")


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True, eq=False)
class CellMeans:
    """Per (cohort, window) mean, count and sample variance.

    Arrays are indexed ``[cohort - 1, window - 1]``. Cells with fewer than two
    units have ``var`` NaN and ``degenerate`` True; empty cells also have
    ``mean`` NaN.
    """

    mean: np.ndarray
    count: np.ndarray
    var: np.ndarray
    treated: np.ndarray
    schedule: CohortSchedule

    @property
    def degenerate(self) -> np.ndarray:
        return self.count < 2

    def get(self, cohort: int, window: int) -> tuple[float, int, float]:
        i, j = cohort - 1, window - 1
        return float(self.mean[i, j]), int(self.count[i, j]), float(self.var[i, j])


def cell_means(panel: ExperimentPanel, schedule: CohortSchedule) -> CellMeans:
    if panel.n_cohorts > schedule.n_cohorts:
        raise ValueError(
            f"panel has {panel.n_cohorts} cohorts but the schedule defines {schedule.n_cohorts}"
        )
    if panel.n_windows > schedule.n_windows:
        raise ValueError(
            f"panel spans {panel.n_windows} windows but the schedule defines {schedule.n_windows}"
        )
    m, w = schedule.n_cohorts, schedule.n_windows
    mean = np.full((m, w), np.nan)
    count = np.zeros((m, w), dtype=np.int64)
    var = np.full((m, w), np.nan)
    pw = panel.n_windows
    for c in range(1, m + 1):
        block = panel.values[panel.cohorts == c]
        if block.shape[0] == 0:
            continue
        seen = ~np.isnan(block)
        n = seen.sum(axis=0)
        x = np.where(seen, block, 0.0)
        s = x.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mu = s / n
            dev = np.where(seen, block - mu, 0.0)
            v = (dev * dev).sum(axis=0) / (n - 1)
        count[c - 1, :pw] = n
        mean[c - 1, :pw] = np.where(n > 0, mu, np.nan)
        var[c - 1, :pw] = np.where(n > 1, v, np.nan)
    return CellMeans(_frozen(mean), _frozen(count), _frozen(var), schedule.treated, schedule)


class SRMResult(NamedTuple):
    statistic: float
    p_value: float
    observed: tuple[int, ...]
    expected: tuple[float, ...]
    is_srm: bool


def srm_check(
    panel: ExperimentPanel,
    expected_ratios: list[float] | None = None,
    threshold: float = SRM_THRESHOLD,
) -> SRMResult:
    """Chi-square goodness of fit of cohort unit counts against the designed split."""
    m = panel.n_cohorts
    counts = np.bincount(panel.cohorts, minlength=m + 1)[1:]
    if expected_ratios is None:
        expected_ratios = [1.0 / m] * m
    ratios = np.asarray(expected_ratios, dtype=float)
    if ratios.size != m:
        raise ValueError(f"expected_ratios has {ratios.size} entries but the panel has {m} cohorts")
    if np.any(ratios <= 0) or not math.isclose(ratios.sum(), 1.0, rel_tol=1e-9):
        raise ValueError("expected_ratios must be positive and sum to 1")
    expected = ratios * counts.sum()
    stat, p = stats.chisquare(counts, expected)
    return SRMResult(float(stat), float(p), tuple(int(c) for c in counts),
                     tuple(float(e) for e in expected), bool(p < threshold))


def write_csv(panel: ExperimentPanel, path_or_file) -> None:
    """Write the panel's observed cells as long-format ``unit_id,cohort,window,value`` rows."""
    if isinstance(path_or_file, (str, os.PathLike)):
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            write_csv(panel, fh)
        return
    writer = csv.writer(path_or_file, lineterminator="\n")
    writer.writerow(["unit_id", "cohort", "window", "value"])
    for uid, cohort, window, value in panel.observations():
        writer.writerow([uid, cohort, window, repr(value)])
