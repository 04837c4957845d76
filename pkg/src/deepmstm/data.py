"""Aligned daily series, event calendars, lag windows and z-score normalization."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConstantSeriesError,
    ContractError,
    DataError,
    DateGapError,
    DimensionError,
    DuplicateDateError,
    InsufficientDataError,
    ParseError,
    RangeError,
)

ONE_DAY = dt.timedelta(days=1)


def format_real(x: float) -> str:
    """17 significant digits: enough for an exact float64 round trip."""
    return format(float(x), ".17g")


@dataclass(frozen=True)
class SeriesFrame:
    """``M`` daily series on a shared, gap-free calendar.

    ``values`` has shape ``(M, T)``; ``dates[i]`` labels column ``i``.
    """

    series_ids: tuple[str, ...]
    dates: tuple[dt.date, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "series_ids", tuple(self.series_ids))
        object.__setattr__(self, "dates", tuple(self.dates))
        if values.ndim != 2 or values.shape != (len(self.series_ids), len(self.dates)):
            raise DimensionError(
                f"values shape {values.shape} does not match {len(self.series_ids)} series x {len(self.dates)} dates"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("series contain NaN or infinite values")
        for prev, cur in zip(self.dates, self.dates[1:]):
            if cur - prev != ONE_DAY:
                raise DataError(f"dates are not consecutive days: {prev} -> {cur}")

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def start(self) -> dt.date:
        return self.dates[0]

    def index_of(self, date: dt.date) -> int:
        idx = (date - self.start).days
        if not 0 <= idx < self.T:
            raise RangeError(f"{date} is outside {self.start}..{self.dates[-1]}")
        return idx

    def series_index(self, key: str | int) -> int:
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < self.M:
                raise ContractError(f"series index {key} out of range for M={self.M}")
            return int(key)
        try:
            return self.series_ids.index(key)
        except ValueError:
            raise ContractError(f"unknown series {key!r}; have {list(self.series_ids)}") from None

    def with_values(self, values: np.ndarray) -> "SeriesFrame":
        return SeriesFrame(self.series_ids, self.dates, values)

    def select(self, rows: Sequence[int]) -> "SeriesFrame":
        return SeriesFrame(tuple(self.series_ids[r] for r in rows), self.dates, self.values[list(rows)])


def parse_day(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def ingest_csv(path: str | Path, columns: Sequence[str] | None = None, date_column: str = "date") -> SeriesFrame:
    """Read ``date,<id1>,...,<idM>`` into a frame.

    Rows are sorted by date. Unparseable cells, duplicate dates and missing days
    raise distinct errors; nothing is imputed. ``columns`` selects and orders a
    subset of the series.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if date_column not in header:
            raise DataError(f"{path}: no {date_column!r} column in header {header}")
        date_pos = header.index(date_column)
        wanted = [h for h in header if h != date_column] if columns is None else list(columns)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: columns {missing} not found in header {header}")
        if not wanted:
            raise DataError(f"{path}: no series columns")
        positions = [header.index(c) for c in wanted]
        rows: list[tuple[dt.date, list[float]]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, line_no, "<row>", ",".join(row))
            try:
                day = parse_day(row[date_pos])
            except ValueError:
                raise ParseError(path, line_no, date_column, row[date_pos]) from None
            vals = []
            for name, pos in zip(wanted, positions):
                cell = row[pos].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(path, line_no, name, row[pos]) from None
                if not np.isfinite(v):
                    raise ParseError(path, line_no, name, row[pos])
                vals.append(v)
            rows.append((day, vals))
    if not rows:
        raise DataError(f"{path}: no data rows")
    rows.sort(key=lambda r: r[0])
    for (prev, _), (cur, _) in zip(rows, rows[1:]):
        if cur == prev:
            raise DuplicateDateError(path, cur)
        if cur - prev != ONE_DAY:
            raise DateGapError(path, prev + ONE_DAY)
    dates = tuple(d for d, _ in rows)
    values = np.array([v for _, v in rows], dtype=np.float64).T
    return SeriesFrame(tuple(wanted), dates, values)


def write_series_csv(frame: SeriesFrame, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *frame.series_ids])
        for j, day in enumerate(frame.dates):
            w.writerow([day.isoformat(), *(format_real(v) for v in frame.values[:, j])])


@dataclass(frozen=True)
class EventCalendar:
    """Maps dates to binary indicator vectors over ``event_types``; unknown dates map to zeros."""

    event_types: tuple[str, ...] = ()
    occurrences: dict = field(default_factory=dict)  # date -> frozenset of type names

    @property
    def L(self) -> int:
        return len(self.event_types)

    def vector(self, date: dt.date) -> np.ndarray:
        active = self.occurrences.get(date, frozenset())
        return np.array([1.0 if name in active else 0.0 for name in self.event_types])

    def matrix(self, dates: Iterable[dt.date]) -> np.ndarray:
        rows = [self.vector(d) for d in dates]
        return np.array(rows, dtype=np.float64).reshape(len(rows), self.L)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[dt.date, str]], event_types: Sequence[str] | None = None):
        occ: dict[dt.date, set[str]] = {}
        seen: list[str] = []
        for day, name in pairs:
            occ.setdefault(day, set()).add(name)
            if name not in seen:
                seen.append(name)
        types = tuple(sorted(seen)) if event_types is None else tuple(event_types)
        unknown = set(seen) - set(types)
        if unknown:
            raise DataError(f"events of undeclared types: {sorted(unknown)}")
        return cls(types, {d: frozenset(v) for d, v in occ.items()})

    @classmethod
    def month_starts(cls, dates: Iterable[dt.date], name: str = "month_start") -> "EventCalendar":
        return cls.from_pairs(((d, name) for d in dates if d.day == 1), [name])

    def to_pairs(self) -> list[tuple[dt.date, str]]:
        return [(d, n) for d in sorted(self.occurrences) for n in self.event_types if n in self.occurrences[d]]


def read_events_csv(path: str | Path, event_types: Sequence[str] | None = None) -> EventCalendar:
    """Read a ``date,event_type`` file."""
    path = Path(path)
    pairs = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"date", "event_type"} <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain date,event_type")
        for line_no, row in enumerate(reader, start=2):
            try:
                day = parse_day(row["date"])
            except (ValueError, AttributeError):
                raise ParseError(path, line_no, "date", row["date"]) from None
            pairs.append((day, row["event_type"].strip()))
    return EventCalendar.from_pairs(pairs, event_types)


def write_events_csv(calendar: EventCalendar, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "event_type"])
        for day, name in calendar.to_pairs():
            w.writerow([day.isoformat(), name])


@dataclass(frozen=True)
class WindowBatch:
    """Lagged inputs ``(B, M, N)`` with their targets, day indices and event vectors."""

    inputs: np.ndarray
    targets: np.ndarray
    t_indices: np.ndarray
    event_vectors: np.ndarray
    dates: tuple[dt.date, ...]

    def __len__(self) -> int:
        return len(self.targets)


def build_windows(
    frame: SeriesFrame,
    N: int,
    target: int,
    calendar: EventCalendar | None = None,
    start: int | None = None,
    stop: int | None = None,
) -> WindowBatch:
    """Pair every target time ``t`` in ``[start, stop)`` with values at ``t-N..t-1``.

    The defaults cover every admissible target, giving ``T - N`` windows.
    """
    if N < 1:
        raise ContractError(f"lag window must be >= 1, got {N}")
    if frame.T < N + 1:
        raise InsufficientDataError(f"need at least {N + 1} observations for N={N}, have {frame.T}")
    start = N if start is None else start
    stop = frame.T if stop is None else stop
    if start < N:
        raise InsufficientDataError(f"target index {start} has fewer than N={N} steps of history")
    if stop > frame.T or start > stop:
        raise RangeError(f"target range [{start}, {stop}) outside 0..{frame.T}")
    t_idx = np.arange(start, stop)
    # (B, M, N) via a strided view, copied to detach from the frame
    view = np.lib.stride_tricks.sliding_window_view(frame.values, N, axis=1)  # (M, T-N+1, N)
    inputs = np.ascontiguousarray(view[:, t_idx - N, :].transpose(1, 0, 2))
    calendar = calendar or EventCalendar()
    dates = tuple(frame.dates[i] for i in t_idx)
    return WindowBatch(
        inputs=inputs,
        targets=frame.values[target, t_idx].copy(),
        t_indices=t_idx,
        event_vectors=calendar.matrix(dates),
        dates=dates,
    )


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(~(self.std > 0)):
            raise ConstantSeriesError(f"series with zero standard deviation: std={self.std}")

    @classmethod
    def identity(cls, M: int) -> "NormStats":
        return cls(np.zeros(M), np.ones(M))

    @classmethod
    def fit(cls, frame: SeriesFrame, stop: int | None = None) -> "NormStats":
        """Per-series mean and population std over columns ``[0, stop)``."""
        vals = frame.values[:, :stop]
        if vals.shape[1] == 0:
            raise InsufficientDataError("no training observations for normalization statistics")
        std = vals.std(axis=1)
        bad = [frame.series_ids[i] for i in np.flatnonzero(~(std > 0))]
        if bad:
            raise ConstantSeriesError(f"constant series cannot be normalized: {bad}")
        return cls(vals.mean(axis=1), std)


def normalize(frame: SeriesFrame, stats: NormStats) -> SeriesFrame:
    return frame.with_values((frame.values - stats.mean[:, None]) / stats.std[:, None])


def denormalize(values, stats: NormStats, m: int) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std[m] + stats.mean[m]
