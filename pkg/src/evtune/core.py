"""Shared domain types, event-stream I/O, rate estimation and signal counting."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Union

import numpy as np

PathLike = Union[str, Path]

US_PER_S = 1_000_000
CSV_HEADER = ("t_us", "x", "y", "p")


class EvtuneError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(EvtuneError, ValueError):
    pass


class DomainError(EvtuneError, ValueError):
    """A value lies outside the open domain a model is defined on."""


class EventParseError(EvtuneError, ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EventOrderError(EvtuneError, ValueError):
    pass


@dataclass(frozen=True)
class BiasRanges:
    """Inclusive register limits for the four tunable biases."""

    fo_min: int = -100
    fo_max: int = 100
    hpf_min: int = 0
    hpf_max: int = 200
    diff_on_min: int = -150
    diff_on_max: int = 250
    diff_off_min: int = -150
    diff_off_max: int = 250

    def __post_init__(self):
        for name in ("fo", "hpf", "diff_on", "diff_off"):
            lo, hi = self.limits(name)
            if not lo < hi:
                raise InvalidArgumentError(f"{name}: need min < max, got [{lo}, {hi}]")

    def limits(self, name: str) -> tuple[int, int]:
        return getattr(self, f"{name}_min"), getattr(self, f"{name}_max")

    def clamp(self, name: str, value: int) -> int:
        lo, hi = self.limits(name)
        return int(min(max(value, lo), hi))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BiasRanges":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class BiasTuple:
    """The four tunable bias registers, in integer DAC units.

    ``fo`` is the photoreceptor low-pass bias, ``hpf`` the high-pass bias,
    ``diff_on``/``diff_off`` the positive/negative contrast thresholds.
    """

    fo: int = 0
    hpf: int = 0
    diff_on: int = 0
    diff_off: int = 0

    def __post_init__(self):
        for name in ("fo", "hpf", "diff_on", "diff_off"):
            v = getattr(self, name)
            if isinstance(v, float) and not v.is_integer():
                raise InvalidArgumentError(f"{name} must be an integer DAC value, got {v}")
            object.__setattr__(self, name, int(v))

    def replace(self, **changes) -> "BiasTuple":
        return BiasTuple(**{**asdict(self), **changes})

    def validate(self, ranges: BiasRanges) -> "BiasTuple":
        for name in ("fo", "hpf", "diff_on", "diff_off"):
            lo, hi = ranges.limits(name)
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise InvalidArgumentError(f"{name}={v} outside [{lo}, {hi}]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BiasTuple":
        return cls(**{k: d[k] for k in ("fo", "hpf", "diff_on", "diff_off") if k in d})


class Event(NamedTuple):
    t: int  # microseconds
    x: int
    y: int
    polarity: bool  # True = positive


@dataclass(frozen=True, eq=False)
class EventStream:
    """A time-sorted, columnar list of polarized events on a ``width`` x ``height`` array."""

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.bool_))

    def __post_init__(self):
        # private copies, so freezing them never touches the caller's arrays
        t = np.array(self.t, dtype=np.int64)
        x = np.array(self.x, dtype=np.int32)
        y = np.array(self.y, dtype=np.int32)
        p = np.array(self.p, dtype=np.bool_)
        if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
            raise InvalidArgumentError("event columns must be 1-D and of equal length")
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError("width and height must be positive")
        if t.size:
            if t[0] < 0:
                raise InvalidArgumentError("timestamps must be non-negative")
            if np.any(np.diff(t) < 0):
                raise EventOrderError("events are not sorted by timestamp")
            if x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height:
                raise InvalidArgumentError("event coordinates outside the pixel array")
        for name, arr in zip("txyp", (t, x, y, p)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_events(cls, width: int, height: int, events) -> "EventStream":
        events = list(events)
        if not events:
            return cls(width, height)
        cols = list(zip(*events))
        return cls(width, height, np.array(cols[0]), np.array(cols[1]), np.array(cols[2]),
                   np.array(cols[3], dtype=bool))

    def __len__(self) -> int:
        return int(self.t.size)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(t, x, y, p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "txyp"))

    @property
    def duration_s(self) -> float:
        return float(self.t[-1]) / US_PER_S if len(self) else 0.0

    def slice_time(self, t_start_us: int, t_stop_us: int) -> "EventStream":
        """Events with ``t_start_us <= t < t_stop_us``."""
        i0, i1 = np.searchsorted(self.t, [t_start_us, t_stop_us], side="left")
        return EventStream(self.width, self.height, self.t[i0:i1], self.x[i0:i1],
                           self.y[i0:i1], self.p[i0:i1])


@dataclass(frozen=True)
class RateEstimate:
    pos_rate: float
    neg_rate: float
    window: float
    n_pos: int
    n_neg: int

    @classmethod
    def from_counts(cls, n_pos: int, n_neg: int, window: float) -> "RateEstimate":
        if window <= 0:
            raise InvalidArgumentError(f"window must be positive, got {window}")
        return cls(n_pos / window, n_neg / window, float(window), int(n_pos), int(n_neg))

    @property
    def total_rate(self) -> float:
        return self.pos_rate + self.neg_rate

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RegionOfInterest:
    cx: float
    cy: float
    radius: float = 5.0

    def __post_init__(self):
        if self.radius < 0:
            raise InvalidArgumentError("radius must be non-negative")

    def contains(self, x, y):
        """Euclidean distance to the center <= radius (inclusive)."""
        return (np.asarray(x) - self.cx) ** 2 + (np.asarray(y) - self.cy) ** 2 <= self.radius ** 2


def _to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def estimate_rates(stream: EventStream, t_start: float, window: float) -> RateEstimate:
    """Per-polarity event rates over ``[t_start, t_start + window)`` seconds."""
    if window <= 0:
        raise InvalidArgumentError(f"window must be positive, got {window}")
    part = stream.slice_time(_to_us(t_start), _to_us(t_start + window))
    n_pos = int(np.count_nonzero(part.p))
    return RateEstimate.from_counts(n_pos, len(part) - n_pos, window)


def count_signal_events(stream: EventStream, roi: RegionOfInterest, polarity: bool,
                        t_span: float, n_periods: int, t_start: float = 0.0) -> float:
    """Events of one polarity inside ``roi`` during the span, divided by ``n_periods``."""
    if n_periods < 1:
        raise InvalidArgumentError("n_periods must be >= 1")
    if t_span <= 0:
        raise InvalidArgumentError("t_span must be positive")
    part = stream.slice_time(_to_us(t_start), _to_us(t_start + t_span))
    mask = (part.p == bool(polarity)) & roi.contains(part.x, part.y)
    return int(np.count_nonzero(mask)) / n_periods


def write_events(stream: EventStream, path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        if len(stream):
            block = np.column_stack([stream.t, stream.x, stream.y, stream.p.astype(np.int64)])
            np.savetxt(fh, block, fmt="%d", delimiter=",")


def read_events(path: PathLike, width: int | None = None, height: int | None = None) -> EventStream:
    """Parse an event CSV.

    The file carries no sensor geometry, so ``width``/``height`` default to the
    bounding box of the events (1 x 1 for an empty file).
    """
    with open(path, newline="") as fh:
        text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise EventParseError(1, "missing header")
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise EventParseError(1, f"expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}")
    rows: list[tuple[int, int, int, int]] = []
    last_t = -1
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise EventParseError(lineno, f"expected 4 fields, got {len(row)}")
        try:
            t, x, y, p = (int(v) for v in row)
        except ValueError as exc:
            raise EventParseError(lineno, str(exc)) from None
        if p not in (0, 1):
            raise EventParseError(lineno, f"polarity must be 0 or 1, got {p}")
        if t < 0 or x < 0 or y < 0:
            raise EventParseError(lineno, "negative field")
        if t < last_t:
            raise EventOrderError(f"line {lineno}: timestamp {t} < previous {last_t}")
        last_t = t
        rows.append((t, x, y, p))
    if rows:
        arr = np.array(rows, dtype=np.int64)
        w = width if width is not None else int(arr[:, 1].max()) + 1
        h = height if height is not None else int(arr[:, 2].max()) + 1
        return EventStream(w, h, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(bool))
    return EventStream(width or 1, height or 1)

