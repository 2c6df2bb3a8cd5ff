"""Event-rate budget checks and the cluster false-alarm estimate.

A background event counts as a false cluster when at least ``m - 1`` further
events land in its 3x3 neighbourhood within one period. For independent
background events at ``r`` ev/s/pixel over ``n`` pixels, the estimate is
``(n * r * period) ** (m - 1)``, an upper bound of Poisson-tail order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numba
import numpy as np

from .core import US_PER_S, EventStream, InvalidArgumentError, RateEstimate

ROUNDED_PER_EVENT_BOUND = 1e-8  # coarse per-event bound used for the per-second chain

VERDICTS = ("ok", "over_pipeline", "over_cap", "hazard")


@dataclass(frozen=True)
class RateBudget:
    cap: float = 1e5
    max_smooth_rate: float = 1e6
    hazard_rate: float = 1e7
    pipeline_cap: float = 1e5  # D

    def __post_init__(self):
        if not 0 < self.cap <= self.max_smooth_rate <= self.hazard_rate:
            raise InvalidArgumentError("need 0 < cap <= max_smooth_rate <= hazard_rate")
        if not 0 < self.pipeline_cap <= self.cap:
            raise InvalidArgumentError("need 0 < pipeline_cap <= cap")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClusterSpec:
    neighborhood_pixels: int = 9
    per_pixel_rate: float = 0.1
    period: float = 0.01
    cluster_size: int = 5

    def __post_init__(self):
        if self.neighborhood_pixels < 1 or self.cluster_size < 1:
            raise InvalidArgumentError("neighborhood_pixels and cluster_size must be >= 1")
        if self.per_pixel_rate < 0 or not self.period > 0:
            raise InvalidArgumentError("per_pixel_rate must be >= 0 and period > 0")


def per_pixel_rate(total_rate: float, width: int, height: int) -> float:
    if width * height <= 0:
        raise InvalidArgumentError("width * height must be positive")
    return total_rate / (width * height)


def cluster_false_alarm(spec: ClusterSpec) -> float:
    """Per-event probability estimate ``(n * r * T) ** (m - 1)``."""
    return (spec.neighborhood_pixels * spec.per_pixel_rate * spec.period) ** (spec.cluster_size - 1)


@dataclass(frozen=True)
class FalseAlarmRate:
    exact: float  # total_rate * cluster_false_alarm(spec)
    rounded: float  # total_rate * ROUNDED_PER_EVENT_BOUND

    def to_dict(self) -> dict:
        return asdict(self)


def per_second_false_alarm(spec: ClusterSpec, total_rate: float,
                           per_event_bound: float = ROUNDED_PER_EVENT_BOUND) -> FalseAlarmRate:
    if total_rate < 0:
        raise InvalidArgumentError("total_rate must be non-negative")
    return FalseAlarmRate(total_rate * cluster_false_alarm(spec), total_rate * per_event_bound)


def check_budget(budget: RateBudget, estimate: RateEstimate) -> str:
    total = estimate.pos_rate + estimate.neg_rate
    if total >= budget.hazard_rate:
        return "hazard"
    if total > budget.cap:
        return "over_cap"
    if total > budget.pipeline_cap:
        return "over_pipeline"
    return "ok"


def _one_significant(v: float) -> float:
    if v <= 0:
        return 0.0
    return float(f"{v:.0e}")


def budget_table(total_rate: float, width: int, height: int, budget: RateBudget = RateBudget(),
                 neighborhood_pixels: int = 9, period: float = 0.01,
                 cluster_sizes: tuple[int, ...] = (5, 10),
                 estimate: Optional[RateEstimate] = None) -> dict:
    """The full budget chain as a JSON-ready dict.

    The ``exact`` rows use the computed per-pixel rate. The ``rounded`` rows
    round it to one significant figure and apply the coarse per-event bound,
    matching the usual back-of-envelope chain.
    """
    r = per_pixel_rate(total_rate, width, height)
    r_rounded = _one_significant(r)
    rows = []
    for m in cluster_sizes:
        exact = ClusterSpec(neighborhood_pixels, r, period, m)
        rounded = ClusterSpec(neighborhood_pixels, r_rounded, period, m)
        rows.append({
            "cluster_size": m,
            "per_event_exact": cluster_false_alarm(exact),
            "per_event_rounded": cluster_false_alarm(rounded),
            "per_second_exact": per_second_false_alarm(exact, total_rate).exact,
            "per_second_rounded": total_rate * cluster_false_alarm(rounded),
        })
    if estimate is None:
        estimate = RateEstimate(total_rate / 2, total_rate / 2, 1.0, 0, 0)
    return {
        "total_rate": total_rate,
        "width": width,
        "height": height,
        "per_pixel_rate": r,
        "per_pixel_rate_rounded": r_rounded,
        "period": period,
        "neighborhood_pixels": neighborhood_pixels,
        "clusters": rows,
        "per_second_rounded_bound": total_rate * ROUNDED_PER_EVENT_BOUND,
        "budget": budget.to_dict(),
        "verdict": check_budget(budget, estimate),
    }


def uniform_background_stream(width: int, height: int, per_pixel_rate: float, duration: float,
                              seed: int = 0) -> EventStream:
    """Independent Poisson events on every pixel with random polarity."""
    if per_pixel_rate < 0 or not duration > 0:
        raise InvalidArgumentError("per_pixel_rate must be >= 0 and duration > 0")
    rng = np.random.default_rng(seed)
    n = rng.poisson(per_pixel_rate * width * height * duration)
    t = np.sort(rng.integers(0, int(round(duration * US_PER_S)), n))
    return EventStream(width, height, t, rng.integers(0, width, n), rng.integers(0, height, n),
                       rng.random(n) < 0.5)


@numba.njit(cache=True)
def _count_clusters(t, x, y, window_us, need):
    n = t.size
    hits = 0
    j_end = 0
    for i in range(n):
        if j_end < i + 1:
            j_end = i + 1
        while j_end < n and t[j_end] <= t[i] + window_us:
            j_end += 1
        c = 0
        for j in range(i + 1, j_end):
            if abs(x[j] - x[i]) <= 1 and abs(y[j] - y[i]) <= 1:
                c += 1
                if c >= need:
                    hits += 1
                    break
    return hits


def cluster_frequency(stream: EventStream, cluster_size: int = 5, period: float = 0.01) -> float:
    """Fraction of events followed, within ``period``, by ``cluster_size - 1`` neighbours.

    Neighbours are events in the 3x3 square around the seed pixel, seed pixel
    included. Seeds close to the sensor edge see fewer than 9 pixels.
    """
    if cluster_size < 1 or not period > 0:
        raise InvalidArgumentError("cluster_size must be >= 1 and period > 0")
    if len(stream) == 0:
        return 0.0
    if cluster_size == 1:
        return 1.0
    hits = _count_clusters(stream.t, stream.x, stream.y, int(round(period * US_PER_S)), cluster_size - 1)
    return hits / len(stream)


def poisson_tail(mean: float, k: int) -> float:
    """P(N >= k) for N ~ Poisson(mean); the exact counterpart of the estimate."""
    if k <= 0:
        return 1.0
    term, cdf = math.exp(-mean), 0.0
    for i in range(k):
        cdf += term
        term *= mean / (i + 1)
    return max(0.0, 1.0 - cdf)
