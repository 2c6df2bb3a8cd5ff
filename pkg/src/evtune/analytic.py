"""Closed-form background-rate and signal surfaces.

Threshold biases are mapped to normalized coordinates on the open unit square,
``x`` from ``diff_off`` and ``y`` from ``diff_on``, both increasing as the bias
is lowered (more sensitive). With ``T(s) = s / (1 - s)``::

    ber_n = S * T(x) * (1 + epsilon * T(y))
    ber_p = S * T(y) * (1 + epsilon * T(x))
    S     = s0 * 2**(fo / sigma_fo) * 2**(-hpf / sigma_hpf)

The family is smooth and strictly increasing on the interior. Each rate
vanishes at its own lower edge, blows up at its upper edge, and depends more
on its own threshold than on the other one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import BiasRanges, BiasTuple, DomainError, InvalidArgumentError


def _t(s):
    return s / (1.0 - s)


def _dt(s):
    return 1.0 / (1.0 - s) ** 2


class Partials(NamedTuple):
    f_x: float
    f_y: float
    g_x: float
    g_y: float

    @property
    def jacobian(self) -> float:
        return self.f_x * self.g_y - self.f_y * self.g_x


@dataclass(frozen=True)
class NormalizedDomain:
    """Point of the open unit square; ``x`` pairs with diff_off, ``y`` with diff_on."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 < self.x < 1.0 and 0.0 < self.y < 1.0):
            raise DomainError(f"normalized point ({self.x}, {self.y}) is not inside (0,1)^2")

    @classmethod
    def from_biases(cls, biases: BiasTuple, ranges: BiasRanges) -> "NormalizedDomain":
        return cls(normalize(biases.diff_off, ranges.diff_off_min, ranges.diff_off_max),
                   normalize(biases.diff_on, ranges.diff_on_min, ranges.diff_on_max))

    def to_dac(self, ranges: BiasRanges) -> tuple[float, float]:
        """Continuous (diff_on, diff_off) values mapping to this point."""
        return (denormalize(self.y, ranges.diff_on_min, ranges.diff_on_max),
                denormalize(self.x, ranges.diff_off_min, ranges.diff_off_max))


def normalize(value: float, lo: float, hi: float) -> float:
    return (hi - value) / (hi - lo)


def denormalize(s: float, lo: float, hi: float) -> float:
    return hi - s * (hi - lo)


@dataclass(frozen=True)
class AnalyticRateModel:
    epsilon: float = 0.5
    s0: float = 1000.0
    sigma_fo: float = 20.0
    sigma_hpf: float = 20.0
    ranges: BiasRanges = field(default_factory=BiasRanges)

    def __post_init__(self):
        # epsilon=0 is admitted so a decoupled model can be built and shown to fail the checks
        if not 0.0 <= self.epsilon < 1.0:
            raise InvalidArgumentError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if not self.s0 > 0:
            raise InvalidArgumentError("s0 must be positive")
        if not (self.sigma_fo > 0 and self.sigma_hpf > 0):
            raise InvalidArgumentError("sigma_fo and sigma_hpf must be positive")

    def scale(self, fo: float, hpf: float) -> float:
        return self.s0 * 2.0 ** (fo / self.sigma_fo) * 2.0 ** (-hpf / self.sigma_hpf)

    def rates_xy(self, scale: float, x, y):
        """(ber_n, ber_p) at normalized coordinates; vectorizes over arrays."""
        tx, ty = _t(x), _t(y)
        return scale * tx * (1.0 + self.epsilon * ty), scale * ty * (1.0 + self.epsilon * tx)

    def partials_xy(self, scale: float, x, y) -> Partials:
        e = self.epsilon
        tx, ty, dx, dy = _t(x), _t(y), _dt(x), _dt(y)
        return Partials(scale * dx * (1.0 + e * ty), scale * tx * e * dy,
                        scale * ty * e * dx, scale * dy * (1.0 + e * tx))

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "s0": self.s0, "sigma_fo": self.sigma_fo,
                "sigma_hpf": self.sigma_hpf, "ranges": self.ranges.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticRateModel":
        d = dict(d)
        if "ranges" in d:
            d["ranges"] = BiasRanges.from_dict(d["ranges"])
        unknown = set(d) - {"epsilon", "s0", "sigma_fo", "sigma_hpf", "ranges"}
        if unknown:
            raise InvalidArgumentError(f"unknown rate-model keys: {sorted(unknown)}")
        return cls(**d)


def load_rate_model(path) -> AnalyticRateModel:
    return AnalyticRateModel.from_dict(json.loads(Path(path).read_text()))


def _interior(model: AnalyticRateModel, biases: BiasTuple) -> tuple[float, float, float]:
    biases.validate(model.ranges)
    p = NormalizedDomain.from_biases(biases, model.ranges)
    return model.scale(biases.fo, biases.hpf), p.x, p.y


def eval_ber(model: AnalyticRateModel, biases: BiasTuple) -> tuple[float, float]:
    """Background rates ``(ber_n, ber_p)`` in events/second.

    Raises DomainError when a threshold bias sits on its range limit.
    """
    s, x, y = _interior(model, biases)
    n, p = model.rates_xy(s, x, y)
    return float(n), float(p)


def eval_partials(model: AnalyticRateModel, biases: BiasTuple) -> Partials:
    """Partials of (ber_n, ber_p) with respect to the normalized (x, y)."""
    s, x, y = _interior(model, biases)
    return model.partials_xy(s, x, y)


@dataclass(frozen=True)
class AnalyticSignalModel:
    """Signal per period: a Gaussian bump over (fo, hpf) times a threshold decay.

    The decay factor ``exp(-sensitivity_decay * (2 - x - y))`` grows with both
    normalized sensitivities, so the signal falls as either threshold rises.
    """

    peak_fo: float = 0.0
    peak_hpf: float = 80.0
    width_fo: float = 60.0
    width_hpf: float = 40.0
    amplitude: float = 100.0
    sensitivity_decay: float = 2.0
    ranges: BiasRanges = field(default_factory=BiasRanges)

    def __post_init__(self):
        if self.amplitude < 0:
            raise InvalidArgumentError("amplitude must be non-negative")
        if not (self.width_fo > 0 and self.width_hpf > 0):
            raise InvalidArgumentError("widths must be positive")
        if not self.sensitivity_decay > 0:
            raise InvalidArgumentError("sensitivity_decay must be positive")

    def value_xy(self, fo: float, hpf: float, x, y):
        bump = math.exp(-0.5 * (((fo - self.peak_fo) / self.width_fo) ** 2
                                + ((hpf - self.peak_hpf) / self.width_hpf) ** 2))
        return self.amplitude * bump * np.exp(-self.sensitivity_decay * (2.0 - x - y))

    def to_dict(self) -> dict:
        return {"peak_fo": self.peak_fo, "peak_hpf": self.peak_hpf, "width_fo": self.width_fo,
                "width_hpf": self.width_hpf, "amplitude": self.amplitude,
                "sensitivity_decay": self.sensitivity_decay, "ranges": self.ranges.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticSignalModel":
        d = dict(d)
        if "ranges" in d:
            d["ranges"] = BiasRanges.from_dict(d["ranges"])
        return cls(**d)


def eval_sig(model: AnalyticSignalModel, biases: BiasTuple) -> float:
    """Signal events per period. Threshold limits are allowed (closed square)."""
    biases.validate(model.ranges)
    r = model.ranges
    x = normalize(biases.diff_off, r.diff_off_min, r.diff_off_max)
    y = normalize(biases.diff_on, r.diff_on_min, r.diff_on_max)
    return float(model.value_xy(biases.fo, biases.hpf, x, y))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    n_points: int
    n_failed: int
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "n_points": self.n_points,
                "n_failed": self.n_failed, "detail": self.detail}


@dataclass(frozen=True)
class HypothesisReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


EDGE = 1e-12  # distance from the square's edges used to sample limit behaviour
LIMIT_RATIO = 1e6


def _check(name: str, ok: np.ndarray, detail: str = "") -> CheckResult:
    ok = np.asarray(ok, bool)
    n_failed = int(ok.size - np.count_nonzero(ok))
    return CheckResult(name, n_failed == 0, int(ok.size), n_failed, detail)


def verify_hypotheses(model: AnalyticRateModel, grid_resolution: int = 50,
                      fo: float = 0.0, hpf: float = 0.0) -> HypothesisReport:
    """Check limit behaviour, derivative ordering and Jacobian sign on a grid.

    Interior points are cell midpoints of a ``grid_resolution`` square grid.
    Limits are judged relative to the mid-square value so the test does not
    depend on the rate scale: near the lower edge the rate must drop below
    1/LIMIT_RATIO of it, near the upper edge rise above LIMIT_RATIO times it.
    """
    if int(grid_resolution) != grid_resolution or grid_resolution < 2:
        raise InvalidArgumentError(f"grid_resolution must be an integer >= 2, got {grid_resolution}")
    n = int(grid_resolution)
    s = model.scale(fo, hpf)
    axis = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    p = model.partials_xy(s, xx, yy)

    f_mid, _ = model.rates_xy(s, 0.5, axis)
    f_lo, _ = model.rates_xy(s, EDGE, axis)
    f_hi, _ = model.rates_xy(s, 1.0 - EDGE, axis)
    _, g_mid = model.rates_xy(s, axis, 0.5)
    _, g_lo = model.rates_xy(s, axis, EDGE)
    _, g_hi = model.rates_xy(s, axis, 1.0 - EDGE)
    checks = (
        _check("f_vanishes_at_lower_x", f_lo < f_mid / LIMIT_RATIO),
        _check("g_vanishes_at_lower_y", g_lo < g_mid / LIMIT_RATIO),
        _check("f_unbounded_at_upper_x", f_hi > f_mid * LIMIT_RATIO),
        _check("g_unbounded_at_upper_y", g_hi > g_mid * LIMIT_RATIO),
        _check("x_derivative_ordering", (p.f_x > p.g_x) & (p.g_x > 0), "f_x > g_x > 0"),
        _check("y_derivative_ordering", (p.g_y > p.f_y) & (p.f_y > 0), "g_y > f_y > 0"),
        _check("jacobian_positive", p.jacobian > 0,
               f"min {float(np.min(p.jacobian)):.6g}"),
    )
    return HypothesisReport(checks)
