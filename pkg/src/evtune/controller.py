"""Feedback tuning of the two threshold biases to a per-polarity rate target.

Each iteration measures both background rates and expresses their errors in
octaves, ``e = log2(rate / (D/2))``. The errors are split into a common mode
``(e_p + e_n)/2`` and a difference mode ``(e_p - e_n)/2``. Each mode gets its
own log-proportional gain in DAC units per octave, and the two mode steps
recombine into steps for ``diff_on`` and ``diff_off``. Raising a threshold bias
lowers its rate. The gains start at ``k`` and ``k_diff`` and are refined from
the observed response (a one-dimensional secant per mode). Out of band only a
``damping`` fraction of the full step is taken, so the error shrinks without
overshooting. Once both rates are in band, the loop takes the single-unit move
with the smallest predicted error, and stops when staying put is best.

The split matters because the two rates respond almost alike to either
threshold. The difference mode therefore has a much weaker response than the
common mode, and one shared gain would stall it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

from .analytic import AnalyticRateModel, NormalizedDomain
from .core import BiasRanges, BiasTuple, EvtuneError, InvalidArgumentError, RateEstimate


class TuningError(EvtuneError):
    def __init__(self, message: str, trace: Optional["TuningTrace"] = None):
        super().__init__(message)
        self.trace = trace


class UnreachableTargetError(TuningError):
    """A polarity produces no events even at its most sensitive setting."""


class RangeExhaustedError(TuningError):
    """A threshold bias stayed pinned at a range limit without converging."""


@dataclass(frozen=True)
class TuningTarget:
    total_rate: float
    tolerance: float = 0.05
    window: float = 1.0
    max_iterations: int = 50

    def __post_init__(self):
        if not (self.total_rate > 0 and math.isfinite(self.total_rate)):
            raise InvalidArgumentError(f"total_rate must be positive, got {self.total_rate}")
        if not 0 < self.tolerance < 1:
            raise InvalidArgumentError(f"tolerance must lie in (0, 1), got {self.tolerance}")
        if not self.window > 0:
            raise InvalidArgumentError("window must be positive")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")

    @property
    def per_polarity(self) -> float:
        return self.total_rate / 2.0

    def within(self, est: RateEstimate) -> bool:
        c = self.per_polarity
        return (abs(est.pos_rate - c) <= self.tolerance * c
                and abs(est.neg_rate - c) <= self.tolerance * c)

    def to_dict(self) -> dict:
        return {"total_rate": self.total_rate, "tolerance": self.tolerance,
                "window": self.window, "max_iterations": self.max_iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "TuningTarget":
        return cls(**d)


class RateSource(Protocol):
    def measure(self, biases: BiasTuple, window: float) -> RateEstimate: ...


class AnalyticRateSource:
    """Noise-free rate source over the closed-form model.

    Threshold biases on a range limit are mapped just inside the open square,
    so the source returns ~0 or a huge rate there instead of raising.
    """

    EDGE = 1e-9

    def __init__(self, model: AnalyticRateModel, illumination: float = 1.0):
        if not illumination > 0:
            raise InvalidArgumentError("illumination must be positive")
        self.model = model
        self.illumination = illumination
        self.calls = 0

    def measure(self, biases: BiasTuple, window: float) -> RateEstimate:
        biases.validate(self.model.ranges)
        r = self.model.ranges
        x = min(max((r.diff_off_max - biases.diff_off) / (r.diff_off_max - r.diff_off_min), self.EDGE), 1 - self.EDGE)
        y = min(max((r.diff_on_max - biases.diff_on) / (r.diff_on_max - r.diff_on_min), self.EDGE), 1 - self.EDGE)
        n, p = self.model.rates_xy(self.model.scale(biases.fo, biases.hpf) * self.illumination, x, y)
        self.calls += 1
        return RateEstimate(float(p), float(n), float(window), int(round(p * window)), int(round(n * window)))


@dataclass(frozen=True)
class TraceStep:
    iteration: int
    biases: BiasTuple
    estimate: RateEstimate

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "biases": self.biases.to_dict(),
                "estimate": self.estimate.to_dict()}


@dataclass
class TuningTrace:
    target: TuningTarget
    steps: list[TraceStep] = field(default_factory=list)
    converged: bool = False
    final: Optional[BiasTuple] = None
    final_estimate: Optional[RateEstimate] = None
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {"target": self.target.to_dict(), "converged": self.converged,
                "final": self.final.to_dict() if self.final else None,
                "final_estimate": self.final_estimate.to_dict() if self.final_estimate else None,
                "reason": self.reason, "steps": [s.to_dict() for s in self.steps]}

    def table(self) -> str:
        lines = [f"{'iter':>4} {'fo':>5} {'hpf':>5} {'diff_on':>8} {'diff_off':>8} "
                 f"{'pos_rate':>12} {'neg_rate':>12}"]
        for s in self.steps:
            b, e = s.biases, s.estimate
            lines.append(f"{s.iteration:>4} {b.fo:>5} {b.hpf:>5} {b.diff_on:>8} {b.diff_off:>8} "
                         f"{e.pos_rate:>12.6g} {e.neg_rate:>12.6g}")
        lines.append(f"converged={self.converged} final={self.final} {self.reason}")
        return "\n".join(lines)


@dataclass(frozen=True)
class ControlGains:
    k: float = 8.0  # initial DAC units per octave of rate error, common mode
    k_diff: float = 64.0  # the difference mode responds roughly ten times more weakly
    damping: float = 0.5  # fraction of the full log-proportional step taken out of band
    max_step: int = 16
    k_min: float = 0.5
    k_max: float = 256.0
    pinned_limit: int = 3  # consecutive iterations at a range limit before giving up


def _octaves(rate: float, target: float) -> float:
    return math.log2(rate / target) if rate > 0 else -math.inf


def _badness(est: RateEstimate, target: TuningTarget) -> float:
    c = target.per_polarity
    return max(abs(est.pos_rate - c), abs(est.neg_rate - c)) / c


_UNIT_MOVES = [(0, 0)] + [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]


def _predicted_error(err_c: float, err_d: float, move, k_common: float, k_diff: float) -> float:
    c = err_c - 0.5 * (move[0] + move[1]) / k_common
    d = err_d - 0.5 * (move[0] - move[1]) / k_diff
    return max(abs(c + d), abs(c - d))


def _sign_step(value: float) -> int:
    return 1 if value > 0 else -1


def tune(source: RateSource, start: BiasTuple, target: TuningTarget,
         gains: ControlGains = ControlGains(), ranges=None) -> TuningTrace:
    """Drive both polarity rates to ``target.total_rate / 2`` by moving the thresholds.

    ``fo`` and ``hpf`` stay at their start values. The loop stops once both
    rates are within tolerance and no unit move is predicted to do better.
    If it revisits a setting or runs out of iterations, a short search around
    the best setting seen picks the final value. Raises
    UnreachableTargetError or RangeExhaustedError; the partial trace is
    attached to the exception.
    """
    if ranges is None:
        ranges = getattr(getattr(source, "model", None), "ranges", None)
    if ranges is None:
        ranges = BiasRanges()
    start.validate(ranges)
    on_lo, on_hi = ranges.limits("diff_on")
    off_lo, off_hi = ranges.limits("diff_off")
    c = target.per_polarity
    trace = TuningTrace(target)
    k_common, k_diff = gains.k, gains.k_diff
    prev = None  # (common error, diff error, common step, diff step) of the last move
    visited: dict[tuple[int, int], RateEstimate] = {}
    pinned = 0
    biases = start

    def finish(b: BiasTuple, est: RateEstimate, converged: bool, reason: str) -> TuningTrace:
        trace.converged, trace.final, trace.final_estimate, trace.reason = converged, b, est, reason
        return trace

    for it in range(target.max_iterations):
        est = source.measure(biases, target.window)
        trace.steps.append(TraceStep(it, biases, est))
        key = (biases.diff_on, biases.diff_off)
        if key in visited and not pinned:
            # a setting held in place by a range limit is counted as pinned, not as a cycle
            return _polish(source, biases, target, ranges, trace, visited, "cycle")
        visited[key] = est

        e_p, e_n = _octaves(est.pos_rate, c), _octaves(est.neg_rate, c)
        if math.isinf(e_p) or math.isinf(e_n):
            # no events on a polarity: open that threshold as fast as allowed
            for e, name, lo in ((e_p, "diff_on", on_lo), (e_n, "diff_off", off_lo)):
                if math.isinf(e) and getattr(biases, name) <= lo:
                    raise UnreachableTargetError(
                        f"no {'positive' if name == 'diff_on' else 'negative'} events at "
                        f"{name}={lo}, the most sensitive setting", finish(biases, est, False, "unreachable"))
            d_on = -gains.max_step if math.isinf(e_p) else 0
            d_off = -gains.max_step if math.isinf(e_n) else 0
            prev = None
        else:
            err_c, err_d = 0.5 * (e_p + e_n), 0.5 * (e_p - e_n)
            if prev is not None:
                pc, pd, mc, md = prev
                # observed response in octaves per DAC unit; raising biases lowers rates
                if abs(mc) >= 0.5 and (pc - err_c) / mc > 0:
                    k_common = min(max(mc / (pc - err_c), gains.k_min), gains.k_max)
                if abs(md) >= 0.5 and (pd - err_d) / md > 0:
                    k_diff = min(max(md / (pd - err_d), gains.k_min), gains.k_max)
            m_c, m_d = gains.damping * k_common * err_c, gains.damping * k_diff * err_d
            d_on = int(round(min(max(m_c + m_d, -gains.max_step), gains.max_step)))
            d_off = int(round(min(max(m_c - m_d, -gains.max_step), gains.max_step)))
            in_band = target.within(est)
            if in_band:
                # inside the band, take the unit move with the smallest predicted error, or stop
                d_on, d_off = min(_UNIT_MOVES, key=lambda mv: _predicted_error(err_c, err_d, mv, k_common, k_diff))
                if (d_on, d_off) == (0, 0):
                    return finish(biases, est, True, "within tolerance")
            else:
                # quantization dead zone: nudge an out-of-band polarity by one unit
                if d_on == 0 and abs(est.pos_rate - c) > target.tolerance * c:
                    d_on = _sign_step(e_p)
                if d_off == 0 and abs(est.neg_rate - c) > target.tolerance * c:
                    d_off = _sign_step(e_n)
            prev = (err_c, err_d, 0.5 * (d_on + d_off), 0.5 * (d_on - d_off))

        new_on = min(max(biases.diff_on + d_on, on_lo), on_hi)
        new_off = min(max(biases.diff_off + d_off, off_lo), off_hi)
        clipped = new_on != biases.diff_on + d_on or new_off != biases.diff_off + d_off
        pinned = pinned + 1 if clipped else 0
        if pinned >= gains.pinned_limit:
            raise RangeExhaustedError(
                f"threshold bias held at a range limit for {pinned} iterations",
                finish(biases, est, False, "range exhausted"))
        if clipped and prev is not None:
            on_step, off_step = new_on - biases.diff_on, new_off - biases.diff_off
            prev = (prev[0], prev[1], 0.5 * (on_step + off_step), 0.5 * (on_step - off_step))
        biases = biases.replace(diff_on=new_on, diff_off=new_off)

    return _polish(source, biases, target, ranges, trace, visited, "iteration limit reached")


def _polish(source: RateSource, biases: BiasTuple, target: TuningTarget, ranges,
            trace: TuningTrace, visited: dict, why: str) -> TuningTrace:
    """Greedy search over the +-1 neighbours of the best setting seen so far.

    Quantization and measurement noise can make the control law cycle next
    to an in-band setting it never lands on. Runs until a neighbour is in
    band, no neighbour improves, or the iteration budget is spent.
    """
    on_lo, on_hi = ranges.limits("diff_on")
    off_lo, off_hi = ranges.limits("diff_off")

    def best_key():
        return min(visited, key=lambda k: _badness(visited[k], target))

    def finish(key, converged, reason):
        trace.converged = converged
        trace.final = biases.replace(diff_on=key[0], diff_off=key[1])
        trace.final_estimate = visited[key]
        trace.reason = reason
        return trace

    center = best_key()
    if target.within(visited[center]):
        return finish(center, True, f"{why}: kept best in-band setting")
    while len(trace.steps) < target.max_iterations:
        improved = False
        for d_on, d_off in ((1, 1), (-1, -1), (1, 0), (0, 1), (-1, 0), (0, -1), (1, -1), (-1, 1)):
            key = (center[0] + d_on, center[1] + d_off)
            if key in visited or not (on_lo <= key[0] <= on_hi and off_lo <= key[1] <= off_hi):
                continue
            if len(trace.steps) >= target.max_iterations:
                break
            b = biases.replace(diff_on=key[0], diff_off=key[1])
            est = source.measure(b, target.window)
            trace.steps.append(TraceStep(len(trace.steps), b, est))
            visited[key] = est
            if target.within(est):
                return finish(key, True, f"{why}: in-band neighbour found")
            if _badness(est, target) < _badness(visited[center], target):
                improved = True
        if not improved:
            break
        center = best_key()
    return finish(best_key(), False, f"{why}: no in-band setting found")


def retune_after_illumination_change(source: RateSource, previous: TuningTrace,
                                     target: TuningTarget, gains: ControlGains = ControlGains(),
                                     ranges=None) -> TuningTrace:
    """Re-run the loop from a converged result, filters unchanged."""
    if not previous.converged or previous.final is None:
        raise InvalidArgumentError("previous trace did not converge")
    return tune(source, previous.final, target, gains, ranges)


def balanced_dac(model: AnalyticRateModel, solution_x: float, solution_y: float) -> tuple[float, float]:
    """Continuous (diff_on, diff_off) for a normalized solution; for solver cross-checks."""
    return NormalizedDomain(solution_x, solution_y).to_dac(model.ranges)
