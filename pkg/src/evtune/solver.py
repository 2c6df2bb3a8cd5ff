"""Root finding for the two-rate system ``ber_n = C1, ber_p = C2``.

The solver works in normalized coordinates at a fixed filter setting
``(fo, hpf)``. The primary method is nested bisection. For a fixed ``x``,
``ber_p`` is strictly increasing in ``y``, so the inner bisection finds the
unique ``y(x)`` on the constraint ``ber_p = C2``. Along that curve, ``ber_n``
is strictly increasing in ``x`` because its total derivative equals
``jacobian / g_y > 0``, so the outer bisection converges from any bracket.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .analytic import AnalyticRateModel, AnalyticSignalModel
from .core import EvtuneError, InvalidArgumentError

BRACKET = (1e-12, 1.0 - 1e-12)
DEFAULT_TOL = 1e-9
MAX_BISECTIONS = 200


class DomainExhaustedError(EvtuneError):
    """The root is not bracketed inside the open unit square."""


class SingularJacobianError(EvtuneError):
    pass


@dataclass(frozen=True)
class SolutionPair:
    x: float
    y: float
    residual_f: float
    residual_g: float
    iterations: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SensitivityReport:
    dx_dC: float
    dy_dC: float
    jacobian: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_targets(*targets: float) -> None:
    for c in targets:
        if not (c > 0 and math.isfinite(c)):
            raise InvalidArgumentError(f"targets must be positive and finite, got {c}")


def _bisect(fn, target: float, lo: float, hi: float, tol: float):
    """Bisection on an increasing ``fn``. Returns (point, residual, iterations)."""
    r_lo, r_hi = fn(lo) - target, fn(hi) - target
    if r_lo > tol or r_hi < -tol or math.isnan(r_lo) or math.isnan(r_hi):
        raise DomainExhaustedError(
            f"target {target:.6g} not bracketed in [{lo:.3g}, {hi:.3g}] "
            f"(values {r_lo + target:.6g}, {r_hi + target:.6g})")
    best = (lo, r_lo) if abs(r_lo) <= abs(r_hi) else (hi, r_hi)
    it = 0
    while abs(best[1]) > tol and it < MAX_BISECTIONS:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break  # interval at floating-point resolution
        r = fn(mid) - target
        it += 1
        if abs(r) < abs(best[1]):
            best = (mid, r)
        if r < 0:
            lo = mid
        else:
            hi = mid
    return best[0], best[1], it


def solve_system(model: AnalyticRateModel, C1: float, C2: float, tol: float = DEFAULT_TOL,
                 fo: float = 0.0, hpf: float = 0.0,
                 bracket: tuple[float, float] = BRACKET) -> SolutionPair:
    """Solve ``ber_n(x, y) = C1`` and ``ber_p(x, y) = C2`` by nested bisection.

    ``bracket`` bounds both coordinates and is clipped to the open square. The
    returned residuals are at most ``tol`` unless the root sits so close to an
    edge that floating-point resolution cannot reach it, in which case
    DomainExhaustedError is raised.
    """
    _check_targets(C1, C2)
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")
    lo = max(bracket[0], BRACKET[0])
    hi = min(bracket[1], BRACKET[1])
    if not lo < hi:
        raise InvalidArgumentError(f"empty bracket {bracket}")
    s = model.scale(fo, hpf)
    inner_total = 0

    def y_of(x: float) -> float:
        nonlocal inner_total
        y, _, it = _bisect(lambda v: model.rates_xy(s, x, v)[1], C2, lo, hi, tol / 4)
        inner_total += it
        return y

    def f_on_curve(x: float) -> float:
        # y(x) decreases in x; where it leaves the square, report which side the root is on
        if model.rates_xy(s, x, hi)[1] < C2 - tol / 4:
            return -math.inf
        if model.rates_xy(s, x, lo)[1] > C2 + tol / 4:
            return math.inf
        return model.rates_xy(s, x, y_of(x))[0]

    x, _, outer = _bisect(f_on_curve, C1, lo, hi, tol / 2)
    y = y_of(x)
    f, g = model.rates_xy(s, x, y)
    res_f, res_g = float(f - C1), float(g - C2)
    if abs(res_f) > tol or abs(res_g) > tol:
        raise DomainExhaustedError(
            f"residuals ({res_f:.3g}, {res_g:.3g}) exceed tol {tol:g} at floating-point resolution")
    return SolutionPair(float(x), float(y), res_f, res_g, outer + inner_total)


def solve_balanced(model: AnalyticRateModel, C: float, tol: float = DEFAULT_TOL,
                   fo: float = 0.0, hpf: float = 0.0) -> SolutionPair:
    """Solution with equal per-polarity rates ``C``."""
    return solve_system(model, C, C, tol, fo, hpf)


def newton_solve(model: AnalyticRateModel, C1: float, C2: float, x0: float, y0: float,
                 fo: float = 0.0, hpf: float = 0.0, max_iter: int = 100,
                 tol: float = DEFAULT_TOL, rel_tol: float = 1e-13) -> Optional[tuple[float, float]]:
    """Independent Newton solve in logit/log space, started from ``(x0, y0)``.

    Working with ``u = logit(x)``, ``v = logit(y)`` and log residuals keeps
    every iterate inside the open square. Stops at absolute residual ``tol``
    or relative residual ``rel_tol``, whichever comes first. Returns None if it
    fails to converge. Used to check uniqueness from scattered starting points.
    """
    _check_targets(C1, C2)
    s = model.scale(fo, hpf)
    u, v = math.log(x0 / (1 - x0)), math.log(y0 / (1 - y0))
    lc1, lc2 = math.log(C1), math.log(C2)
    for _ in range(max_iter):
        x, y = 1 / (1 + math.exp(-u)), 1 / (1 + math.exp(-v))
        f, g = model.rates_xy(s, x, y)
        r1, r2 = math.log(f) - lc1, math.log(g) - lc2
        if (abs(f - C1) <= tol and abs(g - C2) <= tol) or max(abs(r1), abs(r2)) <= rel_tol:
            return x, y
        p = model.partials_xy(s, x, y)
        jx, jy = x * (1 - x), y * (1 - y)  # d(x)/du, d(y)/dv
        a, b = p.f_x * jx / f, p.f_y * jy / f
        c, d = p.g_x * jx / g, p.g_y * jy / g
        det = a * d - b * c
        if not det > 0:
            return None
        du, dv = (d * r1 - b * r2) / det, (a * r2 - c * r1) / det
        step = max(abs(du), abs(dv))
        if step > 5.0:  # trust region in logit units
            du, dv = du * 5.0 / step, dv * 5.0 / step
        u, v = u - du, v - dv
    return None


@dataclass(frozen=True)
class OrderingReport:
    C: float
    C_prime: float
    lower: SolutionPair
    upper: SolutionPair
    ordered: bool

    def to_dict(self) -> dict:
        return {"C": self.C, "C_prime": self.C_prime, "lower": self.lower.to_dict(),
                "upper": self.upper.to_dict(), "ordered": self.ordered}


def check_monotone_in_C(model: AnalyticRateModel, C: float, C_prime: float,
                        tol: float = DEFAULT_TOL, fo: float = 0.0, hpf: float = 0.0) -> OrderingReport:
    """Balanced solutions at ``C < C_prime`` must increase in both coordinates."""
    _check_targets(C, C_prime)
    if C > C_prime:
        raise InvalidArgumentError(f"need C <= C_prime, got {C} > {C_prime}")
    a = solve_balanced(model, C, tol, fo, hpf)
    b = solve_balanced(model, C_prime, tol, fo, hpf)
    ordered = (a.x < b.x and a.y < b.y) if C < C_prime else True
    return OrderingReport(C, C_prime, a, b, ordered)


def sensitivity(model: AnalyticRateModel, solution: SolutionPair,
                fo: float = 0.0, hpf: float = 0.0) -> SensitivityReport:
    """Derivatives of a balanced solution with respect to the common target ``C``."""
    p = model.partials_xy(model.scale(fo, hpf), solution.x, solution.y)
    j = p.jacobian
    if not abs(j) > 1e-12:
        raise SingularJacobianError(f"jacobian {j:.3g} too close to zero")
    return SensitivityReport(float((p.g_y - p.f_y) / j), float((p.f_x - p.g_x) / j), float(j))


@dataclass(frozen=True)
class OptimalSensitivityReport:
    solution: SolutionPair
    sig: float
    curve_C: tuple[float, ...]
    curve_sig: tuple[float, ...]

    @property
    def argmax_C(self) -> float:
        return self.curve_C[int(np.argmax(self.curve_sig))]

    @property
    def optimum_at_budget(self) -> bool:
        """No sampled point below the budget beats the balanced point at D/2."""
        return max(self.curve_sig) <= self.sig

    def to_dict(self) -> dict:
        return {"solution": self.solution.to_dict(), "sig": self.sig,
                "curve_C": list(self.curve_C), "curve_sig": list(self.curve_sig),
                "optimum_at_budget": self.optimum_at_budget}


def optimal_sensitivity(rate_model: AnalyticRateModel, sig_model: AnalyticSignalModel, D: float,
                        n_samples: int = 100, fo: float = 0.0, hpf: float = 0.0,
                        tol: float = DEFAULT_TOL) -> OptimalSensitivityReport:
    """Balanced thresholds for a total rate budget ``D``, with a brute-force check.

    Samples ``n_samples`` targets ``C`` evenly on ``(0, D/2]`` and evaluates the
    signal model at each balanced solution.
    """
    _check_targets(D)
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be >= 1")
    best = solve_balanced(rate_model, D / 2, tol, fo, hpf)
    sig = float(sig_model.value_xy(fo, hpf, best.x, best.y))
    cs = tuple(float(c) for c in np.linspace(D / 2 / n_samples, D / 2, n_samples))
    sigs = []
    for c in cs:
        sol = best if c == D / 2 else solve_balanced(rate_model, c, tol, fo, hpf)
        sigs.append(float(sig_model.value_xy(fo, hpf, sol.x, sol.y)))
    return OptimalSensitivityReport(best, sig, cs, tuple(sigs))


@dataclass(frozen=True)
class CounterexampleWitness:
    epsilon: float
    targets: tuple[float, float]
    targets_prime: tuple[float, float]
    solution: SolutionPair
    solution_prime: SolutionPair

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "targets": list(self.targets),
                "targets_prime": list(self.targets_prime), "solution": self.solution.to_dict(),
                "solution_prime": self.solution_prime.to_dict()}


class NotFound:
    """Sentinel returned when a counterexample search is exhausted."""

    def __init__(self, n_checked: int):
        self.n_checked = n_checked

    def __bool__(self) -> bool:
        return False

    def to_dict(self) -> dict:
        return {"found": False, "n_checked": self.n_checked}


SearchTuple = tuple[float, float, float, float, float]  # epsilon, C1, C2, C1', C2'


def default_counterexample_grid() -> list[SearchTuple]:
    """Strongly unequal targets: C1 << C2, C1' slightly above C1, C2' far above C2."""
    grid = []
    for eps in np.round(np.arange(0.1, 1.0, 0.1), 10):
        for c1 in (1.0, 10.0):
            for c2 in (100.0, 1000.0):
                for bump1 in (1.01, 1.1):
                    for bump2 in (10.0, 100.0):
                        grid.append((float(eps), c1, c2, c1 * bump1, c2 * bump2))
    return grid


def find_counterexample(base: AnalyticRateModel, search_grid: Iterable[SearchTuple],
                        tol: float = DEFAULT_TOL, fo: float = 0.0,
                        hpf: float = 0.0) -> Union[CounterexampleWitness, NotFound]:
    """First grid tuple whose larger targets do not give a componentwise larger root.

    Grid tuples must satisfy ``C1 < C1'``, ``C2 < C2'`` and ``C1 != C2``.
    """
    n = 0
    for eps, c1, c2, c1p, c2p in search_grid:
        if not (c1 < c1p and c2 < c2p and c1 != c2):
            raise InvalidArgumentError(f"invalid search tuple {(eps, c1, c2, c1p, c2p)}")
        model = AnalyticRateModel(eps, base.s0, base.sigma_fo, base.sigma_hpf, base.ranges)
        a = solve_system(model, c1, c2, tol, fo, hpf)
        b = solve_system(model, c1p, c2p, tol, fo, hpf)
        n += 1
        if a.x >= b.x or a.y >= b.y:
            return CounterexampleWitness(eps, (c1, c2), (c1p, c2p), a, b)
    return NotFound(n)


def balanced_diagonal_oracle(epsilon: float, scale: float, C: float) -> float:
    """Closed-form balanced root: ``epsilon*T^2 + T - C/scale = 0`` with ``x = T/(1+T)``."""
    q = C / scale
    t = q if epsilon == 0 else (-1.0 + math.sqrt(1.0 + 4.0 * epsilon * q)) / (2.0 * epsilon)
    return t / (1.0 + t)


def multistart_agreement(model: AnalyticRateModel, C1: float, C2: float, starts: Sequence,
                         fo: float = 0.0, hpf: float = 0.0) -> float:
    """Largest distance between the bisection root and Newton roots from ``starts``.

    A start that fails to converge counts as infinite disagreement.
    """
    ref = solve_system(model, C1, C2, fo=fo, hpf=hpf)
    worst = 0.0
    for x0, y0 in starts:
        r = newton_solve(model, C1, C2, x0, y0, fo, hpf)
        if r is None:
            return math.inf
        worst = max(worst, abs(r[0] - ref.x), abs(r[1] - ref.y))
    return worst
