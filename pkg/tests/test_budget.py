import math
import sys
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evtune.budget import (
    ROUNDED_PER_EVENT_BOUND,
    ClusterSpec,
    RateBudget,
    budget_table,
    check_budget,
    cluster_false_alarm,
    cluster_frequency,
    per_pixel_rate,
    per_second_false_alarm,
    poisson_tail,
    uniform_background_stream,
)
from evtune.core import Event, EventStream, InvalidArgumentError, RateEstimate

EPS = sys.float_info.epsilon


def exact_cluster(n, r, period, m):
    return (Fraction(n) * Fraction(r) * Fraction(period)) ** (m - 1)


class TestArithmetic:
    def test_per_pixel_rate_hd(self):
        r = per_pixel_rate(1e5, 1280, 720)
        assert r == float(Fraction(100000, 1280 * 720))
        assert round(r, 4) == 0.1085

    def test_five_event_cluster(self):
        # decimal inputs, compared against exact rational arithmetic on the same decimals
        v = cluster_false_alarm(ClusterSpec(9, 0.1, 0.01, 5))
        oracle = float(exact_cluster(9, Fraction(1, 10), Fraction(1, 100), 5))
        assert oracle == 6.561e-9
        assert math.isclose(v, oracle, rel_tol=8 * EPS)
        assert v < ROUNDED_PER_EVENT_BOUND

    def test_ten_event_cluster(self):
        v = cluster_false_alarm(ClusterSpec(9, 0.1, 0.01, 10))
        assert math.isclose(v, 0.009 ** 9, rel_tol=16 * EPS)
        assert math.isclose(v, 3.874204890e-19, rel_tol=1e-9)
        assert 1e5 * v < 1e-13

    def test_per_second_chain(self):
        fa = per_second_false_alarm(ClusterSpec(9, 0.1, 0.01, 5), 1e5)
        assert math.isclose(fa.exact, 6.561e-4, rel_tol=8 * EPS)
        assert math.isclose(fa.rounded, 1e-3, rel_tol=EPS)
        assert fa.exact <= 1e-3 and fa.rounded <= 1e-3

    def test_table(self):
        t = budget_table(1e5, 1280, 720)
        five, ten = t["clusters"]
        assert t["per_pixel_rate_rounded"] == 0.1
        assert math.isclose(five["per_event_rounded"], 6.561e-9, rel_tol=8 * EPS)
        assert five["per_event_exact"] > five["per_event_rounded"]
        assert ten["per_second_rounded"] < 1e-13
        assert t["per_second_rounded_bound"] == pytest.approx(1e-3)
        assert t["verdict"] == "ok"

    @given(st.integers(1, 25), st.fractions(Fraction(0), Fraction(10), max_denominator=1000),
           st.fractions(Fraction(1, 1000), Fraction(1), max_denominator=1000), st.integers(1, 12))
    def test_matches_exact_rationals(self, n, r, period, m):
        v = cluster_false_alarm(ClusterSpec(n, float(r), float(period), m))
        oracle = float(exact_cluster(n, r, period, m))
        assert v == pytest.approx(oracle, rel=1e-13, abs=1e-300)


class TestMonotone:
    @given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 10))
    def test_increasing_in_rate(self, r1, r2, m):
        lo, hi = sorted((r1, r2))
        a = cluster_false_alarm(ClusterSpec(9, lo, 0.01, m))
        b = cluster_false_alarm(ClusterSpec(9, hi, 0.01, m))
        assert a <= b

    @given(st.floats(0, 10), st.integers(2, 9))
    def test_decreasing_in_cluster_size_when_below_one(self, r, m):
        # n*r*T < 1 on this range, so each extra event makes a cluster rarer
        a = cluster_false_alarm(ClusterSpec(9, r, 0.01, m))
        b = cluster_false_alarm(ClusterSpec(9, r, 0.01, m + 1))
        assert b <= a


class TestValidation:
    def test_budget_ordering(self):
        with pytest.raises(InvalidArgumentError):
            RateBudget(cap=1e7, max_smooth_rate=1e6)
        with pytest.raises(InvalidArgumentError):
            RateBudget(pipeline_cap=2e5)

    def test_cluster_spec(self):
        with pytest.raises(InvalidArgumentError):
            ClusterSpec(cluster_size=0)
        with pytest.raises(InvalidArgumentError):
            ClusterSpec(period=0)

    def test_pixels(self):
        with pytest.raises(InvalidArgumentError):
            per_pixel_rate(1.0, 0, 10)

    def test_negative_total(self):
        with pytest.raises(InvalidArgumentError):
            per_second_false_alarm(ClusterSpec(), -1.0)


class TestVerdict:
    @pytest.mark.parametrize("total,verdict", [(5e4, "ok"), (1e5, "ok"), (1.5e5, "over_cap"),
                                               (5e6, "over_cap"), (1e7, "hazard")])
    def test_levels(self, total, verdict):
        assert check_budget(RateBudget(), RateEstimate(total / 2, total / 2, 1, 0, 0)) == verdict

    def test_pipeline_below_cap(self):
        b = RateBudget(pipeline_cap=5e4)
        assert check_budget(b, RateEstimate(4e4, 4e4, 1, 0, 0)) == "over_pipeline"


class TestMonteCarlo:
    def test_poisson_tail(self):
        assert poisson_tail(1.0, 0) == 1.0
        assert poisson_tail(1.0, 1) == pytest.approx(1 - math.exp(-1))
        assert poisson_tail(0.0, 3) == 0.0

    def test_cluster_counter_by_hand(self):
        evs = [Event(0, 5, 5, True), Event(100, 6, 6, False), Event(200, 4, 5, True),
               Event(300, 5, 5, True), Event(400, 8, 8, True)]
        s = EventStream.from_events(10, 10, evs)
        # only the first event has three neighbours inside 10 ms
        assert cluster_frequency(s, 4, 0.01) == pytest.approx(1 / 5)
        assert cluster_frequency(s, 4, 0.0002) == 0.0
        assert cluster_frequency(s, 1) == 1.0
        assert cluster_frequency(EventStream(4, 4), 5) == 0.0

    def test_uniform_stream_rate(self):
        s = uniform_background_stream(32, 32, 2.0, 5.0, seed=4)
        assert len(s) / (32 * 32 * 5.0) == pytest.approx(2.0, rel=0.05)
        assert s == uniform_background_stream(32, 32, 2.0, 5.0, seed=4)

    def test_empirical_frequency_within_bound_and_near_poisson_tail(self):
        r, m, period = 5.0, 5, 0.01
        s = uniform_background_stream(64, 64, r, 10.0, seed=0)
        emp = cluster_frequency(s, m, period)
        bound = cluster_false_alarm(ClusterSpec(9, r, period, m))
        tail = poisson_tail(9 * r * period, m - 1)
        assert 0 < emp <= 10 * bound
        # edge pixels see fewer neighbours, so the empirical value sits a little low
        assert 0.7 * tail <= emp <= 1.1 * tail

    def test_rare_regime_has_no_clusters(self):
        s = uniform_background_stream(64, 64, 0.1, 10.0, seed=0)
        assert cluster_frequency(s, 5, 0.01) <= 10 * cluster_false_alarm(ClusterSpec(9, 0.1, 0.01, 5))
