import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evtune.analytic import (
    AnalyticRateModel,
    AnalyticSignalModel,
    NormalizedDomain,
    eval_ber,
    eval_partials,
    eval_sig,
    load_rate_model,
    verify_hypotheses,
)
from evtune.core import BiasRanges, BiasTuple, DomainError, InvalidArgumentError

# diff range [-150, 250] spans 400 units: bias 50 sits at normalized 0.5
MID = 50
unit = st.floats(0.01, 0.99)


def test_midpoint_rates():
    m = AnalyticRateModel(epsilon=0.5, s0=1.0)
    assert eval_ber(m, BiasTuple(0, 0, MID, MID)) == (1.5, 1.5)


def test_midpoint_partials():
    p = eval_partials(AnalyticRateModel(epsilon=0.5, s0=1.0), BiasTuple(0, 0, MID, MID))
    assert tuple(p) == (6.0, 2.0, 2.0, 6.0)
    assert p.jacobian == 32.0


def test_rate_vanishes_at_lower_edge():
    m = AnalyticRateModel()
    n_near, _ = eval_ber(m, BiasTuple(0, 0, MID, 249))
    n_mid, _ = eval_ber(m, BiasTuple(0, 0, MID, MID))
    assert n_near < n_mid / 100


@pytest.mark.parametrize("b", [BiasTuple(0, 0, 250, MID), BiasTuple(0, 0, MID, -150)])
def test_threshold_limits_are_outside_domain(b):
    with pytest.raises(DomainError):
        eval_ber(AnalyticRateModel(), b)


def test_raising_fo_by_sigma_doubles_rates():
    m = AnalyticRateModel()
    a = eval_ber(m, BiasTuple(0, 40, 10, 30))
    b = eval_ber(m, BiasTuple(20, 40, 10, 30))
    assert b == pytest.approx((2 * a[0], 2 * a[1]), rel=1e-12)


def test_invalid_parameters():
    for kw in ({"epsilon": 1.0}, {"epsilon": -0.1}, {"s0": 0.0}, {"sigma_fo": 0.0}):
        with pytest.raises(InvalidArgumentError):
            AnalyticRateModel(**kw)


def test_normalized_domain_is_open():
    with pytest.raises(DomainError):
        NormalizedDomain(0.0, 0.5)
    assert NormalizedDomain(0.5, 0.25).to_dac(BiasRanges()) == (150.0, 50.0)


@given(unit, unit, st.floats(0.05, 0.95))
def test_swap_symmetry(x, y, eps):
    m = AnalyticRateModel(epsilon=eps)
    n1, p1 = m.rates_xy(3.0, x, y)
    n2, p2 = m.rates_xy(3.0, y, x)
    assert (n1, p1) == (p2, n2)


@given(unit, unit, st.floats(0.05, 0.95))
def test_positive_and_increasing(x, y, eps):
    m = AnalyticRateModel(epsilon=eps)
    n, p = m.rates_xy(1.0, x, y)
    assert n > 0 and p > 0
    for dx, dy in ((1e-3, 0), (0, 1e-3)):
        n2, p2 = m.rates_xy(1.0, x + dx, y + dy)
        assert n2 > n and p2 > p


@given(unit, unit, st.integers(-90, 90), st.integers(0, 190))
def test_filter_scaling_direction(x, y, fo, hpf):
    m = AnalyticRateModel()
    base = m.rates_xy(m.scale(fo, hpf), x, y)
    up_fo = m.rates_xy(m.scale(fo + 5, hpf), x, y)
    up_hpf = m.rates_xy(m.scale(fo, hpf + 5), x, y)
    assert up_fo[0] > base[0] and up_fo[1] > base[1]
    assert up_hpf[0] < base[0] and up_hpf[1] < base[1]


def test_derivative_ordering_on_grid():
    m = AnalyticRateModel()
    g = (np.arange(50) + 0.5) / 50
    xx, yy = np.meshgrid(g, g)
    p = m.partials_xy(1.0, xx, yy)
    assert np.all(p.f_x > p.g_x) and np.all(p.g_x > 0)
    assert np.all(p.g_y > p.f_y) and np.all(p.f_y > 0)
    # the gaps are exactly S*T'(s)
    assert np.allclose(p.f_x - p.g_x, 1.0 / (1 - xx) ** 2)
    assert np.allclose(p.g_y - p.f_y, 1.0 / (1 - yy) ** 2)


def test_partials_match_central_differences():
    rng = np.random.default_rng(7)
    m = AnalyticRateModel(epsilon=0.3, s0=50.0)
    for x, y in rng.uniform(0.05, 0.95, (100, 2)):
        h = 1e-6
        p = m.partials_xy(2.0, x, y)
        fx = (m.rates_xy(2.0, x + h, y)[0] - m.rates_xy(2.0, x - h, y)[0]) / (2 * h)
        fy = (m.rates_xy(2.0, x, y + h)[0] - m.rates_xy(2.0, x, y - h)[0]) / (2 * h)
        gx = (m.rates_xy(2.0, x + h, y)[1] - m.rates_xy(2.0, x - h, y)[1]) / (2 * h)
        gy = (m.rates_xy(2.0, x, y + h)[1] - m.rates_xy(2.0, x, y - h)[1]) / (2 * h)
        assert (fx, fy, gx, gy) == pytest.approx(tuple(p), rel=1e-4)


def test_eval_partials_validates_biases():
    with pytest.raises(InvalidArgumentError):
        eval_partials(AnalyticRateModel(), BiasTuple(0, 0, 300, 0))


class TestSignalModel:
    def test_global_max_at_peak_with_max_sensitivity(self):
        r = BiasRanges()
        sig = AnalyticSignalModel(peak_fo=10, peak_hpf=80)
        best = eval_sig(sig, BiasTuple(10, 80, r.diff_on_min, r.diff_off_min))
        for fo in range(-100, 101, 10):
            for hpf in range(0, 201, 10):
                for d in (-150, 0, 250):
                    assert eval_sig(sig, BiasTuple(fo, hpf, d, d)) <= best

    @given(st.integers(-150, 249), st.integers(-150, 250))
    def test_decreasing_in_thresholds(self, on, off):
        sig = AnalyticSignalModel()
        assert eval_sig(sig, BiasTuple(0, 50, on + 1, off)) < eval_sig(sig, BiasTuple(0, 50, on, off))

    def test_zero_amplitude(self):
        sig = AnalyticSignalModel(amplitude=0.0)
        assert eval_sig(sig, BiasTuple(5, 5, 5, 5)) == 0.0

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            AnalyticSignalModel(width_hpf=0)
        with pytest.raises(InvalidArgumentError):
            AnalyticSignalModel(amplitude=-1)


class TestHypotheses:
    def test_default_model_passes(self):
        rep = verify_hypotheses(AnalyticRateModel(), 50)
        assert rep.passed, rep.failed
        assert rep["jacobian_positive"].n_points == 2500

    def test_decoupled_model_fails_ordering(self):
        rep = verify_hypotheses(AnalyticRateModel(epsilon=0.0), 50)
        assert not rep.passed
        assert "x_derivative_ordering" in rep.failed and "y_derivative_ordering" in rep.failed
        assert rep["jacobian_positive"].passed

    def test_grid_too_small(self):
        with pytest.raises(InvalidArgumentError):
            verify_hypotheses(AnalyticRateModel(), 1)


def test_model_json_round_trip(tmp_path):
    m = AnalyticRateModel(epsilon=0.25, s0=12.0, ranges=BiasRanges(fo_min=-10))
    p = tmp_path / "m.json"
    p.write_text(json.dumps(m.to_dict()))
    assert load_rate_model(p) == m
    assert AnalyticSignalModel.from_dict(AnalyticSignalModel().to_dict()) == AnalyticSignalModel()
    with pytest.raises(InvalidArgumentError):
        AnalyticRateModel.from_dict({"bogus": 1})
