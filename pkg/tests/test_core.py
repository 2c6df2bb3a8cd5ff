import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evtune.core import (
    BiasRanges,
    BiasTuple,
    Event,
    EventOrderError,
    EventParseError,
    EventStream,
    InvalidArgumentError,
    RateEstimate,
    RegionOfInterest,
    count_signal_events,
    estimate_rates,
    read_events,
    write_events,
)


def stream_of(events, width=16, height=16):
    return EventStream.from_events(width, height, sorted(events))


@st.composite
def streams(draw, max_events=60):
    w = draw(st.integers(1, 20))
    h = draw(st.integers(1, 20))
    n = draw(st.integers(0, max_events))
    ts = sorted(draw(st.lists(st.integers(0, 2_000_000), min_size=n, max_size=n)))
    evs = [Event(t, draw(st.integers(0, w - 1)), draw(st.integers(0, h - 1)), draw(st.booleans()))
           for t in ts]
    return EventStream.from_events(w, h, evs)


class TestBiasTypes:
    def test_ranges_require_min_below_max(self):
        with pytest.raises(InvalidArgumentError):
            BiasRanges(fo_min=5, fo_max=5)

    def test_bias_tuple_rejects_fractional_values(self):
        with pytest.raises(InvalidArgumentError):
            BiasTuple(0, 0, 1.5, 0)
        assert BiasTuple(0.0, 10.0, 3, 4).hpf == 10

    def test_validate_against_ranges(self):
        r = BiasRanges()
        BiasTuple(-100, 200, -150, 250).validate(r)
        with pytest.raises(InvalidArgumentError):
            BiasTuple(0, 201, 0, 0).validate(r)

    def test_dict_round_trip(self):
        b = BiasTuple(1, 2, 3, 4)
        assert BiasTuple.from_dict(b.to_dict()) == b
        r = BiasRanges(hpf_max=300)
        assert BiasRanges.from_dict(r.to_dict()) == r


class TestEventStream:
    def test_rejects_unsorted(self):
        with pytest.raises(EventOrderError):
            EventStream(4, 4, [5, 3], [0, 0], [0, 0], [True, True])

    def test_rejects_out_of_bounds(self):
        with pytest.raises(InvalidArgumentError):
            EventStream(4, 4, [1], [4], [0], [True])

    def test_columns_are_read_only_and_caller_arrays_untouched(self):
        t = np.array([1, 2])
        s = EventStream(4, 4, t, [0, 1], [0, 1], [True, False])
        with pytest.raises(ValueError):
            s.t[0] = 9
        t[0] = 0  # caller keeps a writable array

    def test_slice_is_half_open(self):
        s = stream_of([Event(0, 0, 0, True), Event(10, 0, 0, True), Event(20, 0, 0, True)])
        assert len(s.slice_time(0, 20)) == 2


class TestEstimateRates:
    def test_three_positive_one_negative(self):
        s = stream_of([Event(t, 1, 1, True) for t in (1, 2, 3)] + [Event(4, 1, 1, False)])
        r = estimate_rates(s, 0.0, 1.0)
        assert (r.pos_rate, r.neg_rate, r.n_pos, r.n_neg) == (3.0, 1.0, 3, 1)

    def test_empty_stream(self):
        r = estimate_rates(EventStream(2, 2), 0.0, 1.0)
        assert (r.pos_rate, r.neg_rate) == (0.0, 0.0)

    @pytest.mark.parametrize("window", [0.0, -1.0])
    def test_non_positive_window(self, window):
        with pytest.raises(InvalidArgumentError):
            estimate_rates(EventStream(2, 2), 0.0, window)

    @given(streams(), st.floats(0, 1.5), st.floats(0.01, 2.0))
    def test_polarity_rates_sum_to_total(self, s, t0, window):
        r = estimate_rates(s, t0, window)
        lo, hi = round(t0 * 1e6), round((t0 + window) * 1e6)
        total = int(np.count_nonzero((s.t >= lo) & (s.t < hi)))
        assert r.pos_rate + r.neg_rate == pytest.approx(total / window)
        assert r.pos_rate >= 0 and r.neg_rate >= 0

    def test_rate_estimate_from_counts(self):
        r = RateEstimate.from_counts(10, 4, 2.0)
        assert (r.pos_rate, r.neg_rate, r.total_rate) == (5.0, 2.0, 7.0)


class TestSignalCount:
    def test_fifty_center_events_over_fifty_periods(self):
        s = stream_of([Event(t * 100, 8, 8, True) for t in range(50)])
        assert count_signal_events(s, RegionOfInterest(8, 8, 5), True, 0.5, 50) == 1.0

    def test_events_outside_radius(self):
        s = stream_of([Event(0, 0, 0, True), Event(1, 15, 15, True)])
        assert count_signal_events(s, RegionOfInterest(8, 8, 5), True, 0.5, 50) == 0.0

    def test_radius_is_inclusive_euclidean(self):
        roi = RegionOfInterest(0, 0, 5)
        assert roi.contains(3, 4) and roi.contains(5, 0) and not roi.contains(4, 4)

    @pytest.mark.parametrize("kw", [{"n_periods": 0}, {"t_span": 0.0}])
    def test_preconditions(self, kw):
        args = {"t_span": 0.5, "n_periods": 50, **kw}
        with pytest.raises(InvalidArgumentError):
            count_signal_events(EventStream(2, 2), RegionOfInterest(0, 0), True, **args)

    def test_negative_radius(self):
        with pytest.raises(InvalidArgumentError):
            RegionOfInterest(0, 0, -1)

    @given(streams(), st.integers(1, 1_999_999), st.booleans())
    def test_additive_over_disjoint_spans(self, s, split_us, pol):
        roi = RegionOfInterest(5, 5, 4)
        split = split_us / 1e6
        whole = count_signal_events(s, roi, pol, 2.0, 1)
        parts = (count_signal_events(s, roi, pol, split, 1)
                 + count_signal_events(s, roi, pol, 2.0 - split, 1, t_start=split))
        assert whole == parts


class TestEventIO:
    def test_single_line(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("t_us,x,y,p\n1000,5,7,1\n")
        s = read_events(p)
        assert list(s) == [Event(1000, 5, 7, True)]

    def test_header_only_is_empty(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("t_us,x,y,p\n")
        assert len(read_events(p)) == 0

    def test_malformed_line_reports_line_number(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("t_us,x,y,p\n1,1,1,1\n2,x,1,0\n")
        with pytest.raises(EventParseError) as exc:
            read_events(p)
        assert exc.value.lineno == 3

    def test_bad_polarity(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("t_us,x,y,p\n1,1,1,2\n")
        with pytest.raises(EventParseError):
            read_events(p)

    def test_unsorted_timestamps(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("t_us,x,y,p\n5,1,1,1\n4,1,1,0\n")
        with pytest.raises(EventOrderError):
            read_events(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("t,x,y,p\n")
        with pytest.raises(EventParseError):
            read_events(p)

    @settings(max_examples=50)
    @given(streams())
    def test_round_trip_identity(self, tmp_path_factory, s):
        p = tmp_path_factory.mktemp("rt") / "e.csv"
        write_events(s, p)
        assert read_events(p, s.width, s.height) == s
