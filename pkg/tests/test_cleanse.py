import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sopah.cleanse import (
    CAMP_PRESET,
    FAST_CHARGE_PRESET,
    CleanseConfig,
    clean_feature_series,
    detect_jumps,
    edge_aware_median,
    extract_segments,
    halfwidth_at,
    normalize_for_jumps,
    read_segments,
    segment_mape,
    write_segments,
)
from sopah.errors import ConfigError
from sopah.features import CAMP, FeatureSeries


def _brute_median(x, hws):
    n = len(x)
    out = []
    for i in range(n):
        h = next((h for h in sorted(hws, reverse=True) if i - h >= 0 and i + h <= n - 1), min(i, n - 1 - i))
        out.append(np.median(x[i - h : i + h + 1]))
    return np.array(out)


def _camp_series(q, r=None, eff=99.9):
    n = len(q)
    r = np.full(n, 0.05) if r is None else r
    v = np.column_stack([q, 3.6 * np.asarray(q), np.full(n, eff), np.full(n, eff - 5), r])
    return FeatureSeries("c", CAMP, v, np.arange(n), np.ones(v.shape, bool))


class TestMedian:
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=120))
    def test_matches_brute_force(self, xs):
        x = np.array(xs)
        np.testing.assert_array_equal(edge_aware_median(x), _brute_median(x, (40, 20, 10, 5, 2)))

    def test_halfwidth_schedule(self):
        n = 300
        assert [halfwidth_at(i, n, (40, 20, 10, 5, 2)) for i in (0, 1, 2, 4, 5, 9, 10, 19, 20, 39, 40, 150)] == \
            [0, 1, 2, 2, 5, 5, 10, 10, 20, 20, 40, 40]
        assert halfwidth_at(299, n, (40, 20, 10, 5, 2)) == 0

    def test_spike_removed(self):
        x = np.ones(50)
        x[25] = 9.0
        np.testing.assert_array_equal(edge_aware_median(x), np.ones(50))

    def test_invalid_skipped(self):
        x = np.array([1.0, 2.0, np.nan, 4.0, 5.0])
        out = edge_aware_median(x, (2,))
        assert out[2] == pytest.approx(np.median([1, 2, 4, 5]))

    def test_idempotent_on_constant(self):
        np.testing.assert_array_equal(edge_aware_median(np.full(30, 2.5)), np.full(30, 2.5))


class TestJumps:
    def test_single_step(self):
        q = np.where(np.arange(300) < 120, 1.0, 0.97)
        res = clean_feature_series(_camp_series(q))
        assert res.jumps == [120]
        assert [(s.start_cycle, s.end_cycle) for s in res.segments] == [(0, 119), (120, 299)]
        assert res.segments[1].initial_capacity == pytest.approx(0.97)

    def test_short_run_dropped(self):
        q = np.ones(300)
        q[100:] = 0.97
        q[130:] = 0.94
        res = clean_feature_series(_camp_series(q))
        assert res.jumps == [100, 130]
        assert [len(s) for s in res.segments] == [100, 170]

    def test_below_threshold_no_jump(self):
        q = np.where(np.arange(200) < 100, 1.0, 0.995)
        assert clean_feature_series(_camp_series(q)).jumps == []

    def test_efficiency_normalized_by_100(self):
        z = normalize_for_jumps(np.array([[1.0, 3.6, 99.0, 95.0, 0.05]] * 2), CAMP)
        np.testing.assert_allclose(z[0], [1, 1, 0.99, 0.95, 1])

    def test_resistance_threshold(self):
        r = np.where(np.arange(200) < 100, 0.05, 0.0515)  # +3 %
        assert clean_feature_series(_camp_series(np.ones(200), r)).jumps == [100]

    def test_never_position_zero(self):
        assert detect_jumps(np.array([[0.0] * 5, [1.0] * 5]), CAMP) == [1]
        assert detect_jumps(np.ones((1, 5)), CAMP) == []

    @given(st.lists(st.floats(0.5, 1.5), min_size=2, max_size=80))
    def test_jumps_exactly_where_threshold_exceeded(self, qs):
        q = np.array(qs)
        v = np.column_stack([q, q, np.full(len(q), 99.0), np.full(len(q), 99.0), np.full(len(q), 0.05)])
        z = normalize_for_jumps(v, CAMP)
        expect = [i for i in range(1, len(q)) if abs(z[i, 0] - z[i - 1, 0]) > 0.01]
        assert detect_jumps(v, CAMP) == expect


class TestSegments:
    def test_mape_rejection(self, rng):
        n = 120
        q = 1.0 + rng.normal(0, 0.03, n)  # noisy, filtered differs by > 1 %
        raw = np.column_stack([q, q, np.full(n, 99.0), np.full(n, 99.0), np.full(n, 0.05)])
        filt = np.column_stack([edge_aware_median(raw[:, j]) for j in range(5)])
        assert segment_mape(raw, filt, CAMP)["capacity_energy_efficiency"] > 1.0
        assert extract_segments(raw, filt, [], CAMP_PRESET, CAMP) == []
        loose = CleanseConfig(segment_mape_limits={"capacity_energy_efficiency": 10.0, "resistance": 2.0})
        assert len(extract_segments(raw, filt, [], loose, CAMP)) == 1

    def test_mape_value(self):
        raw = np.array([[1.0, 2.0, 100.0, 100.0, 1.0]] * 2)
        filt = raw * np.array([1.02, 1.0, 1.0, 1.0, 1.1])
        m = segment_mape(raw, filt, CAMP)
        assert m["capacity_energy_efficiency"] == pytest.approx(2.0 / 4)
        assert m["resistance"] == pytest.approx(10.0)

    def test_min_length(self):
        q = np.ones(49)
        assert clean_feature_series(_camp_series(q)).segments == []
        assert len(clean_feature_series(_camp_series(np.ones(50))).segments) == 1

    def test_presets(self):
        assert FAST_CHARGE_PRESET.jump_thresholds == {"capacity_energy": 0.02, "efficiency": 0.014,
                                                      "resistance": 0.04}
        assert FAST_CHARGE_PRESET.segment_mape_limits["resistance"] == 4.0
        assert CleanseConfig.from_dict({"preset": "camp", "min_segment_cycles": 10}).min_segment_cycles == 10

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            CleanseConfig(kernel_halfwidths=(2, 5))
        with pytest.raises(ConfigError):
            CleanseConfig(jump_thresholds={"capacity_energy": 0.01})

    def test_persistence(self, tmp_path):
        q = np.where(np.arange(300) < 120, 1.0, 0.97)
        segs = clean_feature_series(_camp_series(q)).segments
        write_segments(segs, tmp_path)
        back = read_segments(tmp_path)
        assert len(back) == 2
        for a, b in zip(segs, back):
            np.testing.assert_array_equal(a.filtered_values, b.filtered_values)
            np.testing.assert_array_equal(a.raw_values, b.raw_values)
            np.testing.assert_array_equal(a.cycle_indices, b.cycle_indices)
            assert a.to_record() == b.to_record()
