import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tevae.preprocess import (
    STD_FLOOR, NormStats, RawChannel, Sequence, apply_norm, estimate_window_size, fit_norm,
    invert_norm, resample_channel, significant_lag, window_sequence,
)


def _seq(values, sid="s"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return Sequence(values, 2.0, [f"c{j}" for j in range(values.shape[1])], sid)


def _ar1(phi, n, rng, burn=500):
    e = rng.standard_normal(n + burn)
    x = np.zeros_like(e)
    for t in range(1, e.size):
        x[t] = phi * x[t - 1] + e[t]
    return x[burn:]


class TestResample:
    @pytest.mark.parametrize("rate", [0.5, 1.0, 2.0, 10.0, 100.0])
    def test_constant_is_fixed_point(self, rate):
        t = np.arange(0, 60, 1 / rate)
        out = resample_channel(RawChannel("c", t, np.full(t.size, 3.25), rate), 2.0)
        assert np.all(out == 3.25)

    def test_ramp_interpolation(self):
        out = resample_channel(RawChannel("c", [0.0, 1.0, 2.0], [0.0, 1.0, 2.0], 1.0), 2.0)
        np.testing.assert_allclose(out, [0, 0.5, 1, 1.5, 2])

    def test_low_pass_keeps_slow_component(self):
        t = np.arange(0, 120, 1 / 20)
        slow = np.sin(2 * np.pi * 0.2 * t)
        fast = np.cos(2 * np.pi * 5 * t + 0.3)
        out = resample_channel(RawChannel("c", t, slow + fast, 20.0), 2.0)
        reference = np.sin(2 * np.pi * 0.2 * (np.arange(out.size) / 2.0))
        assert np.corrcoef(out, reference)[0, 1] > 0.99
        # plain decimation would alias the 5 Hz tone onto the grid
        aliased = (slow + fast)[::10][: out.size]
        assert np.corrcoef(aliased, reference)[0, 1] < np.corrcoef(out, reference)[0, 1]

    def test_insufficient_samples(self):
        with pytest.raises(ValueError, match="insufficient samples"):
            resample_channel(RawChannel("c", [0.0], [1.0], 1.0), 2.0)

    def test_raw_channel_validation(self):
        with pytest.raises(ValueError):
            RawChannel("c", [0.0, 0.0], [1.0, 2.0], 1.0)
        with pytest.raises(ValueError):
            RawChannel("c", [0.0, 1.0], [1.0, np.nan], 1.0)
        with pytest.raises(ValueError):
            RawChannel("c", [0.0, 1.0], [1.0, 2.0], 0.0)


class TestNorm:
    def test_zeros_get_std_floor(self):
        stats = fit_norm([_seq(np.zeros(10))])
        assert stats.mean[0] == 0.0
        assert stats.std[0] == STD_FLOOR

    def test_two_point_population_std(self):
        stats = fit_norm([_seq([1.0, 3.0])])
        assert stats.mean[0] == 2.0
        assert stats.std[0] == 1.0

    def test_pooled_stats_after_transform(self):
        rng = np.random.default_rng(3)
        seqs = [_seq(rng.normal(5, 3, size=(n, 4)) * [1, 2, 3, 4]) for n in (50, 80, 120)]
        stats = fit_norm(seqs)
        pooled = np.concatenate([apply_norm(s, stats).values for s in seqs])
        assert np.all(np.abs(pooled.mean(axis=0)) < 1e-9)
        assert np.all(np.abs(pooled.std(axis=0) - 1) < 1e-9)

    def test_identity_and_round_trip(self):
        rng = np.random.default_rng(0)
        s = _seq(rng.normal(size=(30, 3)))
        ident = NormStats(np.zeros(3), np.ones(3))
        np.testing.assert_array_equal(apply_norm(s, ident).values, s.values)
        stats = NormStats(np.array([1.0, -2.0, 0.5]), np.array([2.0, 0.1, 7.0]))
        back = invert_norm(apply_norm(s, stats), stats)
        np.testing.assert_allclose(back.values, s.values, atol=1e-12, rtol=0)

    def test_hand_computed_fixture(self):
        s = _seq([[1.0, 10.0], [2.0, 20.0], [4.0, 60.0]])
        stats = NormStats(np.array([2.0, 30.0]), np.array([0.5, 20.0]))
        expected = [[-2.0, -1.0], [0.0, -0.5], [4.0, 1.5]]
        np.testing.assert_allclose(apply_norm(s, stats).values, expected)

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_norm([])
        with pytest.raises(ValueError, match="mismatch"):
            apply_norm(_seq(np.zeros((3, 2))), NormStats(np.zeros(3), np.ones(3)))

    def test_stats_serialise(self):
        stats = NormStats(np.array([0.1, 2.0]), np.array([1.5, 3.0]))
        again = NormStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(again.mean, stats.mean)
        np.testing.assert_array_equal(again.std, stats.std)


class TestWindowSize:
    def test_white_noise_gives_minimum(self):
        rng = np.random.default_rng(1)
        seqs = [_seq(rng.standard_normal((2048, 3))) for _ in range(2)]
        # a lag-1 value inside the band for every channel means no significant lag at all
        lags = [significant_lag(s.values[:, j], 256) for s in seqs for j in range(3)]
        assert max(lags) <= 3
        assert estimate_window_size(seqs, max_lag=256, min_window=16) == 16

    def test_insignificant_lag_one_returns_minimum(self):
        alternating = _seq(np.tile([1.0, -1.0], 600))
        assert estimate_window_size([alternating], max_lag=100, min_window=32) == 32

    def test_ar1_matches_closed_form(self):
        n, phi = 4096, 0.9
        closed_form = np.log(1.96 / np.sqrt(n)) / np.log(phi)  # lag where phi**k meets the band
        rng = np.random.default_rng(7)
        lags = [significant_lag(_ar1(phi, n, rng), 1024) for _ in range(25)]
        median = float(np.median(lags))
        assert abs(median - closed_form) <= 0.2 * closed_form
        w = estimate_window_size([_seq(_ar1(phi, n, np.random.default_rng(11)))], max_lag=1024)
        lag = significant_lag(_ar1(phi, n, np.random.default_rng(11)), 1024)
        assert w == 1 << lag.bit_length()
        assert w > lag and w // 2 <= lag

    def test_adding_a_channel_never_decreases(self):
        rng = np.random.default_rng(2)
        base = rng.standard_normal((1500, 2))
        slow = _ar1(0.97, 1500, rng)[:, None]
        w1 = estimate_window_size([_seq(base)], max_lag=500)
        w2 = estimate_window_size([_seq(np.hstack([base, slow]))], max_lag=500)
        assert w2 >= w1

    def test_requires_long_sequences(self):
        with pytest.raises(ValueError):
            estimate_window_size([_seq(np.zeros(10))], max_lag=20)


class TestWindowing:
    def test_single_window(self):
        ws = window_sequence(_seq(np.arange(8.0)), 8, 4)
        assert len(ws) == 1

    def test_half_overlap_count(self):
        w = 16
        ws = window_sequence(_seq(np.arange(2.0 * w)), w, w // 2)
        assert len(ws) == 3

    def test_too_short(self):
        with pytest.raises(ValueError, match="shorter than window"):
            window_sequence(_seq(np.arange(5.0)), 8, 1)

    @settings(max_examples=60, deadline=None)
    @given(T=st.integers(1, 200), w=st.integers(1, 50), shift=st.integers(1, 30), d=st.integers(1, 3))
    def test_windows_are_direct_slices(self, T, w, shift, d):
        if T < w:
            return
        values = np.random.default_rng(T * 1000 + w).normal(size=(T, d))
        ws = window_sequence(_seq(values), w, shift)
        assert len(ws) == (T - w) // shift + 1
        np.testing.assert_array_equal(ws.starts, np.arange(len(ws)) * shift)
        for k in range(len(ws)):
            np.testing.assert_array_equal(ws.windows[k], values[k * shift:k * shift + w])
