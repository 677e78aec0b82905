from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import lfilter

from burstcast.selfsim_stats import DEFAULT_BLOCKS, aggregate, autocorrelation, variance_time_hurst
from burstcast.series_core import SeriesError, TimeSeries


def fgn_circulant(n, hurst, rng):
    """Exact fractional Gaussian noise by circulant embedding of its autocovariance.

    gamma(k) = (|k-1|^{2H} - 2|k|^{2H} + |k+1|^{2H}) / 2, unit variance.
    """
    k = np.arange(n + 1)
    gamma = 0.5 * (np.abs(k - 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + (k + 1) ** (2 * hurst))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    eig = np.fft.fft(row).real
    assert eig.min() > -1e-9, "embedding not non-negative definite"
    m = row.size
    z = rng.normal(size=m) + 1j * rng.normal(size=m)
    return np.fft.fft(np.sqrt(np.clip(eig, 0, None) / m) * z).real[:n]


class TestAggregate:
    def test_hand_case(self):
        np.testing.assert_array_equal(aggregate(np.array([1.0, 2.0, 3.0, 4.0]), 2), [1.5, 3.5])

    def test_identity(self):
        x = np.random.default_rng(0).normal(size=17)
        np.testing.assert_array_equal(aggregate(x, 1), x)

    def test_scales_tick(self):
        out = aggregate(TimeSeries(np.arange(10.0), tick_ms=10), 3)
        assert out.tick_ms == 30
        assert len(out) == 3

    def test_block_too_large(self):
        with pytest.raises(SeriesError):
            aggregate(np.zeros(3), 4)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 400), st.integers(1, 9), st.integers(1, 9))
    def test_mean_and_composition(self, seed, n, m, k):
        x = np.random.default_rng(seed).normal(size=n)
        if m > n:
            return
        agg = aggregate(x, m)
        assert agg.mean() == pytest.approx(x[: m * (n // m)].mean(), abs=1e-12)
        if m * k <= n:
            two = aggregate(agg, k) if k <= len(agg) else None
            once = aggregate(x, m * k)
            np.testing.assert_allclose(two[: len(once)], once, atol=1e-12)


class TestVarianceTimeHurst:
    def test_white_noise(self):
        x = np.random.default_rng(0).normal(size=100_000)
        est = variance_time_hurst(x)
        assert 0.45 <= est.H <= 0.55
        assert est.H == pytest.approx(1 - est.beta / 2)

    @pytest.mark.parametrize("seed", range(4))
    def test_fgn_oracle(self, seed):
        x = fgn_circulant(65_536, 0.8, np.random.default_rng(seed))
        assert abs(variance_time_hurst(x).H - 0.8) <= 0.07

    def test_fgn_oracle_marginal_variance(self):
        x = fgn_circulant(65_536, 0.8, np.random.default_rng(9))
        assert x.var() == pytest.approx(1.0, abs=0.1)

    def test_blocks_recorded(self):
        est = variance_time_hurst(np.random.default_rng(1).normal(size=6000))
        assert est.block_sizes == DEFAULT_BLOCKS
        assert len(est.variances) == len(DEFAULT_BLOCKS)
        assert est.slope_stderr >= 0

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0), st.floats(-1e3, 1e3))
    def test_affine_invariance(self, seed, scale, shift):
        x = np.random.default_rng(seed).normal(size=2048).cumsum()
        blocks = (1, 2, 4, 8, 16, 32)
        a = variance_time_hurst(x, blocks).H
        b = variance_time_hurst(scale * x + shift, blocks).H
        assert b == pytest.approx(a, abs=1e-8)

    def test_errors(self):
        with pytest.raises(SeriesError):
            variance_time_hurst(np.zeros(100) + np.arange(100), (1, 2))
        with pytest.raises(SeriesError):
            variance_time_hurst(np.random.default_rng(0).normal(size=1000), (1, 2, 512))
        with pytest.raises(SeriesError):
            variance_time_hurst(np.random.default_rng(0).normal(size=1000), (1, 4, 2))


class TestAutocorrelation:
    def test_lag_zero(self):
        x = np.random.default_rng(0).normal(size=500)
        assert autocorrelation(x, 10)[0] == pytest.approx(1.0)

    def test_white_noise_bound(self):
        x = np.random.default_rng(0).normal(size=100_000)
        assert np.max(np.abs(autocorrelation(x, 50)[1:])) < 0.02

    def test_ar1_closed_form(self):
        e = np.random.default_rng(0).normal(size=100_000)
        x = lfilter([1.0], [1.0, -0.5], e)
        r = autocorrelation(x, 5)
        np.testing.assert_allclose(r, 0.5 ** np.arange(6), atol=0.02)

    def test_fft_path_matches_direct(self):
        x = np.random.default_rng(2).normal(size=10_000)
        d = x - x.mean()
        direct = np.array([d[: len(d) - k] @ d[k:] for k in range(101)]) / (d @ d)
        np.testing.assert_allclose(autocorrelation(x, 100), direct, atol=1e-12)

    def test_lag_bound(self):
        with pytest.raises(SeriesError):
            autocorrelation(np.arange(10.0), 5)
