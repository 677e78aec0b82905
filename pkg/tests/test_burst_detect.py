from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from burstcast.burst_detect import (
    BurstConfig,
    burst_distance,
    causal_burst_distance,
    contrast_scores,
    label_bursts,
    log_distance,
)
from burstcast.series_core import SeriesError
from burstcast.traffic_gen import GenConfig, superpose


def direct_scores(x, k):
    """O(Nk) loop over the contrast-score definition."""
    n = len(x)
    out = []
    for j in range(k, n - k):
        neighbours = sum(x[j - r] for r in range(1, k + 1)) + sum(x[j + r] for r in range(1, k + 1))
        out.append(x[j] - neighbours / (2 * k))
    return np.array(out)


def direct_flags(x, k, h):
    x = [float(v) for v in x]
    a = direct_scores(x, k)
    pos = [s for s in a if s > 0]
    flags = np.zeros(len(x), dtype=np.int8)
    if not pos:
        return flags
    mu_p = math.fsum(pos) / len(pos)
    sd_p = math.sqrt(math.fsum((s - mu_p) ** 2 for s in pos) / len(pos))
    mu_x = math.fsum(x) / len(x)
    sd_x = math.sqrt(math.fsum((v - mu_x) ** 2 for v in x) / len(x))
    for i, s in enumerate(a):
        j = i + k
        if s > 0 and s - mu_p > h * sd_p and x[j] - mu_x > h * sd_x:
            flags[j] = 1
    return flags


class TestContrastScores:
    def test_constant_series(self):
        np.testing.assert_array_equal(contrast_scores(np.full(20, 3.0), 4), 0.0)

    def test_hand_case(self):
        a = contrast_scores([0, 0, 0, 1, 0, 0, 0], 1)
        assert a[3 - 1] == 1.0

    def test_matches_direct_evaluation(self):
        x = np.random.default_rng(0).normal(size=2000)
        np.testing.assert_allclose(contrast_scores(x, 128), direct_scores(list(x), 128), atol=1e-9, rtol=0)

    def test_too_short(self):
        with pytest.raises(SeriesError):
            contrast_scores(np.zeros(8), 4)

    @given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, seed, c):
        x = np.random.default_rng(seed).normal(size=300)
        np.testing.assert_allclose(contrast_scores(x + c, 7), contrast_scores(x, 7), atol=1e-9)


class TestLabelBursts:
    def test_constant_series_has_no_bursts(self):
        lab = label_bursts(np.full(50, 2.0), BurstConfig(k=4))
        assert lab.flags.sum() == 0

    def test_planted_spike(self):
        unique = 0
        for seed in range(100):
            x = np.random.default_rng(seed).standard_normal(400)
            x[200] = x.mean() + 10 * x.std()
            lab = label_bursts(x, BurstConfig(k=8, h=2.5))
            np.testing.assert_array_equal(lab.flags, direct_flags(x, 8, 2.5))
            assert lab.flags[200] == 1
            unique += int(lab.flags.sum() == 1)
        # The spike is always caught, but it is the only flag in just ~70% of
        # series: with sigma_X inflated to ~1.12 the 2.5-sigma value gate still
        # admits ~1 ordinary sample per 400, and some of those clear the score
        # gate too.  65/100 is the direct evaluation's count (0.709 over 1000 seeds).
        assert unique == 65

    @given(
        st.integers(0, 2**32 - 1),
        st.integers(60, 600),
        st.sampled_from([1, 4, 16]),
        st.sampled_from([1.0, 1.5, 2.5]),
    )
    def test_matches_brute_force(self, seed, n, k, h):
        rng = np.random.default_rng(seed)
        x = rng.pareto(1.5, n) + rng.normal(size=n).cumsum() * 0.05
        lab = label_bursts(x, BurstConfig(k, h))
        np.testing.assert_array_equal(lab.flags, direct_flags(x, k, h))

    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0, 8.0]), st.sampled_from([-16.0, 0.0, 64.0]))
    def test_affine_invariance(self, seed, lam, c):
        x = np.random.default_rng(seed).pareto(1.3, 400)
        base = label_bursts(x, BurstConfig(8, 2.0)).flags
        np.testing.assert_array_equal(label_bursts(lam * x + c, BurstConfig(8, 2.0)).flags, base)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 20))
    def test_flags_inside_scored_range(self, seed, k):
        x = np.random.default_rng(seed).pareto(1.2, 200)
        lab = label_bursts(x, BurstConfig(k, 1.0))
        idx = np.flatnonzero(lab.flags)
        assert np.all((idx >= k) & (idx < 200 - k))
        assert np.all(np.isnan(lab.scores[:k])) and np.all(np.isnan(lab.scores[200 - k :]))

    def test_invariant_against_reported_stats(self):
        x = np.random.default_rng(3).pareto(1.5, 1000)
        cfg = BurstConfig(16, 2.0)
        lab = label_bursts(x, cfg)
        st_ = lab.stats
        a = lab.scores
        expect = np.zeros(1000, dtype=np.int8)
        inner = slice(16, 1000 - 16)
        expect[inner] = (
            (a[inner] > 0)
            & (a[inner] - st_["mu_P"] > cfg.h * st_["sigma_P"])
            & (x[inner] - st_["mu_X"] > cfg.h * st_["sigma_X"])
        )
        np.testing.assert_array_equal(lab.flags, expect)
        pos = a[inner][a[inner] > 0]
        assert st_["mu_P"] == pytest.approx(pos.mean())
        assert st_["sigma_P"] == pytest.approx(pos.std())

    def test_generator_burst_fraction(self):
        lab = label_bursts(superpose(GenConfig(seed=0)), BurstConfig())
        assert 0.0 < lab.burst_fraction < 0.05

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BurstConfig(k=0)
        with pytest.raises(ValueError):
            BurstConfig(h=0.0)


class TestDistance:
    def test_definition(self):
        np.testing.assert_array_equal(burst_distance([1, 0, 0, 1, 0]), [0, 1, 2, 0, 1])

    def test_virtual_burst(self):
        np.testing.assert_array_equal(burst_distance([0, 0, 1]), [1, 2, 0])

    def test_clamping(self):
        np.testing.assert_array_equal(burst_distance([0] * 6, cap=4), [1, 2, 3, 4, 4, 4])

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=300), st.integers(1, 50))
    def test_recurrence(self, flags, cap):
        d = burst_distance(flags, cap)
        prev = 0
        for t, f in enumerate(flags):
            # unclamped recurrence with the virtual burst at -1
            prev = 0 if f else prev + 1
            assert d[t] == min(prev, cap)
        assert np.all((d == 0) == np.asarray(flags, bool))

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=200), st.integers(1, 10))
    def test_causal_uses_only_matured_flags(self, flags, k):
        d = causal_burst_distance(flags, k, cap=10_000)
        for t in range(len(flags)):
            known = [j for j in range(0, t - k + 1) if flags[j]]
            last = known[-1] if known else -1
            assert d[t] == t - last

    def test_log_distance(self):
        assert log_distance([0])[0] == 0.0
        assert log_distance([1])[0] == pytest.approx(math.log(2))
        assert np.all(np.diff(log_distance(np.arange(0, 10_001))) > 0)
