"""Burst labeling by moving-contrast scores and the distance-since-burst feature.

A sample ``j`` (with ``k <= j < N - k``) has contrast score

    a_j = x_j - (sum of the k samples before j + sum of the k samples after j) / (2k)

Let P be the positive scores.  Index ``i`` is a burst when its score is positive
and both ``a_i - mean(P) > h * sd(P)`` and ``x_i - mean(x) > h * sd(x)``.
All standard deviations are population (1/N) estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .series_core import SeriesError, TimeSeries

__all__ = [
    "BurstConfig",
    "BurstLabels",
    "DEFAULT_DISTANCE_CAP",
    "contrast_scores",
    "label_bursts",
    "burst_distance",
    "causal_burst_distance",
    "log_distance",
]

DEFAULT_DISTANCE_CAP = 10_000


@dataclass(frozen=True)
class BurstConfig:
    k: int = 128
    h: float = 2.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be a positive integer")
        if not self.h > 0:
            raise ValueError("h must be positive")


@dataclass(frozen=True)
class BurstLabels:
    """Per-index flags plus the scores and thresholds that produced them.

    ``scores`` is NaN outside ``[k, N - k)`` where the score is undefined.
    """

    flags: np.ndarray
    scores: np.ndarray
    stats: dict = field(default_factory=dict)
    config: BurstConfig = field(default_factory=BurstConfig)

    @property
    def burst_fraction(self) -> float:
        return float(self.flags.mean()) if self.flags.size else 0.0


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, TimeSeries) else np.asarray(x, dtype=np.float64)


def contrast_scores(x, k: int) -> np.ndarray:
    """Contrast scores ``a_j`` for ``j in [k, N - k)`` via prefix sums (O(N)).

    Returns an array of length ``N - 2k``; element ``i`` is the score of index ``k + i``.
    """
    v = _values(x)
    n = v.shape[0]
    if k < 1:
        raise SeriesError("k must be >= 1")
    if n <= 2 * k:
        raise SeriesError(f"series too short: length {n} needs to exceed 2k = {2 * k}")
    # centring keeps the prefix sums small; the score is shift-invariant
    c = v - v.mean()
    csum = np.concatenate(([0.0], np.cumsum(c)))
    j = np.arange(k, n - k)
    left = csum[j] - csum[j - k]
    right = csum[j + k + 1] - csum[j + 1]
    return c[j] - (left + right) / (2 * k)


def label_bursts(x, cfg: BurstConfig = BurstConfig()) -> BurstLabels:
    v = _values(x)
    n, k, h = v.shape[0], cfg.k, cfg.h
    a = contrast_scores(v, k)
    scores = np.full(n, np.nan)
    scores[k : n - k] = a
    mu_x = float(v.mean())
    sd_x = float(v.std())
    positive = a[a > 0]
    flags = np.zeros(n, dtype=np.int8)
    if positive.size == 0 or sd_x == 0:
        stats = {"mu_X": mu_x, "sigma_X": sd_x, "mu_P": float("nan"), "sigma_P": float("nan")}
        return BurstLabels(flags, scores, stats, cfg)
    mu_p = float(positive.mean())
    sd_p = float(positive.std())
    inner = (a > 0) & (a - mu_p > h * sd_p) & (v[k : n - k] - mu_x > h * sd_x)
    flags[k : n - k] = inner
    stats = {"mu_X": mu_x, "sigma_X": sd_x, "mu_P": mu_p, "sigma_P": sd_p}
    return BurstLabels(flags, scores, stats, cfg)


def burst_distance(flags, cap: int = DEFAULT_DISTANCE_CAP) -> np.ndarray:
    """Ticks since the most recent burst (0 at a burst), clamped at ``cap``.

    A virtual burst sits at index -1, so a series starting burst-free reads 1, 2, ...
    """
    f = np.asarray(flags).astype(bool)
    if f.size == 0:
        raise ValueError("flags must be non-empty")
    if cap < 1:
        raise ValueError("cap must be positive")
    idx = np.arange(f.size)
    last = np.where(f, idx, -1)
    np.maximum.accumulate(last, out=last)
    return np.minimum(idx - last, cap).astype(np.int64)


def causal_burst_distance(flags, k: int, cap: int = DEFAULT_DISTANCE_CAP) -> np.ndarray:
    """Distance feature usable at inference time.

    A flag at index j is only known once its k look-ahead samples exist, so the
    value at t counts from the latest flag with index <= t - k.
    """
    f = np.asarray(flags).astype(bool)
    if f.size == 0:
        raise ValueError("flags must be non-empty")
    n = f.size
    idx = np.arange(n)
    last = np.where(f, idx, -1)
    np.maximum.accumulate(last, out=last)
    known = np.full(n, -1, dtype=np.int64)
    if n > k:
        known[k:] = last[: n - k]
    return np.minimum(idx - known, cap).astype(np.int64)


def log_distance(d) -> np.ndarray:
    return np.log1p(np.asarray(d, dtype=np.float64))
