"""Second-order self-similarity diagnostics: aggregated variance and ACF."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .series_core import SeriesError, TimeSeries

__all__ = [
    "HurstEstimate",
    "DEFAULT_BLOCKS",
    "aggregate",
    "variance_time_hurst",
    "autocorrelation",
]

DEFAULT_BLOCKS = tuple(2**i for i in range(10))  # 1..512


@dataclass(frozen=True)
class HurstEstimate:
    H: float
    beta: float
    slope_stderr: float
    block_sizes: tuple[int, ...]
    variances: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "hurst": self.H,
            "beta": self.beta,
            "stderr": self.slope_stderr,
            "blocks": list(self.block_sizes),
            "variances": list(self.variances),
        }


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, TimeSeries) else np.asarray(x, dtype=np.float64)


def aggregate(x, m: int):
    """Means over non-overlapping blocks of size ``m``; the tail remainder is dropped.

    Accepts a TimeSeries (returns one with ``tick_ms`` scaled by m) or an array.
    """
    v = _values(x)
    if m < 1:
        raise SeriesError(f"block size must be >= 1, got {m}")
    if m > v.shape[0]:
        raise SeriesError(f"block size {m} exceeds series length {v.shape[0]}")
    nb = v.shape[0] // m
    out = v[: nb * m].reshape(nb, m).mean(axis=1)
    if isinstance(x, TimeSeries):
        return TimeSeries(out, x.tick_ms * m, x.origin_tick)
    return out


def variance_time_hurst(x, block_sizes=DEFAULT_BLOCKS) -> HurstEstimate:
    """Aggregated-variance Hurst estimate.

    Fits ``log var(X^(m)) = c - beta * log m`` by ordinary least squares over
    ``block_sizes`` and reports ``H = 1 - beta / 2``.
    """
    v = _values(x)
    blocks = tuple(int(b) for b in block_sizes)
    if len(blocks) < 3:
        raise SeriesError("need at least 3 block sizes")
    if any(b < 1 for b in blocks) or any(b2 <= b1 for b1, b2 in zip(blocks, blocks[1:])):
        raise SeriesError("block sizes must be strictly increasing and >= 1")
    if v.shape[0] // blocks[-1] < 10:
        raise SeriesError(
            f"insufficient data: block {blocks[-1]} leaves {v.shape[0] // blocks[-1]} "
            "aggregated points, need >= 10"
        )
    variances = np.array([np.var(aggregate(v, m)) for m in blocks])
    if np.any(variances <= 0):
        raise SeriesError("degenerate series: zero aggregated variance")
    lx = np.log(np.asarray(blocks, dtype=np.float64))
    ly = np.log(variances)
    design = np.column_stack([np.ones_like(lx), lx])
    coef, res, _, _ = np.linalg.lstsq(design, ly, rcond=None)
    slope = float(coef[1])
    dof = len(blocks) - 2
    resid = ly - design @ coef
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    stderr = float(np.sqrt(np.sum(resid**2) / dof / sxx)) if dof > 0 else float("nan")
    beta = -slope
    return HurstEstimate(1.0 - beta / 2.0, beta, stderr, blocks, tuple(float(s) for s in variances))


def autocorrelation(x, max_lag: int) -> np.ndarray:
    """Biased (1/N) sample autocorrelation for lags ``0..max_lag``."""
    v = _values(x)
    n = v.shape[0]
    if max_lag < 0 or max_lag >= n / 2:
        raise SeriesError(f"max_lag {max_lag} must satisfy 0 <= max_lag < N/2 = {n / 2}")
    d = v - v.mean()
    c0 = float(d @ d) / n
    if c0 == 0:
        raise SeriesError("degenerate series: zero variance")
    if n > 4096 and max_lag > 64:
        nfft = 1 << int(np.ceil(np.log2(2 * n)))
        f = np.fft.rfft(d, nfft)
        acov = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1] / n
    else:
        acov = np.array([d[: n - k] @ d[k:] for k in range(max_lag + 1)]) / n
    return acov / c0
