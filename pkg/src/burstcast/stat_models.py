"""AR(I) and FARIMA baselines fitted by Yule-Walker moments.

The FARIMA model fractionally differences the series with the truncated
binomial filter ``pi_0 = 1, pi_j = pi_{j-1} (j - 1 - d) / j`` and fits an AR(p)
to the result.  Forecasts run the AR recursion on the differenced scale and
invert the filter exactly using the known history.

Histories are treated as starting at time 0: the filter uses
``min(t, trunc)`` lags at time ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.signal import fftconvolve, lfilter

from .selfsim_stats import DEFAULT_BLOCKS, variance_time_hurst
from .series_core import SeriesError, TimeSeries

__all__ = [
    "ModelFitError",
    "ArModel",
    "FarimaModel",
    "fit_ar_yule_walker",
    "forecast_ar",
    "frac_diff_weights",
    "frac_diff",
    "frac_integrate",
    "fit_farima",
    "forecast_farima",
    "rolling_forecast_ar",
    "rolling_forecast_farima",
]

DEFAULT_TRUNC = 1000


class ModelFitError(ValueError):
    pass


@dataclass(frozen=True)
class ArModel:
    phi: np.ndarray
    intercept_mean: float
    noise_var: float
    d_int: int = 0

    @property
    def p(self) -> int:
        return len(self.phi)


@dataclass(frozen=True)
class FarimaModel:
    phi: np.ndarray
    d_frac: float
    trunc_lags: int
    pi_coeffs: np.ndarray
    intercept_mean: float
    noise_var: float = 0.0

    @property
    def p(self) -> int:
        return len(self.phi)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, TimeSeries) else np.asarray(x, dtype=np.float64)


def _companion_radius(phi: np.ndarray) -> float:
    p = len(phi)
    if p == 0:
        return 0.0
    comp = np.zeros((p, p))
    comp[0] = phi
    comp[1:, :-1] = np.eye(p - 1)
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def _yule_walker(v: np.ndarray, p: int):
    n = v.shape[0]
    mu = float(v.mean())
    z = v - mu
    acov = np.array([z[: n - k] @ z[k:] for k in range(p + 1)]) / n
    if acov[0] <= 0:
        raise ModelFitError("singular autocorrelation matrix: zero variance")
    r = acov / acov[0]
    if p == 0:
        return np.zeros(0), mu, float(acov[0])
    toe = np.array([[r[abs(i - j)] for j in range(p)] for i in range(p)])
    if np.linalg.cond(toe) > 1e12:
        raise ModelFitError("singular autocorrelation matrix")
    phi = solve_toeplitz(r[:p], r[1 : p + 1])
    noise_var = float(acov[0] * (1.0 - phi @ r[1 : p + 1]))
    return phi, mu, noise_var


def fit_ar_yule_walker(x, p: int, d_int: int = 0) -> ArModel:
    """Fit AR(p) by the Yule-Walker equations after ``d_int`` integer differences."""
    v = _values(x)
    if p < 0 or d_int < 0:
        raise ValueError("p and d_int must be non-negative")
    for _ in range(d_int):
        v = np.diff(v)
    if v.shape[0] < max(50 * p, 2):
        raise ModelFitError(f"need at least {max(50 * p, 2)} samples after differencing, got {v.shape[0]}")
    phi, mu, noise_var = _yule_walker(v, p)
    radius = _companion_radius(phi)
    if radius >= 1.0:
        raise ModelFitError(f"non-stationary AR solution (companion spectral radius {radius:.6f})")
    return ArModel(phi, mu, max(noise_var, 0.0), d_int)


def _difference_levels(h: np.ndarray, d: int) -> list[np.ndarray]:
    levels = [h]
    for _ in range(d):
        levels.append(np.diff(levels[-1]))
    return levels


def forecast_ar(model: ArModel, history, horizon: int) -> np.ndarray:
    h = np.asarray(history, dtype=np.float64)
    levels = _difference_levels(h, model.d_int)
    w = levels[-1]
    p = model.p
    if w.shape[0] < max(p, 1):
        raise ModelFitError(f"insufficient history: need {max(p, 1) + model.d_int} values, got {h.shape[0]}")
    z = list(w[w.shape[0] - p :] - model.intercept_mean) if p else []
    out = np.empty(horizon)
    for s in range(horizon):
        nxt = sum(model.phi[j] * z[-1 - j] for j in range(p)) if p else 0.0
        z.append(nxt)
        out[s] = nxt
    f = out + model.intercept_mean
    for lev in reversed(range(model.d_int)):
        f = levels[lev][-1] + np.cumsum(f)
    return f


def frac_diff_weights(d: float, trunc: int) -> np.ndarray:
    """Binomial weights ``pi_0..pi_trunc`` of ``(1 - B)^d``."""
    pi = np.empty(trunc + 1)
    pi[0] = 1.0
    for j in range(1, trunc + 1):
        pi[j] = pi[j - 1] * (j - 1 - d) / j
    return pi


def _check_d(d: float):
    if not 0.0 <= d < 0.5:
        raise ValueError(f"fractional order d={d} outside [0, 0.5)")


def frac_diff(x, d: float, trunc: int = DEFAULT_TRUNC) -> np.ndarray:
    _check_d(d)
    v = np.asarray(_values(x), dtype=np.float64)
    return lfilter(frac_diff_weights(d, trunc), [1.0], v)


def frac_integrate(y, d: float, trunc: int = DEFAULT_TRUNC) -> np.ndarray:
    """Exact inverse of :func:`frac_diff` for the same ``d`` and ``trunc``."""
    _check_d(d)
    return lfilter([1.0], frac_diff_weights(d, trunc), np.asarray(y, dtype=np.float64))


def fit_farima(x, p: int, d: float | None = None, trunc: int = DEFAULT_TRUNC, block_sizes=DEFAULT_BLOCKS) -> FarimaModel:
    """Fit FARIMA(p, d, 0).

    When ``d`` is None it is taken from the aggregated-variance Hurst estimate,
    ``d = clip(H - 0.5, 0, 0.49)``, over the block sizes that leave at least
    10 aggregated points.
    """
    v = _values(x)
    if v.shape[0] < 1000:
        raise ModelFitError(f"FARIMA fit needs at least 1000 samples, got {v.shape[0]}")
    if d is None:
        usable = [b for b in block_sizes if v.shape[0] // int(b) >= 10]
        hurst = variance_time_hurst(v, usable).H
        d = float(np.clip(hurst - 0.5, 0.0, 0.49))
    _check_d(d)
    mu = float(v.mean())
    y = frac_diff(v - mu, d, trunc)
    ar = fit_ar_yule_walker(y, p)
    return FarimaModel(ar.phi, float(d), trunc, frac_diff_weights(d, trunc), mu, ar.noise_var)


def forecast_farima(model: FarimaModel, history, horizon: int) -> np.ndarray:
    h = np.asarray(history, dtype=np.float64)
    if h.shape[0] <= model.trunc_lags:
        raise ModelFitError(f"insufficient history: need more than {model.trunc_lags} values, got {h.shape[0]}")
    z = h - model.intercept_mean
    y = lfilter(model.pi_coeffs, [1.0], z)
    p = model.p
    ylag = list(y[y.shape[0] - p :]) if p else []
    pi = model.pi_coeffs
    trunc = model.trunc_lags
    ext = list(z)
    t0 = len(ext)
    out = np.empty(horizon)
    for s in range(horizon):
        yhat = sum(model.phi[j] * ylag[-1 - j] for j in range(p)) if p else 0.0
        ylag.append(yhat)
        t = t0 + s
        m = min(t, trunc)
        past = np.asarray(ext[t - m : t][::-1])
        zhat = yhat - float(pi[1 : m + 1] @ past)
        ext.append(zhat)
        out[s] = zhat
    return out + model.intercept_mean


# ---------------------------------------------------------------------------
# vectorized rolling-origin forecasts; each row equals a per-origin call


def _ar_recursion(phi: np.ndarray, lags: np.ndarray, horizon: int) -> np.ndarray:
    """``lags[:, j]`` holds the value j+1 steps before the origin."""
    n, p = lags.shape
    state = lags.copy()
    out = np.empty((n, horizon))
    for s in range(horizon):
        nxt = state @ phi if p else np.zeros(n)
        out[:, s] = nxt
        if p:
            state = np.concatenate([nxt[:, None], state[:, :-1]], axis=1)
    return out


def rolling_forecast_ar(model: ArModel, x, origins, horizon: int) -> np.ndarray:
    """Forecast ``x[T:T+horizon]`` from ``x[:T]`` for every origin ``T``."""
    v = _values(x)
    origins = np.asarray(origins, dtype=np.int64)
    p, d = model.p, model.d_int
    if origins.size and origins.min() < p + d:
        raise ModelFitError(f"insufficient history: origins must be >= {p + d}")
    levels = _difference_levels(v, d)
    w = levels[-1] - model.intercept_mean
    # level k at origin T ends at index T - 1 - k of its own array
    lags = np.stack([w[origins - 1 - d - j] for j in range(p)], axis=1) if p else np.zeros((len(origins), 0))
    f = _ar_recursion(model.phi, lags, horizon) + model.intercept_mean
    for lev in reversed(range(d)):
        f = levels[lev][origins - 1 - lev][:, None] + np.cumsum(f, axis=1)
    return f


def rolling_forecast_farima(model: FarimaModel, x, origins, horizon: int) -> np.ndarray:
    v = _values(x)
    origins = np.asarray(origins, dtype=np.int64)
    if origins.size and origins.min() <= model.trunc_lags:
        raise ModelFitError(f"insufficient history: origins must exceed {model.trunc_lags}")
    z = v - model.intercept_mean
    pi = model.pi_coeffs
    p = model.p
    y = lfilter(pi, [1.0], z)
    lags = np.stack([y[origins - 1 - j] for j in range(p)], axis=1) if p else np.zeros((len(origins), 0))
    yhat = _ar_recursion(model.phi, lags, horizon)
    zhat = np.empty_like(yhat)
    for s in range(horizon):
        # contribution of observed values: sum_{j > s} pi_j z[T + s - j]
        known = fftconvolve(z, pi[s + 1 :])[: z.shape[0]] if s + 1 < pi.shape[0] else np.zeros_like(z)
        acc = yhat[:, s] - known[origins - 1]
        for j in range(1, min(s, model.trunc_lags) + 1):
            acc = acc - pi[j] * zhat[:, s - j]
        zhat[:, s] = acc
    return zhat + model.intercept_mean
