"""Bursty demand synthesis from superposed ON/OFF sources.

Each terminal alternates between ON and OFF periods whose lengths follow a
Pareto law with shape in (1, 2).  While ON it contributes its rate to the
cell demand; the per-tick sum over all terminals is the output series.
Heavy-tailed sojourns make the aggregate long-range dependent with
Hurst parameter ``(3 - min shape) / 2``.

Random streams
--------------
Source ``m`` draws from ``Generator(Philox(SeedSequence(seed, spawn_key=(m,))))``.
The Philox counter-based generator keyed by ``(seed, m)`` means any subset of
sources can be generated independently (or in parallel) without changing the
result.  Within a source the stream is consumed as: rate draw, then sojourn
uniforms, then (optionally) per-tick rate draws.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .series_core import TimeSeries, save_series

__all__ = [
    "SourceConfig",
    "GenConfig",
    "hurst_from_shape",
    "pareto_mean",
    "sample_pareto",
    "source_stream",
    "gen_onoff_source",
    "superpose",
    "generate_dataset",
]


@dataclass(frozen=True)
class SourceConfig:
    """ON/OFF terminal parameters.

    The default shape 1.04 gives H = 0.98.  A tabulated "shape 0.98" that
    sometimes accompanies this setup is the Hurst value, not a valid shape:
    a shape <= 1 has no finite mean sojourn.
    """

    shape_on: float = 1.04
    shape_off: float = 1.04
    scale_on: float = 1.0
    scale_off: float = 1.0
    rate_mean_mbps: float = 1.0
    rate_sd_mbps: float = 0.05

    def __post_init__(self):
        for name in ("shape_on", "shape_off"):
            a = getattr(self, name)
            if not 1.0 < a < 2.0:
                raise ValueError(f"{name}={a} outside the heavy-tail range (1, 2)")
        for name in ("scale_on", "scale_off", "rate_mean_mbps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rate_sd_mbps < 0:
            raise ValueError("rate_sd_mbps must be non-negative")


@dataclass(frozen=True)
class GenConfig:
    num_sources: int = 750
    num_ticks: int = 60_000
    tick_ms: int = 10
    seed: int = 0
    source: SourceConfig = field(default_factory=SourceConfig)
    per_tick_rates: bool = False

    def __post_init__(self):
        if self.num_sources < 1:
            raise ValueError("num_sources must be >= 1")
        if self.num_ticks < 1:
            raise ValueError("num_ticks must be >= 1")
        if self.tick_ms < 1:
            raise ValueError("tick_ms must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> GenConfig:
        return replace(self, **kw)


def hurst_from_shape(shape: float) -> float:
    return (3.0 - shape) / 2.0


def pareto_mean(shape: float, scale: float) -> float:
    return shape * scale / (shape - 1.0)


def sample_pareto(shape, scale, u):
    """Inverse-CDF Pareto draw ``scale * (1 - u) ** (-1 / shape)``; vectorizes over ``u``."""
    return scale * np.power(1.0 - np.asarray(u, dtype=np.float64), -1.0 / shape)


def source_stream(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def gen_onoff_source(cfg: SourceConfig, num_ticks: int, rng: np.random.Generator) -> np.ndarray:
    """Binary activity vector of one ON/OFF terminal over ``num_ticks`` ticks."""
    if num_ticks < 1:
        raise ValueError("num_ticks must be >= 1")
    mu_on = pareto_mean(cfg.shape_on, cfg.scale_on)
    mu_off = pareto_mean(cfg.shape_off, cfg.scale_off)
    phase = 1 if rng.random() < mu_on / (mu_on + mu_off) else 0

    chunk = 2 * math.ceil(num_ticks / (mu_on + mu_off)) + 16
    pieces = []
    filled = 0
    while filled < num_ticks:
        u = rng.random(chunk)
        phases = (phase + np.arange(chunk)) % 2
        shapes = np.where(phases == 1, cfg.shape_on, cfg.shape_off)
        scales = np.where(phases == 1, cfg.scale_on, cfg.scale_off)
        raw = scales * np.power(1.0 - u, -1.0 / shapes)
        # sojourns beyond the horizon are clipped before the integer cast
        dur = np.ceil(np.minimum(raw, float(num_ticks))).astype(np.int64)
        np.maximum(dur, 1, out=dur)
        ends = filled + np.cumsum(dur)
        stop = int(np.searchsorted(ends, num_ticks, side="left"))
        if stop < chunk:
            dur = dur[: stop + 1]
            dur[-1] -= ends[stop] - num_ticks
            phases = phases[: stop + 1]
        pieces.append(np.repeat(phases.astype(np.int8), dur))
        filled += int(dur.sum())
        phase = (phase + chunk) % 2
    return np.concatenate(pieces)[:num_ticks]


def _draw_rate(cfg: SourceConfig, rng: np.random.Generator, size=None):
    return np.maximum(rng.normal(cfg.rate_mean_mbps, cfg.rate_sd_mbps, size=size), 0.0)


def superpose(cfg: GenConfig, activity_override=None, rates_override=None) -> TimeSeries:
    """Per-tick total demand ``sum_m activity_m(t) * rate_m``.

    ``activity_override`` / ``rates_override`` replace the sampled activity
    matrix (M x N) or static rates (M,); used to pin down the arithmetic.
    """
    n, m_total = cfg.num_ticks, cfg.num_sources
    total = np.zeros(n, dtype=np.float64)
    for m in range(m_total):
        rng = source_stream(cfg.seed, m)
        rate = float(_draw_rate(cfg.source, rng))
        if rates_override is not None:
            rate = float(rates_override[m])
        if activity_override is not None:
            act = np.asarray(activity_override[m], dtype=np.float64)
        else:
            act = gen_onoff_source(cfg.source, n, rng)
        if cfg.per_tick_rates:
            total += act * _draw_rate(cfg.source, rng, size=n)
        else:
            total += act * rate
    return TimeSeries(total, cfg.tick_ms)


def generate_dataset(cfg: GenConfig, out) -> TimeSeries:
    series = superpose(cfg)
    save_series(series, out)
    return series
