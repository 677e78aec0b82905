"""Burst-aware forecasting of self-similar satellite traffic demand.

Submodules: :mod:`series_core` (series, windows, I/O), :mod:`traffic_gen`
(ON/OFF generator), :mod:`burst_detect`, :mod:`selfsim_stats`,
:mod:`stat_models` (AR / FARIMA), :mod:`autodiff`, :mod:`informer_burst`
(the model), :mod:`train_eval` and :mod:`cli`.
"""

from __future__ import annotations

from .burst_detect import BurstConfig, BurstLabels, burst_distance, causal_burst_distance, label_bursts
from .informer_burst import BurstInformer, ModelConfig
from .selfsim_stats import variance_time_hurst
from .series_core import TimeSeries, load_series, save_series
from .traffic_gen import GenConfig, superpose
from .train_eval import TrainConfig, evaluate, train

__all__ = [
    "BurstConfig",
    "BurstLabels",
    "BurstInformer",
    "GenConfig",
    "ModelConfig",
    "TimeSeries",
    "TrainConfig",
    "burst_distance",
    "causal_burst_distance",
    "evaluate",
    "label_bursts",
    "load_series",
    "save_series",
    "superpose",
    "train",
    "variance_time_hurst",
]
