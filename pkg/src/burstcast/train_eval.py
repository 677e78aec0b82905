"""Training loop, checkpoints and the evaluation protocol.

Evaluation reports MSE on the normalized scale over stride-1 windows of a
segment (overall), over the windows whose target contains at least one
burst flag (burst), and per horizon index restricted to windows with a burst
at that index (heatmap).  The same scorer handles statistical baselines.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .burst_detect import DEFAULT_DISTANCE_CAP, BurstLabels, burst_distance, causal_burst_distance
from .informer_burst import BurstInformer, ModelConfig, composite_loss
from .series_core import NormStats, SeriesError, TimeSeries, split_bounds, zscore_normalize
from .stat_models import fit_ar_yule_walker, fit_farima, rolling_forecast_ar, rolling_forecast_farima

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "CheckpointError",
    "Checkpoint",
    "TrainResult",
    "EvalReport",
    "PreparedData",
    "ABLATION_ROWS",
    "DESK_TRAIN",
    "PAPER_TRAIN",
    "prepare_data",
    "segment_starts",
    "window_arrays",
    "positive_weight",
    "train",
    "predict",
    "score_forecasts",
    "heatmap_cells",
    "evaluate",
    "burst_position_heatmap",
    "baseline_forecasts",
    "evaluate_baseline",
    "run_ablation",
    "save_checkpoint",
    "load_checkpoint",
    "write_metrics",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BAFC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule.  Learning rate, optimizer and split are not fixed by the method; see README.

    ``train_stride`` / ``max_train_windows`` thin the training windows for
    desk-scale runs.  ``causal_distance`` feeds training only burst flags that
    would be known at forecast time (flags lagged by ``burst_k``, the labeling
    look-ahead, taken from the labels when they carry it); ``eval_distance``
    picks the feature used when the checkpoint is scored, causal by default.  ``dtype`` is the compute precision;
    the desk profile trades 64-bit arithmetic for speed.
    """

    epochs: int = 15
    batch_size: int = 128
    learning_rate: float = 1e-4
    seed: int = 0
    pred_len: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    train_stride: int = 1
    max_train_windows: int = 0
    val_stride: int = 1
    causal_distance: bool = False
    eval_distance: str = "causal"
    distance_cap: int = DEFAULT_DISTANCE_CAP
    burst_k: int = 128
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.train_stride < 1 or self.val_stride < 1:
            raise ValueError("strides must be >= 1")
        if self.eval_distance not in ("causal", "offline"):
            raise ValueError(f"eval_distance must be 'causal' or 'offline', got {self.eval_distance!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_(self, **kw) -> TrainConfig:
        return replace(self, **kw)


PAPER_TRAIN = TrainConfig()
DESK_TRAIN = TrainConfig(epochs=2, batch_size=32, learning_rate=1e-3, train_stride=2, val_stride=4, dtype="float32")

ABLATION_ROWS = (
    ("INF", dict(enable_burst_embed=False, enable_burst_heads=False, enable_asym_loss=False)),
    ("INF+PE", dict(enable_burst_embed=True, enable_burst_heads=False, enable_asym_loss=False)),
    ("INF+PE+FCLs", dict(enable_burst_embed=True, enable_burst_heads=True, enable_asym_loss=False)),
    ("INF+PE+FCLs+ACF", dict(enable_burst_embed=True, enable_burst_heads=True, enable_asym_loss=True)),
)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    xn: np.ndarray
    flags: np.ndarray
    dist: np.ndarray
    norm: NormStats
    train_end: int
    val_end: int

    @property
    def n(self) -> int:
        return self.xn.shape[0]


def _series_values(series) -> np.ndarray:
    return series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=np.float64)


def _flags_of(labels) -> np.ndarray:
    # ndarray has its own .flags attribute, so only unwrap label objects
    flags = labels if isinstance(labels, (np.ndarray, list, tuple)) else getattr(labels, "flags", labels)
    return np.asarray(flags).astype(np.int8)


def _distance(flags, tcfg: TrainConfig) -> np.ndarray:
    if tcfg.causal_distance:
        return causal_burst_distance(flags, tcfg.burst_k, tcfg.distance_cap)
    return burst_distance(flags, tcfg.distance_cap)


def _label_lag(labels, tcfg: TrainConfig) -> TrainConfig:
    # labels that remember their look-ahead override the configured lag
    if isinstance(labels, BurstLabels) and labels.config.k != tcfg.burst_k:
        return tcfg.with_(burst_k=labels.config.k)
    return tcfg


def prepare_data(series, labels, tcfg: TrainConfig, norm: NormStats | None = None) -> PreparedData:
    """Normalize with train-split statistics and derive the distance feature over the whole series."""
    v = _series_values(series)
    flags = _flags_of(labels)
    if flags.shape != v.shape:
        raise SeriesError(f"labels length {flags.shape[0]} differs from series length {v.shape[0]}")
    train_end, val_end = split_bounds(v.shape[0], tcfg.split)
    if norm is None:
        _, norm = zscore_normalize(TimeSeries(v[:train_end]))
    xn = (v - norm.mean) / norm.sd
    return PreparedData(xn, flags, _distance(flags, tcfg), norm, train_end, val_end)


def segment_starts(lo: int, hi: int, mcfg: ModelConfig, stride: int = 1) -> np.ndarray:
    """Window starts whose encoder and target both lie inside ``[lo, hi)``."""
    last = hi - mcfg.encoder_len - mcfg.pred_len
    if last < lo:
        return np.zeros(0, dtype=np.int64)
    return np.arange(lo, last + 1, stride, dtype=np.int64)


def window_arrays(data: PreparedData, starts, mcfg: ModelConfig) -> dict:
    starts = np.asarray(starts, dtype=np.int64)
    le, ll, lp = mcfg.encoder_len, mcfg.label_len, mcfg.pred_len
    span = le + lp
    xs = sliding_window_view(data.xn, span)[starts]
    ds = sliding_window_view(data.dist, span)[starts]
    fs = sliding_window_view(data.flags, span)[starts]
    return {
        "enc_vals": xs[:, :le],
        "enc_dist": ds[:, :le],
        "label_vals": xs[:, le - ll : le],
        "label_dist": ds[:, le - ll : le],
        "y": xs[:, le:],
        "yp": fs[:, le:].astype(np.float64),
    }


def positive_weight(target_flags) -> float:
    """BCE weight on burst steps: negatives / positives, clamped to [1, 100]."""
    f = np.asarray(target_flags)
    pos = float(f.sum())
    neg = float(f.size - pos)
    if pos == 0:
        return 1.0
    return float(np.clip(neg / pos, 1.0, 100.0))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    norm: NormStats
    train_digest: str
    params: dict[str, np.ndarray]
    extras: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "model_config": self.model_config.to_dict(),
            "model_digest": self.model_config.digest(),
            "norm": self.norm.to_dict(),
            "train_digest": self.train_digest,
            "extras": self.extras,
            "tensors": [{"name": n, "shape": list(a.shape)} for n, a in self.params.items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        blobs = [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.params.values()]
        return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, blob: bytes) -> Checkpoint:
        if len(blob) < _CKPT_HEAD.size:
            raise CheckpointError("truncated checkpoint: header incomplete")
        magic, version, hlen = _CKPT_HEAD.unpack_from(blob)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _CKPT_HEAD.size
        if len(blob) < start + hlen:
            raise CheckpointError("truncated checkpoint: header incomplete")
        header = json.loads(blob[start : start + hlen])
        pos = start + hlen
        params = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if len(blob) < pos + nbytes:
                raise CheckpointError(f"truncated checkpoint: missing blob {t['name']!r}")
            params[t["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
        if pos != len(blob):
            raise CheckpointError(f"checkpoint has {len(blob) - pos} trailing bytes")
        cfg = ModelConfig.from_dict(header["model_config"])
        if cfg.digest() != header["model_digest"]:
            raise CheckpointError("checkpoint model digest does not match its config")
        norm = NormStats(header["norm"]["mean"], header["norm"]["sd"])
        return cls(cfg, norm, header["train_digest"], params, header.get("extras", {}))

    def build_model(self) -> BurstInformer:
        model = BurstInformer(self.model_config)
        missing = [n for n in model.params if n not in self.params]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {missing}")
        model.load_state_dict({n: self.params[n] for n in model.params})
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if expect_config is not None and expect_config.digest() != ckpt.model_config.digest():
        have, want = ckpt.model_config.to_dict(), expect_config.to_dict()
        diff = ", ".join(f"{k}: {have[k]!r} != {want[k]!r}" for k in sorted(have) if have[k] != want.get(k))
        raise CheckpointError(f"model config mismatch ({diff})")
    return ckpt


def _snapshot(model: BurstInformer) -> dict[str, np.ndarray]:
    return {n: p.data.astype("<f4") for n, p in model.params.items()}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: dict


def _batch_loss(model, arrays, idx, pos_weight, parts=None):
    out = model(arrays["enc_vals"][idx], arrays["enc_dist"][idx], arrays["label_vals"][idx], arrays["label_dist"][idx])
    return composite_loss(out, arrays["y"][idx], arrays["yp"][idx], model.cfg, pos_weight, parts), out


def _eval_loss(model, arrays, pos_weight, batch: int = 256):
    n = arrays["y"].shape[0]
    total_loss = total_se = 0.0
    with ad.no_grad():
        for lo in range(0, n, batch):
            idx = np.arange(lo, min(n, lo + batch))
            loss, out = _batch_loss(model, arrays, idx, pos_weight)
            total_loss += loss.item() * len(idx)
            total_se += float(np.sum((out.combined.data - arrays["y"][idx]) ** 2))
    return total_loss / n, total_se / (n * arrays["y"].shape[1])


def train(series, labels, mcfg: ModelConfig, tcfg: TrainConfig, data: PreparedData | None = None) -> TrainResult:
    """Fit the model with Adam; returns the best-validation-MSE checkpoint and a loss trace."""
    with ad.compute_dtype(tcfg.dtype):
        return _train(series, labels, mcfg, tcfg, data)


def _train(series, labels, mcfg, tcfg, data):
    if mcfg.pred_len != tcfg.pred_len:
        mcfg = mcfg.with_(pred_len=tcfg.pred_len)
    tcfg = _label_lag(labels, tcfg)
    if data is None:
        data = prepare_data(series, labels, tcfg)
    train_starts = segment_starts(0, data.train_end, mcfg, tcfg.train_stride)
    if tcfg.max_train_windows:
        train_starts = train_starts[: tcfg.max_train_windows]
    val_starts = segment_starts(data.train_end, data.val_end, mcfg, tcfg.val_stride)
    if len(train_starts) == 0 or len(val_starts) == 0:
        raise SeriesError("series too short for the train/validation windows")
    tr = window_arrays(data, train_starts, mcfg)
    va = window_arrays(data, val_starts, mcfg)
    pos_weight = positive_weight(data.flags[mcfg.encoder_len : data.train_end])

    model = BurstInformer(mcfg, seed=tcfg.seed)
    params = model.parameters(active_only=True)
    order_rng = np.random.default_rng([tcfg.seed, 2])
    probe = {k: v[: min(256, len(train_starts))] for k, v in tr.items()}
    initial_loss, _ = _eval_loss(model, probe, pos_weight)

    trace = {
        "pos_weight": pos_weight,
        "initial_train_loss": initial_loss,
        "epoch_train_loss": [],
        "val_loss": [],
        "val_mse": [],
        "n_train_windows": int(len(train_starts)),
        "n_val_windows": int(len(val_starts)),
    }
    best = (np.inf, None, -1)
    step = 0
    n = len(train_starts)
    for epoch in range(tcfg.epochs):
        perm = order_rng.permutation(n)
        running = 0.0
        for lo in range(0, n, tcfg.batch_size):
            idx = perm[lo : lo + tcfg.batch_size]
            loss, _ = _batch_loss(model, tr, idx, pos_weight)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            loss.backward()
            step += 1
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            ad.adam_step(params, tcfg.learning_rate, tcfg.betas, tcfg.eps, step)
            running += value * len(idx)
        trace["epoch_train_loss"].append(running / n)
        val_loss, val_mse = _eval_loss(model, va, pos_weight)
        trace["val_loss"].append(val_loss)
        trace["val_mse"].append(val_mse)
        log.info("epoch %d train %.4f val %.4f val_mse %.4f", epoch, running / n, val_loss, val_mse)
        if val_mse < best[0]:
            best = (val_mse, _snapshot(model), epoch)
    trace["final_train_loss"], _ = _eval_loss(model, probe, pos_weight)
    trace["best_epoch"] = best[2]
    trace["steps"] = step
    extras = {
        "causal_distance": tcfg.causal_distance,
        "eval_distance": tcfg.eval_distance,
        "distance_cap": tcfg.distance_cap,
        "burst_k": tcfg.burst_k,
        "split": list(tcfg.split),
        "pos_weight": pos_weight,
        "dtype": tcfg.dtype,
    }
    ckpt = Checkpoint(mcfg, data.norm, tcfg.digest(), best[1], extras)
    return TrainResult(ckpt, trace)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    overall_mse: float
    burst_mse: float | None
    n_windows: int
    n_burst_windows: int
    heatmap: list[dict]
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "overall_mse": self.overall_mse,
            "burst_mse": self.burst_mse,
            "n_windows": self.n_windows,
            "n_burst_windows": self.n_burst_windows,
            "heatmap": self.heatmap,
            "config_digest": self.config_digest,
        }


def heatmap_cells(preds, targets, target_flags) -> list[dict]:
    """Per horizon index: squared error averaged over windows flagged at that index."""
    err2 = (np.asarray(preds) - np.asarray(targets)) ** 2
    f = np.asarray(target_flags).astype(bool)
    cells = []
    for i in range(err2.shape[1]):
        count = int(f[:, i].sum())
        mse = float(err2[f[:, i], i].mean()) if count else None
        cells.append({"index": i, "mse": mse, "count": count})
    return cells


def score_forecasts(preds, targets, target_flags, config_digest: str = "") -> EvalReport:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    f = np.asarray(target_flags).astype(bool)
    if preds.shape != targets.shape or f.shape != targets.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape}, targets {targets.shape}, flags {f.shape}")
    err2 = (preds - targets) ** 2
    burst_rows = f.any(axis=1)
    n_burst = int(burst_rows.sum())
    return EvalReport(
        overall_mse=float(err2.mean()),
        burst_mse=float(err2[burst_rows].mean()) if n_burst else None,
        n_windows=int(preds.shape[0]),
        n_burst_windows=n_burst,
        heatmap=heatmap_cells(preds, targets, f),
        config_digest=config_digest,
    )


def predict(model: BurstInformer, arrays: dict, batch: int = 256) -> np.ndarray:
    n = arrays["y"].shape[0]
    out = np.empty((n, model.cfg.pred_len))
    with ad.no_grad():
        for lo in range(0, n, batch):
            sl = slice(lo, min(n, lo + batch))
            o = model(arrays["enc_vals"][sl], arrays["enc_dist"][sl], arrays["label_vals"][sl], arrays["label_dist"][sl])
            out[sl] = o.combined.data
    return out


def _ckpt_train_config(ckpt: Checkpoint, distance: str | None = None) -> TrainConfig:
    """Data settings for scoring ``ckpt``; ``distance`` overrides the stored evaluation mode."""
    ex = ckpt.extras
    distance = distance or ex.get("eval_distance", "causal")
    if distance not in ("causal", "offline"):
        raise ValueError(f"distance must be 'causal' or 'offline', got {distance!r}")
    return TrainConfig(
        pred_len=ckpt.model_config.pred_len,
        causal_distance=distance == "causal",
        eval_distance=distance,
        distance_cap=int(ex.get("distance_cap", DEFAULT_DISTANCE_CAP)),
        burst_k=int(ex.get("burst_k", 128)),
        split=tuple(ex.get("split", (0.7, 0.1, 0.2))),
        dtype=ex.get("dtype", "float64"),
    )


def _segment(data: PreparedData, segment: str) -> tuple[int, int]:
    if segment == "test":
        return data.val_end, data.n
    if segment == "val":
        return data.train_end, data.val_end
    if segment == "train":
        return 0, data.train_end
    if segment == "all":
        return 0, data.n
    raise ValueError(f"unknown segment {segment!r}")


def _forecast_segment(ckpt: Checkpoint, series, labels, segment: str, distance: str | None = None):
    tcfg = _ckpt_train_config(ckpt, distance)
    data = prepare_data(series, labels, tcfg, norm=ckpt.norm)
    lo, hi = _segment(data, segment)
    mcfg = ckpt.model_config
    starts = segment_starts(lo, hi, mcfg)
    if len(starts) == 0:
        raise SeriesError(f"segment [{lo}, {hi}) shorter than encoder_len + pred_len")
    arrays = window_arrays(data, starts, mcfg)
    with ad.compute_dtype(tcfg.dtype):
        preds = predict(ckpt.build_model(), arrays)
    return preds, arrays


def evaluate(ckpt: Checkpoint, series, labels, segment: str = "test", distance: str | None = None) -> EvalReport:
    """Score the checkpoint on every stride-1 window of ``segment`` (default: the test split).

    ``distance`` ("causal" or "offline") overrides the checkpoint's evaluation
    distance mode.
    """
    preds, arrays = _forecast_segment(ckpt, series, labels, segment, distance)
    digest = f"{ckpt.model_config.digest()}:{ckpt.train_digest}"
    return score_forecasts(preds, arrays["y"], arrays["yp"], digest)


def burst_position_heatmap(ckpt: Checkpoint, series, labels, segment: str = "test", distance: str | None = None) -> list[dict]:
    preds, arrays = _forecast_segment(ckpt, series, labels, segment, distance)
    return heatmap_cells(preds, arrays["y"], arrays["yp"])


def baseline_forecasts(kind: str, series, labels, pred_len: int, p: int = 2, d=None, d_int: int = 0,
                       tcfg: TrainConfig | None = None, encoder_len: int = 128, segment: str = "test"):
    """Fit a statistical model on the normalized train split and forecast the segment's windows.

    Windows coincide with the transformer's; each origin conditions on the
    whole normalized series before it.  Returns ``(preds, targets, flags, model)``.
    """
    tcfg = (tcfg or TrainConfig()).with_(pred_len=pred_len)
    data = prepare_data(series, labels, tcfg)
    mcfg = ModelConfig(encoder_len=encoder_len, label_len=min(64, encoder_len), pred_len=pred_len)
    lo, hi = _segment(data, segment)
    starts = segment_starts(lo, hi, mcfg)
    origins = starts + mcfg.encoder_len
    train_part = data.xn[: data.train_end]
    if kind == "ar":
        model = fit_ar_yule_walker(train_part, p, d_int)
        preds = rolling_forecast_ar(model, data.xn, origins, pred_len)
    elif kind == "farima":
        model = fit_farima(train_part, p, d)
        preds = rolling_forecast_farima(model, data.xn, origins, pred_len)
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    arrays = window_arrays(data, starts, mcfg)
    return preds, arrays["y"], arrays["yp"], model


def evaluate_baseline(kind: str, series, labels, pred_len: int, **kw) -> EvalReport:
    preds, y, yp, _ = baseline_forecasts(kind, series, labels, pred_len, **kw)
    return score_forecasts(preds, y, yp, f"baseline:{kind}")


def run_ablation(series, labels, base_mcfg: ModelConfig, tcfg: TrainConfig) -> list[dict]:
    """Train and score the four cumulative enhancement settings at one-step horizon."""
    tcfg = _label_lag(labels, tcfg.with_(pred_len=1))
    data = prepare_data(series, labels, tcfg)
    rows = []
    for name, switches in ABLATION_ROWS:
        mcfg = base_mcfg.with_(pred_len=1, **switches)
        result = train(series, labels, mcfg, tcfg, data=data)
        report = evaluate(result.checkpoint, series, labels)
        rows.append({"model": name, "overall": report.overall_mse, "burst": report.burst_mse, **switches})
    return rows


def write_metrics(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
