"""Time-series container, normalization, windowing and file I/O."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SeriesError",
    "TimeSeries",
    "NormStats",
    "WindowSet",
    "load_series",
    "save_series",
    "zscore_normalize",
    "denormalize",
    "make_windows",
    "split_bounds",
]

RAW_MAGIC = b"BAFS"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIIQ")


class SeriesError(ValueError):
    """Raised for malformed series data or invalid series arguments."""


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly sampled demand values (Mbps per tick)."""

    values: np.ndarray
    tick_ms: int = 10
    origin_tick: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise SeriesError(f"values must be one-dimensional, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise SeriesError("values must be finite")
        if int(self.tick_ms) <= 0:
            raise SeriesError(f"tick_ms must be positive, got {self.tick_ms}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "tick_ms", int(self.tick_ms))
        object.__setattr__(self, "origin_tick", int(self.origin_tick))

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values) -> TimeSeries:
        return TimeSeries(values, self.tick_ms, self.origin_tick)

    def slice(self, start: int, stop: int) -> TimeSeries:
        return TimeSeries(self.values[start:stop], self.tick_ms, self.origin_tick + start)


@dataclass(frozen=True)
class NormStats:
    mean: float
    sd: float

    def to_dict(self) -> dict:
        return {"mean": float(self.mean), "sd": float(self.sd)}


@dataclass(frozen=True)
class WindowSet:
    """Stride-1 forecasting windows over a series of known length.

    ``starts[w]`` is the first encoder index of window ``w``; the slices are
    derived from it so the set stays cheap for long series.
    """

    encoder_len: int
    label_len: int
    pred_len: int
    starts: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.starts.shape[0]

    def encoder_slice(self, w: int) -> tuple[int, int]:
        t = int(self.starts[w])
        return t, t + self.encoder_len

    def label_slice(self, w: int) -> tuple[int, int]:
        t = int(self.starts[w])
        return t + self.encoder_len - self.label_len, t + self.encoder_len

    def target_slice(self, w: int) -> tuple[int, int]:
        t = int(self.starts[w])
        return t + self.encoder_len, t + self.encoder_len + self.pred_len

    @property
    def windows(self) -> list[tuple[tuple[int, int], tuple[int, int], tuple[int, int]]]:
        return [
            (self.encoder_slice(w), self.label_slice(w), self.target_slice(w))
            for w in range(len(self))
        ]


def make_windows(series_len: int, encoder_len: int, label_len: int, pred_len: int) -> WindowSet:
    if encoder_len < 1 or pred_len < 1 or label_len < 0:
        raise SeriesError("encoder_len and pred_len must be positive, label_len non-negative")
    if label_len > encoder_len:
        raise SeriesError(f"label_len {label_len} exceeds encoder_len {encoder_len}")
    need = encoder_len + pred_len
    if series_len < need:
        raise SeriesError(
            f"series of length {series_len} too short: at least {need} samples required"
        )
    starts = np.arange(series_len - need + 1, dtype=np.int64)
    return WindowSet(encoder_len, label_len, pred_len, starts)


def split_bounds(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int]:
    """Chronological split points ``(train_end, val_end)`` for a series of length n."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SeriesError(f"split fractions must sum to 1, got {fractions}")
    train_end = int(round(n * fractions[0]))
    val_end = int(round(n * (fractions[0] + fractions[1])))
    return train_end, val_end


def zscore_normalize(series: TimeSeries, stats: NormStats | None = None):
    """Standardize ``series``; fit mean and population SD when ``stats`` is None.

    Returns the transformed series and the stats used.
    """
    v = series.values
    if stats is None:
        if v.shape[0] < 2:
            raise SeriesError("degenerate series: need at least 2 samples")
        mean = float(np.mean(v))
        sd = float(np.std(v))
        if not sd > 0:
            raise SeriesError("degenerate series: zero standard deviation")
        stats = NormStats(mean, sd)
    elif not stats.sd > 0:
        raise SeriesError("degenerate series: zero standard deviation")
    return series.with_values((v - stats.mean) / stats.sd), stats


def denormalize(series: TimeSeries, stats: NormStats) -> TimeSeries:
    if not stats.sd > 0:
        raise SeriesError("normalization sd must be positive")
    return series.with_values(series.values * stats.sd + stats.mean)


# ---------------------------------------------------------------------------
# file I/O


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("csv", "raw-f64"):
            raise SeriesError(f"unknown series format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "raw-f64"


def save_series(series: TimeSeries, path, fmt: str | None = None, burst=None, scores=None) -> None:
    """Write ``series`` as CSV (17 significant digits, lossless) or the BAFS raw format.

    ``burst`` (0/1 flags) and ``scores`` add optional CSV columns.
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "raw-f64":
        if burst is not None or scores is not None:
            raise SeriesError("raw-f64 format cannot carry burst labels")
        header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, series.tick_ms, len(series))
        path.write_bytes(header + series.values.astype("<f8").tobytes())
        return

    cols = ["t_ms", "demand_mbps"]
    extra = []
    if burst is not None:
        burst = np.asarray(burst)
        if burst.shape != series.values.shape:
            raise SeriesError("burst column length differs from series length")
        cols.append("burst")
        extra.append([str(int(b)) for b in burst])
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        cols.append("score")
        extra.append([format(s, ".9g") if np.isfinite(s) else "" for s in scores])
    with path.open("w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        t0 = series.origin_tick * series.tick_ms
        for i, v in enumerate(series.values):
            row = [str(t0 + i * series.tick_ms), format(v, ".17g")]
            row.extend(col[i] for col in extra)
            fh.write(",".join(row) + "\n")


def load_series(path, fmt: str | None = None) -> TimeSeries:
    series, _ = load_series_with_labels(path, fmt)
    return series


def load_series_with_labels(path, fmt: str | None = None):
    """Read a series and, for CSV files with a ``burst`` column, its flags.

    Returns ``(TimeSeries, flags or None)``.
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "raw-f64":
        return _load_raw(path), None
    return _load_csv(path)


def _load_raw(path: Path) -> TimeSeries:
    blob = path.read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise SeriesError(f"{path}: truncated raw header")
    magic, version, tick_ms, length = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise SeriesError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise SeriesError(f"{path}: unsupported raw version {version}")
    if length == 0:
        raise SeriesError(f"{path}: empty series")
    expected = _RAW_HEADER.size + 8 * length
    if len(blob) != expected:
        raise SeriesError(f"{path}: expected {expected} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f8", offset=_RAW_HEADER.size, count=length)
    return TimeSeries(values.astype(np.float64), tick_ms)


def _load_csv(path: Path):
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SeriesError(f"{path}: empty file") from None
        if header[:2] != ["t_ms", "demand_mbps"]:
            raise SeriesError(f"{path}: row 1: expected header t_ms,demand_mbps, got {header}")
        burst_col = header.index("burst") if "burst" in header else None
        times, values, flags = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                times.append(int(row[0]))
                values.append(float(row[1]))
                if burst_col is not None:
                    flags.append(int(row[burst_col]))
            except (ValueError, IndexError) as exc:
                raise SeriesError(f"{path}: parse failure at row {row_no}: {exc}") from None
            if not np.isfinite(values[-1]):
                raise SeriesError(f"{path}: non-finite value at row {row_no}")
            n = len(times)
            if n >= 2:
                step = times[1] - times[0]
                if step <= 0:
                    raise SeriesError(f"{path}: non-increasing timestamp at row {n}")
                if times[-1] - times[-2] != step:
                    raise SeriesError(f"non-uniform timestamp at row {n}")
    if not values:
        raise SeriesError(f"{path}: empty file")
    tick_ms = times[1] - times[0] if len(times) >= 2 else 10
    if times[0] % tick_ms:
        origin = 0
    else:
        origin = times[0] // tick_ms
    series = TimeSeries(np.asarray(values), tick_ms, origin)
    return series, (np.asarray(flags, dtype=np.int8) if burst_col is not None else None)
