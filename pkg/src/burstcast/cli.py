"""Command-line entry point: generate, label, stats, baseline, train, eval, ablate, selftest.

Exit codes: 0 success, 1 usage error, 2 data or validation error.  Every
artifact ``X`` is accompanied by ``X.manifest.json`` recording the command
line, effective config and its digest, seeds, input and output digests and
wall-clock time.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .burst_detect import BurstConfig, label_bursts
from .informer_burst import ModelConfig, desk_config, paper_config
from .selfsim_stats import DEFAULT_BLOCKS, autocorrelation, variance_time_hurst
from .series_core import SeriesError, load_series, load_series_with_labels, save_series
from .stat_models import ModelFitError
from .traffic_gen import GenConfig, SourceConfig, superpose
from .train_eval import (
    DESK_TRAIN,
    PAPER_TRAIN,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    baseline_forecasts,
    evaluate,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    score_forecasts,
    train,
    write_metrics,
)

__all__ = ["main", "build_parser", "read_config_file", "UsageError"]

log = logging.getLogger("burstcast")

PROFILES = {
    "desk": {"ticks": 20_000, "model": desk_config, "train": DESK_TRAIN},
    "paper": {"ticks": 60_000, "model": paper_config, "train": PAPER_TRAIN},
}

DATA_ERRORS = (SeriesError, ModelFitError, CheckpointError, TrainingDiverged, ValueError, OSError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys may use dashes or underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(output, argv, config: dict, seeds: dict, inputs, outputs, started: float) -> Path:
    manifest = {
        "command": ["burstcast", *argv],
        "config": config,
        "config_digest": _config_digest(config),
        "seeds": seeds,
        "inputs": {str(p): _file_digest(p) for p in inputs},
        "outputs": {str(p): _file_digest(p) for p in outputs},
        "tool_version": _version(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = Path(str(output) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# option resolution: flag > config file > profile/default


class _Resolver:
    def __init__(self, args):
        self.args = args
        self.file = read_config_file(args.config) if getattr(args, "config", None) else {}
        self.used: dict = {}

    def get(self, name: str, default, cast=None):
        cast = cast or (type(default) if default is not None else str)
        value = getattr(self.args, name, None)
        if value is None and name in self.file:
            value = _cast(self.file[name], cast, name)
        if value is None:
            value = default
        self.used[name] = value
        return value


def _cast(text: str, cast, name: str):
    if cast is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {name}: expected a boolean, got {text!r}")
    try:
        return cast(text)
    except ValueError as exc:
        raise UsageError(f"config key {name}: {exc}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, argv, started):
    r = _Resolver(args)
    prof = PROFILES[args.profile]
    src = SourceConfig(
        shape_on=r.get("shape", 1.04),
        shape_off=r.get("shape", 1.04),
        rate_mean_mbps=r.get("rate_mean", 1.0),
        rate_sd_mbps=r.get("rate_sd", 0.05),
    )
    cfg = GenConfig(
        num_sources=r.get("sources", 750),
        num_ticks=r.get("ticks", prof["ticks"]),
        tick_ms=r.get("tick_ms", 10),
        seed=r.get("seed", 0),
        source=src,
        per_tick_rates=r.get("per_tick_rates", False, bool),
    )
    series = superpose(cfg)
    save_series(series, args.out)
    write_manifest(args.out, argv, cfg.to_dict(), {"seed": cfg.seed}, [], [args.out], started)
    print(f"wrote {len(series)} ticks to {args.out} (mean {series.values.mean():.3f} Mbps)")


def cmd_label(args, argv, started):
    r = _Resolver(args)
    cfg = BurstConfig(k=r.get("k", 128), h=r.get("h", 2.5))
    series = load_series(args.input)
    labels = label_bursts(series, cfg)
    scores = labels.scores if args.emit_scores else None
    save_series(series, args.out, fmt="csv", burst=labels.flags, scores=scores)
    config = {"k": cfg.k, "h": cfg.h, "emit_scores": bool(args.emit_scores)}
    write_manifest(args.out, argv, config, {}, [args.input], [args.out], started)
    print(f"{int(labels.flags.sum())} bursts ({labels.burst_fraction:.4%}) written to {args.out}")


def cmd_stats(args, argv, started):
    r = _Resolver(args)
    blocks = r.get("blocks", None, _int_list) or list(DEFAULT_BLOCKS)
    max_lag = r.get("max_lag", 100)
    series = load_series(args.input)
    est = variance_time_hurst(series, blocks)
    out = est.to_dict()
    out["acf"] = autocorrelation(series, max_lag).tolist()
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, argv, {"blocks": blocks, "max_lag": max_lag}, {}, [args.input], [args.out], started)
    print(f"H = {est.H:.4f} (beta {est.beta:.4f}, stderr {est.slope_stderr:.4f})")


def _parse_d(text):
    if text is None or str(text).lower() == "auto":
        return None
    return float(text)


def cmd_baseline(args, argv, started):
    r = _Resolver(args)
    kind = r.get("model", "farima")
    if kind not in ("ar", "farima"):
        raise UsageError(f"unknown baseline model {kind!r}")
    p = r.get("p", 2)
    d = _parse_d(r.get("d", "auto", str))
    d_int = r.get("d_int", 0)
    pred_len = r.get("pred_len", 12)
    series, flags = load_series_with_labels(args.input)
    if flags is None:
        flags = label_bursts(series).flags
    preds, y, yp, model = baseline_forecasts(kind, series, flags, pred_len, p=p, d=d, d_int=d_int)
    report = score_forecasts(preds, y, yp, f"baseline:{kind}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "step", "forecast", "target", "burst"])
        for i in range(preds.shape[0]):
            for s in range(pred_len):
                w.writerow([i, s, f"{preds[i, s]:.9g}", f"{y[i, s]:.9g}", int(yp[i, s])])
    outputs = [args.out]
    if args.metrics:
        write_metrics(report, args.metrics)
        outputs.append(args.metrics)
    config = {"model": kind, "p": p, "d": "auto" if d is None else d, "d_int": d_int, "pred_len": pred_len}
    if kind == "farima":
        config["d_fitted"] = model.d_frac
    for out in outputs:
        write_manifest(out, argv, config, {}, [args.input], outputs, started)
    burst = "n/a" if report.burst_mse is None else f"{report.burst_mse:.4f}"
    print(f"{kind}: overall MSE {report.overall_mse:.4f}, burst MSE {burst} over {report.n_windows} windows")


def _train_configs(args, r: _Resolver) -> tuple[ModelConfig, TrainConfig]:
    try:
        return _build_train_configs(args, r)
    except ValueError as exc:
        # invalid settings are a configuration problem, not a data problem
        raise UsageError(str(exc)) from None


def _build_train_configs(args, r: _Resolver) -> tuple[ModelConfig, TrainConfig]:
    prof = PROFILES[args.profile]
    base_m: ModelConfig = prof["model"]()
    base_t: TrainConfig = prof["train"]
    pred_len = r.get("pred_len", base_m.pred_len)
    mcfg = base_m.with_(
        d_model=r.get("d_model", base_m.d_model),
        n_heads=r.get("n_heads", base_m.n_heads),
        encoder_len=r.get("encoder_len", base_m.encoder_len),
        label_len=r.get("label_len", base_m.label_len),
        pred_len=pred_len,
        gamma=r.get("gamma", base_m.gamma),
        enable_burst_embed=not r.get("no_burst_embed", False, bool),
        enable_burst_heads=not r.get("no_burst_heads", False, bool),
        enable_asym_loss=not r.get("no_asym_loss", False, bool),
    )
    tcfg = base_t.with_(
        epochs=r.get("epochs", base_t.epochs),
        batch_size=r.get("batch_size", base_t.batch_size),
        learning_rate=r.get("lr", base_t.learning_rate),
        seed=r.get("seed", base_t.seed),
        pred_len=pred_len,
        train_stride=r.get("train_stride", base_t.train_stride),
        causal_distance=r.get("causal_distance", base_t.causal_distance, bool),
        eval_distance=r.get("eval_distance", base_t.eval_distance),
        burst_k=r.get("burst_k", base_t.burst_k),
    )
    return mcfg, tcfg


def _load_labeled(path):
    series, flags = load_series_with_labels(path)
    if flags is None:
        raise SeriesError(f"{path} has no burst column; run 'label' first")
    return series, flags


def cmd_train(args, argv, started):
    r = _Resolver(args)
    mcfg, tcfg = _train_configs(args, r)
    series, flags = _load_labeled(args.input)
    result = train(series, flags, mcfg, tcfg)
    save_checkpoint(result.checkpoint, args.out)
    outputs = [args.out]
    if args.trace:
        Path(args.trace).write_text(json.dumps(result.trace, indent=2, sort_keys=True) + "\n")
        outputs.append(args.trace)
    config = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "profile": args.profile}
    for out in outputs:
        write_manifest(out, argv, config, {"seed": tcfg.seed}, [args.input], outputs, started)
    tr = result.trace
    print(
        f"trained {tr['steps']} steps; loss {tr['initial_train_loss']:.4f} -> {tr['final_train_loss']:.4f}; "
        f"best epoch {tr['best_epoch']} (val MSE {min(tr['val_mse']):.4f})"
    )


def cmd_eval(args, argv, started):
    r = _Resolver(args)
    segment = r.get("segment", "test")
    ckpt = load_checkpoint(args.checkpoint)
    pred_len = r.get("pred_len", ckpt.model_config.pred_len)
    if pred_len != ckpt.model_config.pred_len:
        raise CheckpointError(f"checkpoint forecasts {ckpt.model_config.pred_len} steps, --pred-len asks for {pred_len}")
    series, flags = _load_labeled(args.input)
    distance = r.get("distance", ckpt.extras.get("eval_distance", "causal"))
    report = evaluate(ckpt, series, flags, segment=segment, distance=distance)
    write_metrics(report, args.out)
    config = {"segment": segment, "pred_len": pred_len, "distance": distance, "checkpoint_digest": report.config_digest}
    write_manifest(args.out, argv, config, {}, [args.checkpoint, args.input], [args.out], started)
    burst = "n/a" if report.burst_mse is None else f"{report.burst_mse:.4f}"
    print(f"overall MSE {report.overall_mse:.4f}, burst MSE {burst} ({report.n_burst_windows}/{report.n_windows} burst windows)")


def cmd_ablate(args, argv, started):
    r = _Resolver(args)
    mcfg, tcfg = _train_configs(args, r)
    series, flags = _load_labeled(args.input)
    rows = run_ablation(series, flags, mcfg, tcfg)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "overall", "burst"])
        for row in rows:
            burst = "" if row["burst"] is None else f"{row['burst']:.9g}"
            w.writerow([row["model"], f"{row['overall']:.9g}", burst])
    config = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "profile": args.profile}
    write_manifest(args.out, argv, config, {"seed": tcfg.seed}, [args.input], [args.out], started)
    for row in rows:
        burst = "n/a" if row["burst"] is None else f"{row['burst']:.4f}"
        print(f"{row['model']:<18} overall {row['overall']:.4f}  burst {burst}")


def cmd_selftest(args, argv, started):
    from .selftest import run_all

    results = run_all()
    for name, (ok, detail) in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for ok, _ in results.values()):
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="burstcast", description="Burst-aware traffic forecasting pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, profile=True):
        p.add_argument("--config", help="key=value file; flags override it")
        if profile:
            p.add_argument("--profile", choices=sorted(PROFILES), default="desk")

    g = sub.add_parser("generate", help="synthesize ON/OFF traffic")
    common(g)
    g.add_argument("--sources", type=int)
    g.add_argument("--ticks", type=int)
    g.add_argument("--shape", type=float, help="Pareto shape of ON and OFF periods (1 < a < 2)")
    g.add_argument("--rate-mean", type=float)
    g.add_argument("--rate-sd", type=float)
    g.add_argument("--tick-ms", type=int)
    g.add_argument("--per-tick-rates", action="store_true", default=None)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)

    lab = sub.add_parser("label", help="flag bursts and write a labeled csv")
    common(lab, profile=False)
    lab.add_argument("--input", required=True)
    lab.add_argument("--k", type=int)
    lab.add_argument("--h", type=float)
    lab.add_argument("--emit-scores", action="store_true")
    lab.add_argument("--out", required=True)

    st = sub.add_parser("stats", help="variance-time Hurst estimate and autocorrelation")
    common(st, profile=False)
    st.add_argument("--input", required=True)
    st.add_argument("--blocks", type=_int_list)
    st.add_argument("--max-lag", type=int)
    st.add_argument("--out", required=True)

    b = sub.add_parser("baseline", help="AR / FARIMA rolling forecasts on the test split")
    common(b, profile=False)
    b.add_argument("--input", required=True)
    b.add_argument("--model", choices=["ar", "farima"])
    b.add_argument("--p", type=int)
    b.add_argument("--d", help="fractional order or 'auto'")
    b.add_argument("--d-int", type=int, choices=[0, 1])
    b.add_argument("--pred-len", type=int)
    b.add_argument("--metrics", help="optional metrics json path")
    b.add_argument("--out", required=True)

    for name, helptext in (("train", "train the forecaster"), ("ablate", "four-row enhancement ablation")):
        t = sub.add_parser(name, help=helptext)
        common(t)
        t.add_argument("--input", required=True, help="labeled csv")
        t.add_argument("--seed", type=int)
        t.add_argument("--epochs", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--train-stride", type=int)
        t.add_argument("--pred-len", type=int)
        t.add_argument("--d-model", type=int)
        t.add_argument("--n-heads", type=int)
        t.add_argument("--encoder-len", type=int)
        t.add_argument("--label-len", type=int)
        t.add_argument("--gamma", type=float)
        t.add_argument("--causal-distance", action="store_true", default=None, help="train on causal distances")
        t.add_argument("--eval-distance", choices=["causal", "offline"], help="distance mode stored for scoring")
        t.add_argument("--burst-k", type=int, help="labeling look-ahead k, the lag of causal distances")
        if name == "train":
            t.add_argument("--no-burst-embed", action="store_true", default=None)
            t.add_argument("--no-burst-heads", action="store_true", default=None)
            t.add_argument("--no-asym-loss", action="store_true", default=None)
            t.add_argument("--trace", help="optional loss-trace json path")
        t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score a checkpoint")
    common(e, profile=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True, help="labeled csv")
    e.add_argument("--segment", choices=["test", "val", "train", "all"])
    e.add_argument("--pred-len", type=int)
    e.add_argument("--distance", choices=["causal", "offline"], help="override the checkpoint's distance mode")
    e.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run the built-in oracle suites")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "label": cmd_label,
    "stats": cmd_stats,
    "baseline": cmd_baseline,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    started = time.time()
    try:
        code = COMMANDS[args.command](args, argv, started)
    except UsageError as exc:
        print(f"burstcast {args.command}: usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"burstcast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
