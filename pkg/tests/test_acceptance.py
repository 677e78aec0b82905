"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints, so a
plain ``pytest -v`` run ends with the pass/fail table.  The desk-scale
training criteria (6 and 7) are marked ``slow`` and share their runs.
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE
from scipy.signal import lfilter

from burstcast import autodiff as ad
from burstcast.burst_detect import BurstConfig, causal_burst_distance, label_bursts
from burstcast.informer_burst import (
    BurstInformer,
    ModelConfig,
    causal_query_mask,
    composite_loss,
    desk_config,
    full_attention,
    probsparse_attention,
    select_top_queries,
    sparsity_measure,
)
from burstcast.selfsim_stats import variance_time_hurst
from burstcast.stat_models import (
    fit_ar_yule_walker,
    fit_farima,
    forecast_ar,
    forecast_farima,
    frac_diff,
    frac_integrate,
)
from burstcast.traffic_gen import GenConfig, superpose
from burstcast.train_eval import (
    ABLATION_ROWS,
    DESK_TRAIN,
    TrainConfig,
    burst_position_heatmap,
    evaluate,
    evaluate_baseline,
    prepare_data,
    segment_starts,
    train,
)


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# 1. burst labeling vs literal loops


def literal_bursts(x, k, h):
    n = len(x)
    a = {}
    for j in range(k, n - k):
        s = 0.0
        for i in range(j - k, j):
            s += x[i]
        for i in range(j + 1, j + k + 1):
            s += x[i]
        a[j] = x[j] - s / (2 * k)
    pos = [v for v in a.values() if v > 0]
    flags = [0] * n
    if not pos:
        return flags
    mu_p = sum(pos) / len(pos)
    sd_p = math.sqrt(sum((v - mu_p) ** 2 for v in pos) / len(pos))
    mu_x = sum(x) / n
    sd_x = math.sqrt(sum((v - mu_x) ** 2 for v in x) / n)
    for j, v in a.items():
        if v > 0 and v - mu_p > h * sd_p and x[j] - mu_x > h * sd_x:
            flags[j] = 1
    return flags


def test_criterion_1_burst_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    mismatched, total_flags = [], 0
    for case in range(200):
        n = int(rng.integers(500, 5001))
        k = int(rng.choice([4, 16, 128]))
        h = float(rng.choice([1.5, 2.5]))
        kind = case % 3
        if kind == 0:
            x = rng.normal(size=n).cumsum() * 0.2 + rng.pareto(1.3, n)
        elif kind == 1:
            x = rng.normal(size=n)
            x[rng.integers(0, n, size=max(1, n // 300))] += rng.uniform(3, 10)
        else:
            x = superpose(GenConfig(num_sources=40, num_ticks=n, seed=case)).values
        got = label_bursts(x, BurstConfig(k, h)).flags
        want = np.array(literal_bursts([float(v) for v in x], k, h), dtype=np.int8)
        total_flags += int(want.sum())
        if not np.array_equal(got, want):
            mismatched.append(case)
    elapsed = time.time() - t0
    ok = not mismatched and elapsed < 30
    record(1, ok, f"200 series exact={not mismatched} ({total_flags} flags, mismatched cases {mismatched[:5]}), {elapsed:.1f}s < 30s")
    assert not mismatched
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 2. generator self-similarity


def test_criterion_2_generator_hurst():
    t0 = time.time()
    hs = [variance_time_hurst(superpose(GenConfig(seed=seed))).H for seed in range(10)]
    passing = sum(h >= 0.8 for h in hs)
    white = variance_time_hurst(np.random.default_rng(0).normal(size=60_000)).H
    elapsed = time.time() - t0
    ok = passing >= 9 and 0.45 <= white <= 0.55 and elapsed < 120
    record(2, ok, f"H>=0.8 in {passing}/10 seeds (min {min(hs):.3f}), white noise H={white:.3f}, {elapsed:.1f}s < 120s")
    assert passing >= 9
    assert 0.45 <= white <= 0.55
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 3. gradients


def test_criterion_3_gradients():
    from test_autodiff import OP_CASES

    t0 = time.time()
    worst_op = max(
        (max(r["max_rel_err"] for r in ad.grad_check(f, inputs)), name) for name, (f, inputs) in OP_CASES.items()
    )
    cfg = ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16, encoder_len=8, label_len=4, pred_len=2)
    model = BurstInformer(cfg, seed=0)
    rng = np.random.default_rng(7)
    ev = rng.normal(size=(2, 8))
    ed = rng.integers(0, 40, size=(2, 8))
    y = rng.normal(size=(2, 2))
    yp = np.array([[1.0, 0.0], [0.0, 1.0]])
    names = list(model.params)

    def loss(*tensors):
        for n, t in zip(names, tensors):
            model.params[n] = t
        return composite_loss(model(ev, ed, ev[:, 4:], ed[:, 4:]), y, yp, cfg, pos_weight=3.0)

    report = ad.grad_check(loss, [model.params[n].data for n in names])
    # key-projection biases have identically zero gradient (softmax shift invariance): compare absolutely
    zero_grad = [r["max_abs_err"] for n, r in zip(names, report) if ".k.b" in n]
    e2e = max(r["max_rel_err"] for n, r in zip(names, report) if ".k.b" not in n)
    elapsed = time.time() - t0
    ok = worst_op[0] < 1e-4 and e2e < 1e-3 and max(zero_grad) < 1e-8 and elapsed < 60
    record(
        3,
        ok,
        f"{len(OP_CASES)} ops worst {worst_op[0]:.1e} ({worst_op[1]}), composite loss over {len(names)} tensors "
        f"{e2e:.1e}, {elapsed:.1f}s < 60s",
    )
    assert worst_op[0] < 1e-4
    assert e2e < 1e-3 and max(zero_grad) < 1e-8
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 4. attention


def literal_probsparse(q, k, v, u):
    lq, dk = q.shape
    m = []
    for i in range(lq):
        s = [sum(q[i, c] * k[j, c] for c in range(dk)) / math.sqrt(dk) for j in range(k.shape[0])]
        m.append(max(s) - sum(s) / len(s))
    chosen = sorted(sorted(range(lq), key=lambda i: (-m[i], i))[:u])
    out = np.repeat(v.mean(axis=0, keepdims=True), lq, axis=0)
    for i in chosen:
        s = np.array([q[i] @ k[j] for j in range(k.shape[0])]) / math.sqrt(dk)
        w = np.exp(s - s.max())
        out[i] = (w / w.sum()) @ v
    return out, chosen


def test_criterion_4_attention():
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst_full = worst_sparse = 0.0
    selection_ok = True
    with ad.compute_dtype(np.float64):
        for _ in range(50):
            lq, lk, dk, dv = (int(rng.integers(2, 33)), int(rng.integers(2, 33)), int(rng.integers(1, 17)), int(rng.integers(1, 9)))
            q, k, v = rng.normal(size=(lq, dk)), rng.normal(size=(lk, dk)), rng.normal(size=(lk, dv))
            worst_full = max(worst_full, np.abs(probsparse_attention(q, k, v, u=lq).data - full_attention(q, k, v).data).max())
            u = int(rng.integers(1, lq)) if lq > 1 else 1
            want, chosen = literal_probsparse(q, k, v, u)
            selection_ok &= list(select_top_queries(sparsity_measure(q, k), u)) == chosen
            worst_sparse = max(worst_sparse, np.abs(probsparse_attention(q, k, v, u=u).data - want).max())
            # causal variant against its own full-attention degenerate case
            if lq == lk:
                assert causal_query_mask(sparsity_measure(q, k, causal=True), lq).all()
                full_c = full_attention(q, k, v, causal=True).data
                worst_full = max(worst_full, np.abs(probsparse_attention(q, k, v, u=lq, causal=True).data - full_c).max())
    elapsed = time.time() - t0
    ok = worst_full <= 1e-10 and worst_sparse <= 1e-10 and selection_ok and elapsed < 30
    record(4, ok, f"50 shapes: u=L_Q max dev {worst_full:.1e}, u<L_Q selection exact={selection_ok} max dev {worst_sparse:.1e}, {elapsed:.1f}s < 30s")
    assert worst_full <= 1e-10 and worst_sparse <= 1e-10 and selection_ok
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 5. baselines


def test_criterion_5_baselines():
    t0 = time.time()
    e = np.random.default_rng(5).normal(size=50_500)
    x = lfilter([1.0], [1.0, -0.6, 0.25], e)[500:]
    phi = fit_ar_yule_walker(x, 2).phi
    ar_err = float(np.max(np.abs(phi - [0.6, -0.25])))

    z = np.random.default_rng(6).normal(size=5000).cumsum()
    trunc = 500
    rt_err = float(np.max(np.abs(frac_integrate(frac_diff(z, 0.35, trunc), 0.35, trunc)[trunc:] - z[trunc:])))

    y = lfilter([1.0], [1.0, -0.5, 0.2], np.random.default_rng(8).normal(size=6000)) + 3.0
    far = fit_farima(y, 2, d=0.0, trunc=100)
    ar = fit_ar_yule_walker(y, 2)
    eq_err = max(
        float(np.max(np.abs(far.phi - ar.phi))),
        float(np.max(np.abs(forecast_farima(far, y, 24) - forecast_ar(ar, y, 24)))),
    )
    elapsed = time.time() - t0
    ok = ar_err <= 0.03 and rt_err < 1e-6 and eq_err < 1e-10 and elapsed < 60
    record(5, ok, f"AR(2) coef err {ar_err:.4f} <= 0.03, frac round trip {rt_err:.1e} < 1e-6, FARIMA(d=0) vs AR {eq_err:.1e} < 1e-10, {elapsed:.1f}s")
    assert ar_err <= 0.03 and rt_err < 1e-6 and eq_err < 1e-10
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 6 and 7. desk-scale directional reproduction

DESK_N = 20_000
DESK_MODEL = desk_config(pred_len=1)
MIN_BURST_WINDOWS = 5


def acceptance_seeds(count: int) -> list[int]:
    """First ``count`` generator seeds whose test split holds >= MIN_BURST_WINDOWS burst windows.

    The rule looks only at the data, never at model results; without it some
    seeds have no test bursts and burst MSE is undefined.
    """
    seeds, seed = [], 0
    while len(seeds) < count:
        s = superpose(GenConfig(num_ticks=DESK_N, seed=seed))
        data = prepare_data(s, label_bursts(s), TrainConfig())
        test_flags = data.flags[data.val_end + DESK_MODEL.encoder_len :]
        if test_flags.sum() >= MIN_BURST_WINDOWS:
            seeds.append(seed)
        seed += 1
    return seeds


class _DeskRuns:
    def __init__(self):
        self.cache: dict = {}
        self.data: dict = {}

    def get(self, seed: int, row: str):
        key = (seed, row)
        if key not in self.cache:
            if seed not in self.data:
                s = superpose(GenConfig(num_ticks=DESK_N, seed=seed))
                self.data[seed] = (s, label_bursts(s))
            s, lab = self.data[seed]
            switches = dict(ABLATION_ROWS)[row]
            t0 = time.time()
            result = train(s, lab, DESK_MODEL.with_(**switches), DESK_TRAIN.with_(seed=seed))
            report = evaluate(result.checkpoint, s, lab)
            self.cache[key] = (report, time.time() - t0)
        return self.cache[key]


@pytest.fixture(scope="module")
def desk_runs():
    return _DeskRuns()


@pytest.mark.slow
def test_criterion_6_burst_mse_vs_baseline(desk_runs):
    t0 = time.time()
    seeds = acceptance_seeds(5)
    lines, wins = [], 0
    for seed in seeds:
        full, _ = desk_runs.get(seed, "INF+PE+FCLs+ACF")
        base, _ = desk_runs.get(seed, "INF")
        wins += full.burst_mse < base.burst_mse
        lines.append(f"seed {seed}: {full.burst_mse:.3f} vs {base.burst_mse:.3f}")
    cost = time.time() - t0  # seed scan, generation, training and scoring
    ok = wins >= 4 and cost < 30 * 60
    record(6, ok, f"full < INF burst MSE in {wins}/5 seeds [{'; '.join(lines)}], {cost / 60:.1f} min < 30")
    assert wins >= 4
    assert cost < 30 * 60


@pytest.mark.slow
def test_criterion_7_ablation_ordering(desk_runs):
    seeds = acceptance_seeds(3)
    rows = ("INF", "INF+PE+FCLs", "INF+PE+FCLs+ACF")
    table, cost = {r: [] for r in rows}, 0.0
    for seed in seeds:
        for r in rows:
            rep, dt = desk_runs.get(seed, r)
            table[r].append(rep.burst_mse)
            cost += dt  # runs shared with criterion 6 count in full: standalone cost
    med = {r: float(np.median(v)) for r, v in table.items()}
    ordered = med["INF+PE+FCLs+ACF"] < med["INF+PE+FCLs"] < med["INF"]
    ok = ordered and cost < 45 * 60
    detail = ", ".join(f"{r} {med[r]:.3f}" for r in reversed(rows))
    record(7, ok, f"median burst MSE over seeds {seeds}: {detail}; ordered={ordered}, {cost / 60:.1f} min < 45")
    assert ordered
    assert cost < 45 * 60


# ---------------------------------------------------------------------------
# 8. FARIMA vs ARIMA


def test_criterion_8_farima_beats_arima():
    t0 = time.time()
    results = []
    for seed in (100, 101, 102):
        s = superpose(GenConfig(seed=seed))
        lab = label_bursts(s)
        for pl in (12, 24):
            arima = evaluate_baseline("ar", s, lab, pl, p=2, d_int=1).overall_mse
            farima = evaluate_baseline("farima", s, lab, pl, p=2).overall_mse
            results.append((seed, pl, farima, arima))
    elapsed = time.time() - t0
    ok = all(f <= a for _, _, f, a in results) and elapsed < 300
    detail = "; ".join(f"s{s} PL{pl} {f:.3f}<={a:.3f}" for s, pl, f, a in results)
    record(8, ok, f"FARIMA <= ARIMA(2,1,0) overall MSE [{detail}], {elapsed:.1f}s < 300s")
    assert all(f <= a for _, _, f, a in results)
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 9. heatmap vs brute-force window scan


def test_criterion_9_heatmap_machinery():
    s = superpose(GenConfig(num_ticks=3000, num_sources=200, seed=2))
    lab = label_bursts(s, BurstConfig(k=16, h=2.0))
    pl = 12
    mcfg = ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, d_ff=16, encoder_len=32, label_len=16, pred_len=pl)
    ckpt = train(s, lab, mcfg, TrainConfig(epochs=1, batch_size=64, learning_rate=3e-3, pred_len=pl, train_stride=8)).checkpoint
    cells = burst_position_heatmap(ckpt, s, lab)

    # brute force: every stride-1 test window forecast one at a time
    xn = (s.values - ckpt.norm.mean) / ckpt.norm.sd
    flags = lab.flags
    dist = causal_burst_distance(flags, 16)  # scoring sees only flags confirmed k steps later
    model = ckpt.build_model()
    val_end = int(round(0.8 * len(s)))
    se = [0.0] * pl
    counts = [0] * pl
    n_windows = 0
    with ad.no_grad():
        for start in range(val_end, len(s) - 32 - pl + 1):
            n_windows += 1
            tgt = range(start + 32, start + 32 + pl)
            if not any(flags[t] for t in tgt):
                continue
            enc = slice(start, start + 32)
            lbl = slice(start + 16, start + 32)
            yhat = model(xn[enc], dist[enc], xn[lbl], dist[lbl]).combined.data[0]
            for i, t in enumerate(tgt):
                if flags[t]:
                    counts[i] += 1
                    se[i] += (yhat[i] - xn[t]) ** 2
    assert n_windows == len(segment_starts(val_end, len(s), mcfg))
    count_ok = [c["count"] for c in cells] == counts and sum(counts) > 0
    dev = max(abs(c["mse"] - se[i] / counts[i]) for i, c in enumerate(cells) if counts[i])
    empty_ok = all(c["mse"] is None for i, c in enumerate(cells) if counts[i] == 0)
    ok = count_ok and dev < 1e-12 and empty_ok
    record(
        9,
        ok,
        f"PL={pl} counts exact={count_ok} ({sum(counts)} burst steps), max MSE dev {dev:.1e} < 1e-12; "
        "full-scale late-horizon range not asserted at desk scale",
    )
    assert count_ok and empty_ok
    assert dev < 1e-12


# ---------------------------------------------------------------------------
# 10. pipeline determinism


def _pipeline(workdir):
    run = lambda *argv: subprocess.run([sys.executable, "-m", "burstcast", *argv], capture_output=True, text=True, check=True)
    raw, lab, ckpt, metrics = (str(workdir / n) for n in ("s.raw", "s.csv", "m.bafc", "metrics.json"))
    run("generate", "--ticks", "5000", "--seed", "21", "--out", raw)
    run("label", "--input", raw, "--out", lab)
    run("train", "--input", lab, "--epochs", "2", "--seed", "3", "--out", ckpt)
    run("eval", "--checkpoint", ckpt, "--input", lab, "--out", metrics)
    return (workdir / "m.bafc").read_bytes(), (workdir / "metrics.json").read_bytes()


def test_criterion_10_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    ck_a, met_a = _pipeline(tmp_path / "a")
    ck_b, met_b = _pipeline(tmp_path / "b")
    same = ck_a == ck_b and met_a == met_b
    m = json.loads(met_a)
    record(10, same, f"two generate->label->train(2 epochs)->eval runs: checkpoint ({len(ck_a)} B) and metrics byte-identical={same}, overall MSE {m['overall_mse']:.4f}")
    assert same
