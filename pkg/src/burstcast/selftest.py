"""Self-contained oracle suites behind ``burstcast selftest``.

Each suite compares the production code path against a deliberately naive
reimplementation and returns ``(passed, detail)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .burst_detect import BurstConfig, label_bursts
from .informer_burst import ModelConfig, BurstInformer, composite_loss, num_selected, probsparse_attention

__all__ = ["brute_force_bursts", "naive_probsparse", "suite_bursts", "suite_gradients", "suite_attention", "SUITES", "run_all"]


def brute_force_bursts(x, k: int, h: float) -> np.ndarray:
    """Literal per-index loops over the contrast-score rule."""
    x = [float(v) for v in x]
    n = len(x)
    scores = {}
    for j in range(k, n - k):
        left = sum(x[j - k : j])
        right = sum(x[j + 1 : j + k + 1])
        scores[j] = x[j] - (left + right) / (2 * k)
    pos = [a for a in scores.values() if a > 0]
    flags = np.zeros(n, dtype=np.int8)
    if not pos:
        return flags
    mu_p = sum(pos) / len(pos)
    sd_p = math.sqrt(sum((a - mu_p) ** 2 for a in pos) / len(pos))
    mu_x = sum(x) / n
    sd_x = math.sqrt(sum((v - mu_x) ** 2 for v in x) / n)
    if sd_x == 0:
        return flags
    for j, a in scores.items():
        if a > 0 and a - mu_p > h * sd_p and x[j] - mu_x > h * sd_x:
            flags[j] = 1
    return flags


def naive_probsparse(q, k, v, u: int):
    """Single-head, non-causal reference: loops over queries, returns (output, selected)."""
    lq, dk = q.shape
    scores = q @ k.T / math.sqrt(dk)
    m = np.array([row.max() - row.mean() for row in scores])
    selected = sorted(sorted(range(lq), key=lambda i: (-m[i], i))[:u])
    out = np.tile(v.mean(axis=0), (lq, 1))
    for i in selected:
        w = np.exp(scores[i] - scores[i].max())
        out[i] = (w / w.sum()) @ v
    return out, selected


def suite_bursts(n_cases: int = 40, seed: int = 0):
    rng = np.random.default_rng(seed)
    for case in range(n_cases):
        n = int(rng.integers(300, 1500))
        k = int(rng.choice([4, 16, 64]))
        h = float(rng.choice([1.5, 2.5]))
        x = rng.standard_normal(n).cumsum() * 0.1 + rng.pareto(1.5, n)
        got = label_bursts(x, BurstConfig(k, h)).flags
        want = brute_force_bursts(x, k, h)
        if not np.array_equal(got, want):
            return False, f"case {case}: {int(np.sum(got != want))} flag mismatches"
    return True, f"{n_cases} series exact"


def suite_gradients(seed: int = 0):
    rng = np.random.default_rng(seed)
    shape = (3, 4)
    a = rng.normal(size=shape)
    b = rng.normal(size=shape)
    pos = rng.uniform(0.5, 2.0, size=shape)
    ops = {
        "mul": (lambda x, y: ad.sum_(ad.mul(x, y)), [a, b]),
        "matmul": (lambda x, y: ad.sum_(ad.matmul(x, ad.transpose(y))), [a, b]),
        "exp": (lambda x: ad.sum_(ad.exp(x)), [a]),
        "log": (lambda x: ad.sum_(ad.log(x)), [pos]),
        "sigmoid": (lambda x: ad.sum_(ad.sigmoid(x)), [a]),
        "softplus": (lambda x: ad.sum_(ad.softplus(x)), [a]),
        "softmax": (lambda x, y: ad.sum_(ad.mul(ad.softmax(x), y)), [a, b]),
        "layer_norm": (lambda x, y: ad.sum_(ad.mul(ad.layer_norm(x, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4))), y)), [a, b]),
    }
    worst = 0.0
    for name, (f, inputs) in ops.items():
        rel = max(r["max_rel_err"] for r in ad.grad_check(f, inputs))
        worst = max(worst, rel)
        if rel >= 1e-4:
            return False, f"{name}: relative error {rel:.2e}"
    cfg = ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16, encoder_len=8, label_len=4, pred_len=2)
    model = BurstInformer(cfg, seed=seed)
    ev = rng.normal(size=(2, 8))
    ed = rng.integers(0, 20, size=(2, 8)).astype(float)
    y = rng.normal(size=(2, 2))
    yp = np.array([[1.0, 0.0], [0.0, 0.0]])
    w = model.params["head.delta.w"].data

    def loss(wt):
        model.params["head.delta.w"] = wt
        out = model(ev, ed, ev[:, -4:], ed[:, -4:])
        return composite_loss(out, y, yp, cfg, pos_weight=3.0)

    with ad.compute_dtype(np.float64):
        rel = ad.grad_check(loss, [w])[0]["max_rel_err"]
    if rel >= 1e-3:
        return False, f"composite loss: relative error {rel:.2e}"
    return True, f"{len(ops)} ops worst {worst:.1e}, end-to-end {rel:.1e}"


def suite_attention(n_cases: int = 20, seed: int = 0):
    rng = np.random.default_rng(seed)
    for case in range(n_cases):
        lq = int(rng.integers(2, 24))
        lk = int(rng.integers(2, 24))
        dk = int(rng.integers(1, 9))
        q, k, v = (rng.normal(size=s) for s in ((lq, dk), (lk, dk), (lk, dk)))
        with ad.compute_dtype(np.float64):
            full = probsparse_attention(q, k, v, u=lq).data
        ref, _ = naive_probsparse(q, k, v, lq)
        if np.max(np.abs(full - ref)) > 1e-10:
            return False, f"case {case}: u=L_Q deviates from full attention"
        u = num_selected(lq, 1.0)
        with ad.compute_dtype(np.float64):
            got = probsparse_attention(q, k, v, u=u).data
        ref, _ = naive_probsparse(q, k, v, u)
        if np.max(np.abs(got - ref)) > 1e-10:
            return False, f"case {case}: sparse output deviates"
    return True, f"{n_cases} shapes within 1e-10"


SUITES = {"bursts": suite_bursts, "gradients": suite_gradients, "attention": suite_attention}


def run_all() -> dict[str, tuple[bool, str]]:
    results = {}
    for name, fn in SUITES.items():
        try:
            results[name] = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            results[name] = (False, f"{type(exc).__name__}: {exc}")
    return results
