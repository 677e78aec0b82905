"""Burst-aware encoder/decoder forecaster with ProbSparse self-attention.

On top of a generative-decoder transformer the model adds three switchable
pieces:

* a burst-distance embedding, ``linear(log(1 + ticks since last burst))``,
  summed into the input embedding;
* two extra output heads, a per-step burst probability (sigmoid) and a
  non-negative burst offset (softplus), combined as
  ``combined = base + burst_prob * delta``;
* an asymmetric training loss that weights squared errors at burst steps by
  ``1 + gamma``, plus weighted BCE on the probability head and MAE at burst
  steps, each term scaled by 0.33.

All tensors are batched: values ``(B, L)``, features ``(B, L, d_model)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .burst_detect import DEFAULT_DISTANCE_CAP, log_distance

__all__ = [
    "ModelConfig",
    "ModelOutput",
    "BurstInformer",
    "desk_config",
    "paper_config",
    "num_selected",
    "sparsity_measure",
    "select_top_queries",
    "causal_query_mask",
    "probsparse_attention",
    "full_attention",
    "positional_encoding",
    "embed",
    "encoder_forward",
    "decoder_forward",
    "decoder_inputs",
    "heads",
    "composite_loss",
    "forward",
]


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the burst-aware forecaster.

    ``value_embedding`` is ``"linear"`` (per-step projection of the scalar) or
    ``"conv3"`` (width-3 causal window).  ``sampled_sparsity`` estimates the
    query sparsity on a random key subset instead of all keys.
    ``asym_gating="window"`` applies the burst weight to every step of a window
    that contains a burst instead of only to the burst steps.
    """

    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    d_ff: int = 0
    encoder_len: int = 128
    label_len: int = 64
    pred_len: int = 1
    sampling_factor: float = 5.0
    gamma: float = 5.0
    enable_burst_embed: bool = True
    enable_burst_heads: bool = True
    enable_asym_loss: bool = True
    value_embedding: str = "linear"
    sampled_sparsity: bool = False
    asym_gating: str = "step"
    loss_weight: float = 0.33

    def __post_init__(self):
        if self.d_ff <= 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.label_len > self.encoder_len:
            raise ValueError("label_len must not exceed encoder_len")
        if self.pred_len < 1 or self.encoder_len < 1 or self.label_len < 0:
            raise ValueError("invalid window geometry")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")
        if self.value_embedding not in ("linear", "conv3"):
            raise ValueError(f"unknown value_embedding {self.value_embedding!r}")
        if self.asym_gating not in ("step", "window"):
            raise ValueError(f"unknown asym_gating {self.asym_gating!r}")
        if self.gamma < 0 or self.sampling_factor <= 0:
            raise ValueError("gamma must be >= 0 and sampling_factor > 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dec_len(self) -> int:
        return self.label_len + self.pred_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_(self, **kw) -> ModelConfig:
        return replace(self, **kw)


def desk_config(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def paper_config(**kw) -> ModelConfig:
    return ModelConfig(**{"d_model": 512, "n_heads": 8, **kw})


@dataclass
class ModelOutput:
    base: Tensor
    burst_prob: Tensor
    delta: Tensor
    combined: Tensor


# ---------------------------------------------------------------------------
# ProbSparse attention


def num_selected(length: int, factor: float) -> int:
    """Number of active queries ``ceil(c * ln L)`` clamped to ``[1, L]``."""
    return int(min(length, max(1, math.ceil(factor * math.log(length))))) if length > 1 else 1


def sparsity_measure(q: np.ndarray, k: np.ndarray, causal: bool = False, key_idx=None) -> np.ndarray:
    """Max-minus-mean of scaled query-key scores for every query.

    Under ``causal`` only keys at positions <= the query position count.
    ``key_idx`` restricts the measure to a subset of keys (sampled variant).
    """
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    lq, lk = scores.shape[-2], scores.shape[-1]
    if key_idx is not None:
        scores = scores[..., key_idx]
        pos = np.asarray(key_idx)
    else:
        pos = np.arange(lk)
    if not causal:
        return scores.max(axis=-1) - scores.mean(axis=-1)
    allowed = pos[None, :] <= np.arange(lq)[:, None]
    count = allowed.sum(axis=-1)
    masked = np.where(allowed, scores, -np.inf)
    top = masked.max(axis=-1)
    avg = np.where(allowed, scores, 0.0).sum(axis=-1) / np.maximum(count, 1)
    return np.where(count > 0, top - avg, -np.inf)


def select_top_queries(m: np.ndarray, u: int) -> np.ndarray:
    """Indices of the ``u`` largest entries along the last axis, ascending.

    Ties go to the lower index, so the set for ``u`` is contained in the set for any larger ``u``.
    """
    order = np.argsort(-m, axis=-1, kind="stable")[..., :u]
    return np.sort(order, axis=-1)


def causal_query_mask(m: np.ndarray, u: int) -> np.ndarray:
    """Prefix-causal Top-u: query i is active iff it ranks in the top ``u`` among queries ``0..i``.

    A global Top-u would let a later query push an earlier one out of the
    active set; ranking within the prefix keeps every decision causal.
    """
    lq = m.shape[-1]
    earlier = np.tril(np.ones((lq, lq), dtype=bool), k=-1)  # [i, j]: j < i
    ahead = (m[..., None, :] >= m[..., :, None]) & earlier
    return ahead.sum(axis=-1) < u


def _mean_matrix(lq: int, lk: int, causal: bool) -> np.ndarray:
    if not causal:
        return np.full((lq, lk), 1.0 / lk)
    tri = np.tril(np.ones((lq, lk)))
    return tri / tri.sum(axis=1, keepdims=True)


def _causal_mask(lq: int, lk: int) -> np.ndarray:
    return np.triu(np.ones((lq, lk), dtype=bool), k=1)


def full_attention(q, k, v, causal: bool = False) -> Tensor:
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    if causal:
        scores = ad.masked_fill(scores, _causal_mask(q.shape[-2], k.shape[-2]), -np.inf)
    return ad.matmul(ad.softmax(scores), v)


def probsparse_attention(q, k, v, u: int, causal: bool = False, key_idx=None) -> Tensor:
    """ProbSparse attention over ``(..., L, d_k)`` inputs.

    The ``u`` queries with the largest sparsity measure attend with softmax;
    the rest output the mean of ``V`` (the running mean under ``causal``).
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ad.ShapeError(f"probsparse_attention: incompatible Q {q.shape}, K {k.shape}, V {v.shape}")
    lq, lk = q.shape[-2], k.shape[-2]
    if u < 1:
        raise ValueError("u must be at least 1")
    u = min(u, lq)
    if causal and lq != lk:
        raise ad.ShapeError("causal attention needs equal query and key lengths")
    m = sparsity_measure(q.data, k.data, causal=causal, key_idx=key_idx)
    fallback = ad.matmul(Tensor(_mean_matrix(lq, lk, causal)), v)
    if causal:
        active = causal_query_mask(m, u)
        attended = full_attention(q, k, v, causal=True)
        cond = np.broadcast_to(active[..., None], attended.shape)
        return ad.where(cond, attended, fallback)
    idx = select_top_queries(m, u)
    qbar = ad.gather_rows(q, idx)
    scores = ad.scale(ad.matmul(qbar, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    attended = ad.matmul(ad.softmax(scores), v)
    return ad.scatter_rows(fallback, idx, attended)


# ---------------------------------------------------------------------------
# layers


def positional_encoding(positions, d_model: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    div = np.exp(-math.log(10000.0) * i / d_model)
    pe = np.zeros((pos.shape[0], d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d_model // 2]
    return pe


def _linear(x, params, prefix) -> Tensor:
    return ad.add(ad.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def _value_features(values: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return values[..., None]
    lag1 = np.concatenate([np.zeros_like(values[..., :1]), values[..., :-1]], axis=-1)
    lag2 = np.concatenate([np.zeros_like(values[..., :2]), values[..., :-2]], axis=-1)
    return np.stack([values, lag1, lag2], axis=-1)


# log1p of the capped distance, divided by this, lies in [0, 1]; unscaled it
# reaches ~9 and swamps the unit-scale value embedding at initialization
DISTANCE_SCALE = math.log1p(DEFAULT_DISTANCE_CAP)


def embed(values, positions, burst_dist, cfg: ModelConfig, params) -> Tensor:
    """Value projection + sinusoidal position + (optionally) burst-distance projection.

    The distance feature is ``log(1 + d) / DISTANCE_SCALE``, a constant
    rescaling of the log distance.
    """
    values = np.asarray(values, dtype=np.float64)
    burst_dist = np.asarray(burst_dist)
    positions = np.asarray(positions)
    if values.shape != burst_dist.shape or values.shape[-1] != positions.shape[-1]:
        raise ad.ShapeError(
            f"embed: length mismatch values {values.shape}, burst_dist {burst_dist.shape}, "
            f"positions {positions.shape}"
        )
    out = _linear(Tensor(_value_features(values, cfg.value_embedding)), params, "embed.value")
    out = ad.add(out, Tensor(positional_encoding(positions, cfg.d_model)))
    if cfg.enable_burst_embed:
        feat = Tensor((log_distance(burst_dist) / DISTANCE_SCALE)[..., None])
        out = ad.add(out, _linear(feat, params, "embed.burst"))
    return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return ad.transpose(ad.reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, length, h * dk))


def _attention_block(x_q, x_kv, params, prefix, cfg: ModelConfig, mode: str, rng=None) -> Tensor:
    q = _split_heads(_linear(x_q, params, prefix + ".q"), cfg.n_heads)
    k = _split_heads(_linear(x_kv, params, prefix + ".k"), cfg.n_heads)
    v = _split_heads(_linear(x_kv, params, prefix + ".v"), cfg.n_heads)
    if mode == "full":
        att = full_attention(q, k, v)
    else:
        lq, lk = q.shape[-2], k.shape[-2]
        key_idx = None
        if cfg.sampled_sparsity:
            rng = rng if rng is not None else np.random.default_rng(0)
            n_keys = num_selected(lk, cfg.sampling_factor)
            key_idx = np.sort(rng.choice(lk, size=n_keys, replace=False))
        att = probsparse_attention(
            q, k, v, num_selected(lq, cfg.sampling_factor), causal=(mode == "causal"), key_idx=key_idx
        )
    return _linear(_merge_heads(att), params, prefix + ".o")


def _ffn(x, params, prefix) -> Tensor:
    return _linear(ad.relu(_linear(x, params, prefix + ".ff1")), params, prefix + ".ff2")


def _norm(x, params, prefix) -> Tensor:
    return ad.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def encoder_forward(x: Tensor, cfg: ModelConfig, params, rng=None) -> Tensor:
    """Stack of {sparse self-attention, add & norm, ReLU feed-forward, add & norm}."""
    for layer in range(cfg.n_enc_layers):
        p = f"enc.{layer}"
        x = _norm(ad.add(x, _attention_block(x, x, params, p + ".attn", cfg, "sparse", rng)), params, p + ".ln1")
        x = _norm(ad.add(x, _ffn(x, params, p)), params, p + ".ln2")
    return x


def decoder_forward(dec_in: Tensor, enc_out: Tensor, cfg: ModelConfig, params, rng=None) -> Tensor:
    """Causal sparse self-attention, cross-attention to the encoder, feed-forward; last ``pred_len`` rows."""
    x = dec_in
    for layer in range(cfg.n_dec_layers):
        p = f"dec.{layer}"
        x = _norm(ad.add(x, _attention_block(x, x, params, p + ".self", cfg, "causal", rng)), params, p + ".ln1")
        x = _norm(ad.add(x, _attention_block(x, enc_out, params, p + ".cross", cfg, "full")), params, p + ".ln2")
        x = _norm(ad.add(x, _ffn(x, params, p)), params, p + ".ln3")
    length = x.shape[-2]
    return ad.slice_(x, (Ellipsis, slice(length - cfg.pred_len, length), slice(None)))


def heads(dec_feat: Tensor, cfg: ModelConfig, params) -> ModelOutput:
    shape = dec_feat.shape[:-1]
    base = ad.reshape(_linear(dec_feat, params, "head.base"), shape)
    if not cfg.enable_burst_heads:
        zeros = Tensor(np.zeros(shape))
        return ModelOutput(base, zeros, Tensor(np.zeros(shape)), base)
    prob = ad.sigmoid(ad.reshape(_linear(dec_feat, params, "head.prob"), shape))
    delta = ad.softplus(ad.reshape(_linear(dec_feat, params, "head.delta"), shape))
    return ModelOutput(base, prob, delta, ad.add(base, ad.mul(prob, delta)))


def composite_loss(out: ModelOutput, y, y_burst, cfg: ModelConfig, pos_weight: float = 1.0, parts=None) -> Tensor:
    """Training objective.

    Without burst heads this is the (asymmetric) squared error alone; with them
    it is ``w * (L_asym + L_bce + L_mae)`` with ``w = cfg.loss_weight``.  BCE and
    MAE are pooled over every step of the batch.  ``parts``, if a dict, receives
    the individual terms.
    """
    y = np.asarray(y, dtype=np.float64)
    yp = np.asarray(y_burst, dtype=np.float64)
    if y.shape != out.combined.shape or yp.shape != y.shape:
        raise ad.ShapeError(f"composite_loss: targets {y.shape}/{yp.shape} vs forecasts {out.combined.shape}")
    gamma = cfg.gamma if cfg.enable_asym_loss else 0.0
    if cfg.asym_gating == "window":
        has_burst = yp.max(axis=-1, keepdims=True)
        weight = 1.0 + gamma * np.broadcast_to(has_burst, yp.shape)
    else:
        weight = 1.0 + gamma * yp
    err = ad.sub(out.combined, Tensor(y))
    l_asym = ad.mean(ad.mul(Tensor(weight), ad.mul(err, err)))
    if parts is not None:
        parts["asym"] = l_asym.item()
    if not cfg.enable_burst_heads:
        return l_asym

    p = ad.clip(out.burst_prob, 1e-7, 1.0 - 1e-7)
    bce_pos = ad.mul(Tensor(pos_weight * yp), ad.neg(ad.log(p)))
    bce_neg = ad.mul(Tensor(1.0 - yp), ad.neg(ad.log(ad.sub(1.0, p))))
    l_bce = ad.mean(ad.add(bce_pos, bce_neg))
    n_burst = float(yp.sum())
    if n_burst > 0:
        l_mae = ad.scale(ad.sum_(ad.mul(Tensor(yp), ad.abs_(err))), 1.0 / n_burst)
    else:
        l_mae = Tensor(0.0)
    if parts is not None:
        parts["bce"] = l_bce.item()
        parts["mae"] = l_mae.item()
    w = cfg.loss_weight
    return ad.add(ad.add(ad.scale(l_asym, w), ad.scale(l_bce, w)), ad.scale(l_mae, w))


def decoder_inputs(label_vals, label_dist, pred_len: int):
    """Known label rows followed by ``pred_len`` zero placeholders (values and distances)."""
    label_vals = np.asarray(label_vals, dtype=np.float64)
    label_dist = np.asarray(label_dist)
    pad = label_vals.shape[:-1] + (pred_len,)
    vals = np.concatenate([label_vals, np.zeros(pad)], axis=-1)
    dist = np.concatenate([label_dist, np.zeros(pad, dtype=label_dist.dtype)], axis=-1)
    return vals, dist


# ---------------------------------------------------------------------------
# model


class BurstInformer:
    """Parameter container plus the forward pass.

    Every parameter exists regardless of the ablation switches so checkpoints
    share one layout; ``parameters(active_only=True)`` lists the ones the
    current switches actually use.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(seed)
        self._sample_rng = np.random.default_rng([seed, 1])
        d, dff = cfg.d_model, cfg.d_ff
        n_val = 1 if cfg.value_embedding == "linear" else 3
        self._add_linear("embed.value", n_val, d)
        self._add_linear("embed.burst", 1, d)
        for layer in range(cfg.n_enc_layers):
            p = f"enc.{layer}"
            for proj in "qkvo":
                self._add_linear(f"{p}.attn.{proj}", d, d)
            self._add_norm(p + ".ln1", d)
            self._add_linear(p + ".ff1", d, dff)
            self._add_linear(p + ".ff2", dff, d)
            self._add_norm(p + ".ln2", d)
        for layer in range(cfg.n_dec_layers):
            p = f"dec.{layer}"
            for proj in "qkvo":
                self._add_linear(f"{p}.self.{proj}", d, d)
            self._add_norm(p + ".ln1", d)
            for proj in "qkvo":
                self._add_linear(f"{p}.cross.{proj}", d, d)
            self._add_norm(p + ".ln2", d)
            self._add_linear(p + ".ff1", d, dff)
            self._add_linear(p + ".ff2", dff, d)
            self._add_norm(p + ".ln3", d)
        for head in ("base", "prob", "delta"):
            self._add_linear(f"head.{head}", d, 1)

    def _add(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = Parameter(data, name)

    def _add_linear(self, name, fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        self._add(name + ".w", self._rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self._add(name + ".b", self._rng.uniform(-bound, bound, size=(fan_out,)))

    def _add_norm(self, name, d):
        self._add(name + ".g", np.ones(d))
        self._add(name + ".b", np.zeros(d))

    def parameters(self, active_only: bool = False) -> list[Parameter]:
        if not active_only:
            return list(self.params.values())
        skip = []
        if not self.cfg.enable_burst_embed:
            skip.append("embed.burst.")
        if not self.cfg.enable_burst_heads:
            skip += ["head.prob.", "head.delta."]
        return [p for n, p in self.params.items() if not any(n.startswith(s) for s in skip)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = [n for n in self.params if n not in state]
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        for n, p in self.params.items():
            arr = np.asarray(state[n], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"parameter {n}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.adam_m = p.adam_v = None

    def __call__(self, enc_vals, enc_dist, label_vals, label_dist) -> ModelOutput:
        return forward(self, enc_vals, enc_dist, label_vals, label_dist)


def forward(model: BurstInformer, enc_vals, enc_dist, label_vals, label_dist) -> ModelOutput:
    """Embed -> encoder -> decoder -> heads for a batch ``(B, encoder_len)`` / ``(B, label_len)``.

    Unbatched 1-D inputs are accepted and treated as a batch of one.
    """
    cfg, params = model.cfg, model.params
    enc_vals = np.asarray(enc_vals, dtype=np.float64)
    if enc_vals.ndim == 1:
        return forward(
            model, enc_vals[None], np.asarray(enc_dist)[None], np.asarray(label_vals)[None], np.asarray(label_dist)[None]
        )
    if enc_vals.shape[-1] != cfg.encoder_len or np.asarray(label_vals).shape[-1] != cfg.label_len:
        raise ad.ShapeError(
            f"window lengths {enc_vals.shape[-1]}/{np.asarray(label_vals).shape[-1]} "
            f"do not match config {cfg.encoder_len}/{cfg.label_len}"
        )
    rng = model._sample_rng if cfg.sampled_sparsity else None
    enc_pos = np.arange(cfg.encoder_len)
    dec_pos = cfg.encoder_len - cfg.label_len + np.arange(cfg.dec_len)
    dec_vals, dec_dist = decoder_inputs(label_vals, label_dist, cfg.pred_len)
    enc = encoder_forward(embed(enc_vals, enc_pos, enc_dist, cfg, params), cfg, params, rng)
    dec = decoder_forward(embed(dec_vals, dec_pos, dec_dist, cfg, params), enc, cfg, params, rng)
    return heads(dec, cfg, params)
