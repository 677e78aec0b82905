"""A small dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays of the current compute dtype (float64 unless
changed with :func:`compute_dtype`).  Every op records its parents and a
backward rule returning one gradient per parent; ``Tensor.backward`` walks
the graph once in reverse topological order and then frees it.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
the shape of one must be a trailing suffix of the other (a bias of shape
``(d,)`` against ``(B, L, d)``, a scalar against anything).  Anything else is
a ``ShapeError`` naming both shapes.  Matmul follows the same rule for its
batch dimensions.

Only leaf tensors (created directly, including :class:`Parameter`) keep
``.grad`` after ``backward``; intermediate gradients are transient.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "ShapeError",
    "GraphError",
    "Tensor",
    "Parameter",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_",
    "sum_",
    "mean",
    "exp",
    "log",
    "sqrt",
    "relu",
    "abs_",
    "clip",
    "max_",
    "softmax",
    "layer_norm",
    "sigmoid",
    "softplus",
    "gather_rows",
    "scatter_rows",
    "masked_fill",
    "where",
    "grad_check",
    "adam_step",
    "no_grad",
    "compute_dtype",
    "get_dtype",
]

_GRAD_ENABLED = True
_DTYPE = np.dtype(np.float64)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def compute_dtype(dtype):
    """Create tensors as ``dtype`` (float32 or float64) inside the block."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported compute dtype {dt}")
    prev = _DTYPE
    _DTYPE = dt
    try:
        yield
    finally:
        _DTYPE = prev


def get_dtype() -> np.dtype:
    return _DTYPE


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        return self.data

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)

    # -- differentiation -----------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self.op == "freed":
            raise GraphError("graph already consumed by a previous backward call")
        if not self.requires_grad:
            raise GraphError("loss is detached: no input requires a gradient")

        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.op = "freed"


class Parameter(Tensor):
    """A named trainable leaf with per-parameter Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_m = None
        self.adam_v = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _broadcast(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return long_
    raise ShapeError(f"{op}: shape mismatch {sa} vs {sb} (only leading-batch broadcast allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a.shape, b.shape, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast(a.shape[:-2], b.shape[:-2], "matmul batch")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2-D input, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    old = a.shape
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, sizes, axis=ax)),
        "concat",
    )


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(np.array(out), (a,), backward, "slice")


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def max_(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx_k, gk, axis=axis)
        return (full,)

    return _make(out, (a,), backward, "max")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a) -> Tensor:
    """``log(1 + e^x)`` in the overflow-safe form ``max(x, 0) + log1p(e^-|x|)``."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def softmax(a) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries get probability 0."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias`` of shape ``(d,)``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# indexing and masking


def _row_index(idx: np.ndarray, d: int) -> np.ndarray:
    return np.broadcast_to(idx[..., None], idx.shape + (d,))


def gather_rows(x, idx) -> Tensor:
    """Pick rows along the second-to-last axis: ``(..., L, d)`` with ``(..., u)`` -> ``(..., u, d)``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather_rows: index batch {idx.shape} does not match input {x.shape}")
    full_idx = _row_index(idx, x.shape[-1])
    out = np.take_along_axis(x.data, full_idx, axis=-2)

    def backward(g):
        full = np.zeros_like(x.data)
        lead = np.indices(idx.shape, sparse=True)
        np.add.at(full, tuple(lead[:-1]) + (idx,), g)
        return (full,)

    return _make(out, (x,), backward, "gather_rows")


def scatter_rows(base, idx, src) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (unique per batch entry) replaced by ``src``."""
    base, src = as_tensor(base), as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if src.shape[:-2] != base.shape[:-2] or src.shape[-1] != base.shape[-1]:
        raise ShapeError(f"scatter_rows: src {src.shape} incompatible with base {base.shape}")
    if idx.shape != src.shape[:-1]:
        raise ShapeError(f"scatter_rows: index shape {idx.shape} does not match src {src.shape}")
    full_idx = _row_index(idx, base.shape[-1])
    out = base.data.copy()
    np.put_along_axis(out, full_idx, src.data, axis=-2)

    def backward(g):
        gb = g.copy()
        np.put_along_axis(gb, full_idx, 0.0, axis=-2)
        return gb, np.take_along_axis(g, full_idx, axis=-2)

    return _make(out, (base, src), backward, "scatter_rows")


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (the causal mask uses -inf)."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    _broadcast(x.shape, mask.shape, "masked_fill")
    if mask.ndim > x.ndim:
        raise ShapeError(f"masked_fill: mask {mask.shape} larger than input {x.shape}")
    out = np.where(mask, value, x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"where: branch shapes differ, {a.shape} vs {b.shape}")
    cond = np.asarray(cond, dtype=bool)
    _broadcast(a.shape, cond.shape, "where")
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
        "where",
    )


# ---------------------------------------------------------------------------
# verification and optimization


def grad_check(f, inputs, step: float = 1e-5) -> list[dict]:
    """Compare reverse-mode gradients of scalar ``f(*tensors)`` against central differences.

    Returns one record per input with the max absolute error and the
    norm-wise relative error ``max|g_ad - g_fd| / max(max|g_fd|, 1e-12)``.
    """
    with compute_dtype(np.float64):
        return _grad_check(f, inputs, step)


def _grad_check(f, inputs, step):
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    out.backward()
    report = []
    for i, arr in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = f(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig - step
            fm = f(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * step)
        abs_err = float(np.max(np.abs(analytic - numeric))) if arr.size else 0.0
        denom = max(float(np.max(np.abs(numeric))) if arr.size else 0.0, 1e-12)
        report.append({"input": i, "max_abs_err": abs_err, "max_rel_err": abs_err / denom})
    return report


def adam_step(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, t: int = 1):
    """One bias-corrected Adam update at step ``t`` (1-based), in place.

    Moments live on each :class:`Parameter`.  Gradients are cleared afterwards.
    """
    b1, b2 = betas
    for p in params:
        if p.grad is None:
            raise GraphError(f"parameter {getattr(p, 'name', '?')!r} has no gradient")
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        if p.adam_m is None:
            p.adam_m = np.zeros_like(p.data)
            p.adam_v = np.zeros_like(p.data)
        p.adam_m = b1 * p.adam_m + (1.0 - b1) * g
        p.adam_v = b2 * p.adam_v + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)
        p.grad = None
    return params
