"""Reverse-mode differentiable array ops on numpy, plus gradient checking.

A Tensor wraps an ndarray and remembers how it was produced; backward()
walks the tape in reverse topological order and accumulates gradients into
the leaves. The op set is exactly what the model needs (linear algebra,
layer norm, masked softmax, same-padded conv1d, embedding lookup, row
gather/scatter, cross entropy); there is no broadcasting cleverness beyond
numpy's own, and no in-place mutation of any input array.

Everything is deterministic: no op consumes randomness, reductions use
numpy's fixed evaluation order, and np.add.at handles duplicate indices
reproducibly. Training runs in float32; gradient verification casts
parameters to float64 first (see check_gradients).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Callable

import numpy as np
from scipy.special import erf

from .validation import ValidationError

logger = logging.getLogger(__name__)

# Python floats, not numpy scalars: under NEP 50 a numpy float64 scalar
# would silently upcast every float32 activation it touches.
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValidationError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _ensure_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _ensure_pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a binary op's operands, keeping Python scalars weak (NEP 50).

    np.asarray(2.0) mints a 0-d float64 array, and 0-d arrays promote like
    any other array — multiplying one into a float32 activation silently
    upcasts the whole graph to float64. Genuine Python scalars must instead
    adopt the dtype numpy's weak-scalar rules assign (np.result_type), so a
    float32 network stays float32 end to end. Numpy scalar types (np.float64
    and friends) are deliberately left strong, matching numpy itself.
    """
    if type(b) in (bool, int, float) and isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=np.result_type(a.data, b)))
    if type(a) in (bool, int, float) and isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=np.result_type(a, b.data))), b
    return _ensure_tensor(a), _ensure_tensor(b)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _bwd=bwd)
    return Tensor(data)


# ---------------------------------------------------------------- basic ops


def add(a, b) -> Tensor:
    a, b = _ensure_pair(a, b)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _ensure_pair(a, b)
    data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _ensure_tensor(a)

    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _ensure_pair(a, b)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValidationError("matmul operands must be at least 2-d")
    data = a.data @ b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(data, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = _ensure_tensor(a)

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _ensure_tensor(a)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    a = _ensure_tensor(a)
    data = a.data[key].copy()

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        _accumulate(a, ga)

    return _make(data, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_ensure_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(data, tuple(tensors), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = _ensure_tensor(a)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape), (a,), bwd)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(data, (a,), bwd)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a) -> Tensor:
    a = _ensure_tensor(a)
    y = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * y)

    return _make(y, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _ensure_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def bwd(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), bwd)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf-based derivative."""
    a = _ensure_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = (x * phi).astype(x.dtype, copy=False)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (phi + x * pdf))

    return _make(y, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    a, gain, bias = _ensure_tensor(a), _ensure_tensor(gain), _ensure_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(a, dx)

    return _make(y, (a, gain, bias), bwd)


def masked_softmax(scores, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with boolean mask; masked entries are
    exactly zero in the output (not merely small), which downstream
    isolation guarantees rely on.

    mask must broadcast against scores and every row must allow at least
    one key.
    """
    scores = _ensure_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValidationError("attention mask has a row with no allowed keys")
    neg = np.array(-np.inf, dtype=scores.dtype)
    s = np.where(mask, scores.data, neg)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    e = np.where(mask, e, 0.0).astype(scores.dtype, copy=False)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(scores, p * (g - dot))

    return _make(p, (scores,), bwd)


def conv1d_same(x, w, b) -> Tensor:
    """Same-padded 1-d convolution over the middle axis.

    x is (B, L, Cin), w is (K, Cin, Cout), b is (Cout,). Zero padding keeps
    the output length L.
    """
    x, w, b = _ensure_tensor(x), _ensure_tensor(w), _ensure_tensor(b)
    if x.ndim != 3 or w.ndim != 3:
        raise ValidationError(f"conv1d_same expects 3-d x and w, got {x.shape} and {w.shape}")
    if x.shape[2] != w.shape[1]:
        raise ValidationError(f"channel mismatch: x has {x.shape[2]}, w expects {w.shape[1]}")
    B, L, _ = x.shape
    K, _, cout = w.shape
    pad_l = (K - 1) // 2
    pad_r = K - 1 - pad_l
    xp = np.pad(x.data, ((0, 0), (pad_l, pad_r), (0, 0)))
    y = np.broadcast_to(b.data, (B, L, cout)).copy()
    for k in range(K):
        y += xp[:, k : k + L, :] @ w.data[k]

    def bwd(g):
        _accumulate(b, g.sum(axis=(0, 1)))
        g2 = g.reshape(-1, cout)
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp)
        for k in range(K):
            dw[k] = xp[:, k : k + L, :].reshape(-1, x.shape[2]).T @ g2
            dxp[:, k : k + L, :] += g @ w.data[k].T
        _accumulate(w, dw)
        _accumulate(x, dxp[:, pad_l : pad_l + L, :])

    return _make(y, (x, w, b), bwd)


def embedding(table, idx: np.ndarray) -> Tensor:
    """Row lookup table[idx]; idx is a plain integer ndarray."""
    table = _ensure_tensor(table)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValidationError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValidationError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"[{idx.min()}, {idx.max()}]"
        )
    data = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accumulate(table, gt)

    return _make(data, (table,), bwd)


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Select per-batch rows: x (B, N, D), idx (B, K) -> (B, K, D)."""
    x = _ensure_tensor(x)
    idx = np.asarray(idx)
    B = x.shape[0]
    binds = np.arange(B)[:, None]
    data = x.data[binds, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (binds, idx), g)
        _accumulate(x, gx)

    return _make(data, (x,), bwd)


def scatter_rows(values, idx: np.ndarray, n: int) -> Tensor:
    """Place per-batch rows into zeros: values (B, K, D), idx (B, K) -> (B, n, D).

    Indices must be unique within each batch row.
    """
    values = _ensure_tensor(values)
    idx = np.asarray(idx)
    B, _, D = values.shape
    binds = np.arange(B)[:, None]
    data = np.zeros((B, n, D), dtype=values.dtype)
    data[binds, idx] = values.data

    def bwd(g):
        _accumulate(values, g[binds, idx])

    return _make(data, (values,), bwd)


def cross_entropy_mean(logits, targets: np.ndarray) -> Tensor:
    """Mean softmax cross entropy; logits (M, V), integer targets (M,)."""
    logits = _ensure_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ValidationError(
            f"cross entropy expects (M, V) logits and (M,) targets, got {logits.shape}, {targets.shape}"
        )
    M, V = logits.shape
    if M == 0:
        raise ValidationError("cross entropy over an empty batch")
    if targets.min() < 0 or targets.max() >= V:
        raise ValidationError(f"targets out of range [0, {V})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    zs = z - m
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True)) + m
    nll = lse[:, 0] - z[np.arange(M), targets]
    data = np.asarray(nll.mean(), dtype=z.dtype)

    def bwd(g):
        p = np.exp(z - lse)
        p[np.arange(M), targets] -= 1.0
        _accumulate(logits, (g / M) * p)

    return _make(data, (logits,), bwd)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ------------------------------------------------------------- composites


def multi_head_attention(q_in, kv_in, p: dict, heads: int, mask: np.ndarray) -> Tensor:
    """Standard multi-head attention with a static boolean mask.

    q_in (B, Tq, D) queries, kv_in (B, Tk, D) keys/values; p holds wq, bq,
    wk, wv, bv, wo, bo. The key projection is biasless: a key bias shifts
    every score in a softmax row by the same amount, so it is a no-op
    parameter whose zero gradient would only collect finite-difference
    noise. mask is (Tq, Tk) and is broadcast over batch and heads; a masked
    pair receives exactly zero attention weight.
    """
    D = q_in.shape[-1]
    if D % heads != 0:
        raise ValidationError(f"embed dim {D} not divisible by heads {heads}")
    hd = D // heads
    B, Tq = q_in.shape[0], q_in.shape[1]
    Tk = kv_in.shape[1]
    q = linear(q_in, p["wq"], p["bq"])
    k = linear(kv_in, p["wk"])
    v = linear(kv_in, p["wv"], p["bv"])
    qh = transpose(reshape(q, (B, Tq, heads, hd)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (B, Tk, heads, hd)), (0, 2, 1, 3))
    vh = transpose(reshape(v, (B, Tk, heads, hd)), (0, 2, 1, 3))
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    probs = masked_softmax(scores, np.asarray(mask, dtype=bool)[None, None, :, :])
    out = transpose(matmul(probs, vh), (0, 2, 1, 3))
    return linear(reshape(out, (B, Tq, D)), p["wo"], p["bo"])


def mlp_block(x, p: dict) -> Tensor:
    """Two-layer GELU MLP: w1/b1 expand, w2/b2 project back."""
    return linear(gelu(linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def conv1d_residual_block(x, p: dict) -> Tensor:
    """y = proj(x) + conv2(GELU(LN(conv1(x)))); proj is identity when the
    channel count is unchanged, otherwise a 1x1 convolution (per-position
    linear map) with parameters proj_w/proj_b."""
    h = conv1d_same(x, p["conv1_w"], p["conv1_b"])
    h = layer_norm(h, p["ln_g"], p["ln_b"])
    h = gelu(h)
    h = conv1d_same(h, p["conv2_w"], p["conv2_b"])
    if "proj_w" in p:
        shortcut = linear(x, p["proj_w"], p["proj_b"])
    else:
        shortcut = x
    return add(shortcut, h)


# ------------------------------------------------------------- parameters


@dataclasses.dataclass
class Param:
    """A named trainable (or frozen) array plus its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True

    @classmethod
    def create(cls, name: str, value: np.ndarray, trainable: bool = True) -> "Param":
        value = np.asarray(value)
        return cls(name=name, value=value, grad=np.zeros_like(value), trainable=trainable)

    @property
    def size(self) -> int:
        return self.value.size


def make_leaves(params: dict[str, Param], with_grad: bool = True) -> dict[str, Tensor]:
    """Fresh leaf tensors for one forward pass.

    with_grad=False builds constant leaves: the tape is then skipped
    entirely, which is the fast path for inference.
    """
    return {
        name: Tensor(p.value, requires_grad=with_grad and p.trainable)
        for name, p in params.items()
    }


def collect_grads(params: dict[str, Param], leaves: dict[str, Tensor]) -> None:
    """Copy leaf gradients into the Param buffers (zero where untouched)."""
    for name, p in params.items():
        t = leaves[name]
        if t.grad is None:
            p.grad[...] = 0.0
        else:
            p.grad[...] = t.grad


def zero_grads(params: dict[str, Param]) -> None:
    for p in params.values():
        p.grad[...] = 0.0


def params_astype(params: dict[str, Param], dtype) -> dict[str, Param]:
    """Copy of a parameter set in another dtype (used for f64 verification)."""
    out = {}
    for name, p in params.items():
        out[name] = Param(
            name=name,
            value=p.value.astype(dtype),
            grad=np.zeros(p.value.shape, dtype=dtype),
            trainable=p.trainable,
        )
    return out


def global_grad_norm(params: dict[str, Param]) -> float:
    total = 0.0
    for p in params.values():
        if p.trainable:
            g = p.grad.ravel()
            total += float(np.dot(g, g))
    return float(np.sqrt(total))


def check_gradients(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Param],
    epsilon: float | tuple[float, ...] = (1e-5, 1e-4),
    sample_fraction: float = 0.01,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    loss_fn maps a fresh leaf dict to a scalar loss Tensor. For every
    trainable parameter a random subset of entries (at least one) is
    perturbed by +-epsilon and the numeric slope is compared with the
    analytic gradient using rel = |a - n| / max(1e-8, |a| + |n|).
    Returns the worst relative error seen. Run on float64 parameters for
    meaningful tolerances.

    epsilon may be a single step or several; a coordinate's error is the
    best agreement across steps. No single step suits every coordinate:
    where the true derivative is many orders below the loss, cancellation
    noise (|f| * ulp / eps) swamps a small step while a larger one still
    resolves the slope, and high-curvature coordinates need the small step
    instead. Agreement at any step validates the analytic value; a wrong
    gradient cannot match a consistent finite-difference estimate at this
    tolerance by accident.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    epsilons = (epsilon,) if isinstance(epsilon, float) else tuple(epsilon)
    if not epsilons or any(e <= 0 for e in epsilons):
        raise ValidationError(f"epsilon steps must be positive, got {epsilons}")
    leaves = make_leaves(params)
    loss = loss_fn(leaves)
    loss.backward()
    collect_grads(params, leaves)

    worst = 0.0
    worst_at = ""
    for name in sorted(params):
        p = params[name]
        if not p.trainable:
            continue
        k = max(1, int(round(sample_fraction * p.size)))
        k = min(k, p.size)
        flat_idx = rng.choice(p.size, size=k, replace=False)
        for i in flat_idx:
            analytic = float(p.grad.flat[i])
            orig = p.value.flat[i]
            rel = float("inf")
            for eps in epsilons:
                p.value.flat[i] = orig + eps
                f_plus = float(loss_fn(make_leaves(params, with_grad=False)).data)
                p.value.flat[i] = orig - eps
                f_minus = float(loss_fn(make_leaves(params, with_grad=False)).data)
                p.value.flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                rel = min(
                    rel, abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
                )
            if rel > worst:
                worst = rel
                worst_at = f"{name}[{i}]"
    if worst_at:
        logger.debug("check_gradients: worst rel err %.3e at %s", worst, worst_at)
    return worst
