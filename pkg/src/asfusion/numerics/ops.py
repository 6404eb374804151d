"""Differentiable kernels.

Every function accepts Tensors or plain arrays and returns a Tensor. When a
:class:`Tape` is active and an input requires gradients, the backward rule is
recorded on it.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .autodiff import Tensor, as_tensor, record


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class EmptyKeyError(ValueError):
    """Attention was asked to run with no keys (every sensor unavailable)."""


# --------------------------------------------------------------------------
# instrumentation


@dataclass
class OpCounter:
    score_evals: int = 0
    mlp_mult_adds: int = 0


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar(
    "op_counter", default=None
)


class counting:
    """Route exact operation counts from the kernels into ``counter``."""

    def __init__(self, counter: OpCounter):
        self.counter = counter

    def __enter__(self) -> OpCounter:
        self._token = _counter.set(self.counter)
        return self.counter

    def __exit__(self, *exc):
        _counter.reset(self._token)


# --------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def gelu(x) -> Tensor:
    """Exact GeLU, x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = (xd * cdf).astype(xd.dtype)

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return record(out, (x,), vjp, "gelu")


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return record(
        np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes"
    )


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return record(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return record(np.stack([x.data for x in xs], axis=axis), xs, vjp, "stack")


def take(x, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    idx = np.asarray(idx)

    def vjp(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0) if idx.ndim else g)
        return (full,)

    return record(np.take(x.data, idx, axis=axis), (x,), vjp, "take")


# --------------------------------------------------------------------------
# reductions


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(x.data.sum(axis=axis)), (x,), vjp, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / float(n))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), vjp, "matmul")


def linear(x, w, b=None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b[out]). Counted as MLP multiply-adds."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    c = _counter.get()
    if c is not None:
        c.mlp_mult_adds += x2.shape[0] * w.shape[0] * w.shape[1]
    out = out.reshape(lead + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, vjp, "linear")


# --------------------------------------------------------------------------
# normalization and attention primitives


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine params {gamma.shape} do not match width {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out, (x, gamma, beta), vjp, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (x,), vjp, "softmax")


ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def multi_head_cross_attention(q, kv, params, n_h: int, value=None):
    """Scaled dot-product cross-attention with learned projections.

    ``q`` is [..., Nq, C] and ``kv`` is [..., Nk, C]; leading dimensions
    broadcast. ``params`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to tensors.
    Returns ``(out[..., Nq, C], scores[..., n_h, Nq, Nk])``; scores are plain
    arrays of attention weights. ``value`` (same shape as ``kv``) overrides
    the value input when keys carry extra tags.
    """
    q, kv = as_tensor(q), as_tensor(kv)
    value = kv if value is None else as_tensor(value)
    if value.shape != kv.shape:
        raise DimensionError(f"value shape {value.shape} != key shape {kv.shape}")
    c = q.shape[-1]
    if c % n_h != 0:
        raise ConfigurationError(f"channel width {c} is not divisible by {n_h} heads")
    if kv.shape[-2] == 0:
        raise EmptyKeyError("cross-attention received zero keys")
    if kv.shape[-1] != c:
        raise DimensionError(f"query width {c} != key width {kv.shape[-1]}")
    d = c // n_h
    nq, nk = q.shape[-2], kv.shape[-2]

    def heads(x, n):
        x = reshape(x, x.shape[:-1] + (n_h, d))  # [..., n, h, d]
        return swapaxes(x, -2, -3)  # [..., h, n, d]

    qh = heads(linear(q, params["wq"], params["bq"]), nq)
    kh = heads(linear(kv, params["wk"], params["bk"]), nk)
    vh = heads(linear(value, params["wv"], params["bv"]), nk)
    logits = scale(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d))
    attn = softmax(logits, axis=-1)
    ctx = matmul(attn, vh)  # [..., h, Nq, d]
    ctx = swapaxes(ctx, -2, -3)
    ctx = reshape(ctx, ctx.shape[:-2] + (c,))
    out = linear(ctx, params["wo"], params["bo"])

    counter = _counter.get()
    if counter is not None:
        batch = int(np.prod(attn.shape[:-3], dtype=np.int64))
        counter.score_evals += batch * nq * nk
    return out, attn.data


# --------------------------------------------------------------------------
# convolution support


def neighborhood(x, k: int = 3) -> Tensor:
    """Zero-padded k x k neighborhoods: [B, H, W, C] -> [B, H, W, k*k*C]."""
    x = as_tensor(x)
    if k % 2 != 1:
        raise ConfigurationError("neighborhood size must be odd")
    r = k // 2
    b, h, w, c = x.shape
    padded = np.zeros((b, h + 2 * r, w + 2 * r, c), dtype=x.dtype)
    padded[:, r : r + h, r : r + w] = x.data
    cols = [padded[:, i : i + h, j : j + w] for i in range(k) for j in range(k)]
    out = np.concatenate(cols, axis=-1)

    def vjp(g):
        gp = np.zeros_like(padded)
        for n, (i, j) in enumerate((i, j) for i in range(k) for j in range(k)):
            gp[:, i : i + h, j : j + w] += g[..., n * c : (n + 1) * c]
        return (gp[:, r : r + h, r : r + w],)

    return record(out, (x,), vjp, "neighborhood")


# --------------------------------------------------------------------------
# fused losses


def focal_loss(p, target, alpha: float = 0.25, gamma: float = 2.0, weight=None, eps: float = 1e-7) -> Tensor:
    """Summed binary focal loss on probabilities.

    ``-alpha_t (1 - p_t)^gamma log(p_t)`` per element, optionally weighted
    (weight 0 drops an element). Probabilities are clamped to [eps, 1 - eps].
    """
    p = as_tensor(p)
    t = np.asarray(target, dtype=p.dtype)
    w = np.ones_like(p.data) if weight is None else np.asarray(weight, dtype=p.dtype)
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    pt = np.where(t > 0.5, pc, 1.0 - pc)
    at = np.where(t > 0.5, alpha, 1.0 - alpha)
    one_m = 1.0 - pt
    logpt = np.log(pt)
    per = -at * one_m**gamma * logpt
    out = np.asarray((w * per).sum(), dtype=p.dtype)

    def vjp(g):
        # d/dpt of -(1-pt)^gamma log pt
        if gamma == 0:
            dpt = -1.0 / pt
        else:
            dpt = gamma * one_m ** (gamma - 1.0) * logpt - one_m**gamma / pt
        dp = np.where(t > 0.5, dpt, -dpt) * at * w * inside
        return (g * dp,)

    return record(out, (p,), vjp, "focal_loss")


def smooth_l1(pred, target, beta: float = 1.0, weight=None) -> Tensor:
    """Summed smooth-L1: 0.5 d^2 / beta where |d| < beta, else |d| - 0.5 beta."""
    pred = as_tensor(pred)
    tgt = np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise DimensionError(f"smooth_l1 shapes differ: {pred.shape} vs {tgt.shape}")
    w = np.ones_like(pred.data) if weight is None else np.broadcast_to(
        np.asarray(weight, dtype=pred.dtype), pred.shape
    )
    d = pred.data - tgt
    ad = np.abs(d)
    small = ad < beta
    per = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = np.asarray((w * per).sum(), dtype=pred.dtype)

    def vjp(g):
        return (g * w * np.where(small, d / beta, np.sign(d)),)

    return record(out, (pred,), vjp, "smooth_l1")
