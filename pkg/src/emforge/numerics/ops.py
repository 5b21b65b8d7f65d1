"""Differentiable tensor operations.

Every op computes its forward value with numpy and registers a
vector-Jacobian product on the active tape. Reductions run along fixed axes
so results never depend on how many rows share a call.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tape import record
from .tensor import Tensor, check_finite

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor.wrap(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    x, y = a.data, b.data
    return record(x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    x, y = a.data, b.data
    out = x / y

    def vjp(g):
        return _unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)

    return record(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise ValueError("log of non-positive value")
    return record(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with p-ascending accumulation (c += a[:, p] * b[p, :]).

    Bitwise identical to the textbook triple loop; slow, used as a reference
    and when exact ordering matters more than speed.
    """
    k = a.shape[-1]
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(shape, dtype=np.result_type(a, b))
    for p in range(k):
        out += a[..., :, p : p + 1] * b[..., p : p + 1, :]
    return out


def _mm(kernel: str):
    if kernel == "ordered":
        return ordered_matmul
    if kernel == "blas":
        return np.matmul
    raise ValueError(f"unknown matmul kernel {kernel!r}")


def matmul(a: Tensor, b: Tensor, kernel: str = "ordered") -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    ``kernel="ordered"`` accumulates the inner index in ascending order;
    ``kernel="blas"`` delegates to BLAS, which is deterministic for a fixed
    shape and per-row independent of the row count but uses its own
    (FMA, blocked) inner order.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    mm = _mm(kernel)
    x, y = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(mm(g, _swap(y)), x.shape)
        if x.ndim > 2 and y.ndim == 2:
            lead = x.reshape(-1, x.shape[-1])
            gb = mm(lead.T, g.reshape(-1, g.shape[-1]))
        else:
            gb = _unbroadcast(mm(_swap(x), g), y.shape)
        return ga, gb

    return record(mm(x, y), (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return record(out, (a,), lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims) / n)
    return record(out, (a,), lambda g: (_expand(g / n, shape, axis, keepdims).copy(),))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = np.exp(x - m).sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def vjp(g):
        p = np.exp(x - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * p,)

    return record(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction; ``mask`` False entries get probability 0."""
    x = a.data
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    check_finite(x if mask is None else x[np.broadcast_to(mask, x.shape)], "softmax input")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("softmax row has no admissible entries")
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit population variance, then scale-shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gamma.data
    out = xhat * gv + beta.data

    def vjp(g):
        gx_hat = g * gv
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out, (x, gamma, beta), vjp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise ValueError("cannot normalize a zero vector")
    out = x / norm

    def vjp(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------

def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; gradients scatter-add back in index order."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    axis = axis % a.ndim
    # distinct indices never collide, so plain assignment equals the scatter-add
    unique = idx.ndim == 1 and len(np.unique(idx)) == len(idx)

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        rows = np.moveaxis(g, axis, 0).reshape((-1,) + moved.shape[1:])
        if unique:
            moved[idx] = rows
        else:
            np.add.at(moved, idx.reshape(-1), rows)
        return (out,)

    return record(np.take(a.data, idx, axis=axis), (a,), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    return take(table, ids, axis=0)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError("dtype mismatch in concat")
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor.wrap(a.data)
