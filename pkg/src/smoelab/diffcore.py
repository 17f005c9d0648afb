"""Reverse-mode automatic differentiation on flat float64 storage.

Tensors hold C-contiguous row-major float64 arrays. Operations record the
computation graph as tensors are created (each tensor gets a monotonically
increasing node id); `Tensor.backward` replays the reachable part of the
graph in strict reverse creation order, accumulating gradients into every
tensor that requires them. Stochastic operations take an explicit
`numpy.random.Generator`; nothing here touches global RNG state.

Gradient correctness is checked against central finite differences via
`grad_check`, which never trusts the reverse-mode path it is checking.
"""

from __future__ import annotations

import itertools
import os
from contextlib import contextmanager

import numpy as np

from . import _kernels as K
from .errors import ContractError, DimensionError

_ids = itertools.count()
_grad_enabled = [True]
_DEBUG = bool(os.environ.get("SMOELAB_DEBUG"))


class Tensor:
    """A dense float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward on a tensor with no recorded graph")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t.node_id, reverse=True)
        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    prev = _grad_enabled[0]
    _grad_enabled[0] = False
    try:
        yield
    finally:
        _grad_enabled[0] = prev


def _make(op: str, data, parents, backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    record = _grad_enabled[0] and any(p.requires_grad for p in parents)
    t = Tensor(data, requires_grad=record)
    if record:
        t.op = op
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _acc(t: Tensor, g):
    """Accumulate a gradient contribution into t.grad (copy on first write)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _c(a):
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from None

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        _acc(a, _unbroadcast(g * bd, a.shape))
        _acc(b, _unbroadcast(g * ad, b.shape))

    return _make("mul", out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    def bw(g):
        _acc(a, g * s)

    return _make("scale", a.data * s, (a,), bw)


def pow_const(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bw(g):
        _acc(a, g * p * ad ** (p - 1.0))

    return _make("pow", ad**p, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    ok = (
        ad.ndim >= 2
        and ad.ndim == bd.ndim
        and ad.shape[-1] == bd.shape[-2]
        and ad.shape[:-2] == bd.shape[:-2]
    )
    if not ok:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} are incompatible")
    out = ad @ bd

    def bw(g):
        _acc(a, g @ bd.swapaxes(-1, -2))
        _acc(b, ad.swapaxes(-1, -2) @ g)

    return _make("matmul", out, (a, b), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _acc(a, g.transpose(inv))

    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def bw(g):
        _acc(a, g.reshape(orig))

    return _make("reshape", a.data.reshape(shape), (a,), bw)


def narrow(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along the last axis."""

    def bw(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        _acc(a, full)

    return _make("narrow", np.ascontiguousarray(a.data[..., start:stop]), (a,), bw)


def col(a: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor, kept as an (M, 1) column."""
    if a.ndim != 2:
        raise DimensionError(f"col expects a matrix, got shape {a.shape}")
    return narrow(a, j, j + 1)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table; idx may have any shape."""
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {table.shape}")
    idx = np.asarray(idx)
    out = table.data[idx]
    ncol = table.shape[1]

    def bw(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, ncol))
        _acc(table, gt)

    return _make("take_rows", out, (table,), bw)


def scatter_rows(x: Tensor, idx, n_rows: int) -> Tensor:
    """Place rows of x at positions idx of an otherwise-zero (n_rows, C) output.

    idx must not contain duplicates.
    """
    idx = np.asarray(idx)
    out = np.zeros((n_rows, x.shape[1]))
    out[idx] = x.data

    def bw(g):
        _acc(x, g[idx])

    return _make("scatter_rows", out, (x,), bw)


def sum_over(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(gg, a.shape))

    return _make("sum_over", out, (a,), bw)


def mean_over(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def bw(g):
        _acc(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape))

    return _make("mean_over", out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _acc(a, np.broadcast_to(g, a.shape))

    return _make("sum_all", np.asarray(a.data.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        _acc(a, np.broadcast_to(g / n, a.shape))

    return _make("mean_all", np.asarray(a.data.mean()), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0
    out = np.where(mask, a.data, 0.0)

    def bw(g):
        _acc(a, g * mask)

    return _make("relu", out, (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    last = a.shape[-1]
    x2 = _c(a.data.reshape(-1, last))
    out2 = K.softmax(x2)

    def bw(g):
        gin = K.softmax_grad(out2, _c(g.reshape(-1, last)))
        _acc(a, gin.reshape(a.shape))

    return _make("softmax", out2.reshape(a.shape), (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    last = a.shape[-1]
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    probs = np.exp(out)

    def bw(g):
        _acc(a, g - probs * g.sum(axis=-1, keepdims=True))

    del last

    return _make("log_softmax", out, (a,), bw)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of (..., T, T) scores with a causal mask.

    Row i only attends to columns <= i; masked entries are exactly zero in
    the output and receive zero gradient.
    """
    t = scores.shape[-1]
    if scores.ndim < 2 or scores.shape[-2] != t:
        raise DimensionError(f"causal_softmax expects (..., T, T), got {scores.shape}")
    x3 = _c(scores.data.reshape(-1, t, t))
    out3 = K.causal_softmax(x3)
    out2 = out3.reshape(-1, t)

    def bw(g):
        gin = K.softmax_grad(out2, _c(g.reshape(-1, t)))
        _acc(scores, gin.reshape(scores.shape))

    return _make("causal_softmax", out3.reshape(scores.shape), (scores,), bw)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or offset.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/offset must have shape ({d},), got {gain.shape}/{offset.shape}"
        )
    x2 = _c(x.data.reshape(-1, d))
    out2, xhat, inv_std = K.layernorm(x2, gain.data, offset.data, eps)

    def bw(g):
        gx, ggain, goffset = K.layernorm_grad(xhat, inv_std, gain.data, _c(g.reshape(-1, d)))
        _acc(x, gx.reshape(x.shape))
        _acc(gain, ggain)
        _acc(offset, goffset)

    return _make("layer_norm", out2.reshape(x.shape), (x, gain, offset), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]. Returns a scalar."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, vocab), got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"targets shape {targets.shape} does not match batch {logits.shape[0]}"
        )
    v = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    loss, probs = K.cross_entropy(_c(logits.data), targets)

    def bw(g):
        _acc(logits, K.cross_entropy_grad(probs, targets, float(g)))

    return _make("cross_entropy", np.asarray(loss), (logits,), bw)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scale kept entries by 1/(1-rate); identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bw(g):
        _acc(x, g * mask)

    return _make("dropout", x.data * mask, (x,), bw)


def topk_mask(a: Tensor, k: int):
    """Zero all but the k largest entries of each row (last axis).

    Ties keep the lowest index. Returns (masked tensor, selected indices);
    gradient flows only through the kept entries. `selected` has shape
    a.shape[:-1] + (k,) with indices sorted ascending.
    """
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    x2 = _c(a.data.reshape(-1, n))
    mask, selected = K.topk_mask(x2, k)

    def bw(g):
        _acc(a, (_c(g.reshape(-1, n)) * mask).reshape(a.shape))

    out = _make("topk_mask", (x2 * mask).reshape(a.shape), (a,), bw)
    return out, selected.reshape(a.shape[:-1] + (k,))


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Compare reverse-mode d f(x)/dx against central finite differences.

    f must return a scalar Tensor. Returns the maximum relative error over
    components, with denominator max(|analytic|, |numeric|, 1e-8). x.data is
    perturbed in place and restored.
    """
    x.grad = None
    out = f(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check requires f to return a scalar Tensor")
    out.backward()
    analytic = (
        np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    )
    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(x).data)
            flat[i] = orig - step
            lo = float(f(x).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
