"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray and records the operation that produced
it. Calling backward() on a scalar result walks the tape in reverse
topological order and accumulates gradients into every reachable leaf.
Only the operations the denoising networks and losses need are provided:
broadcast arithmetic, batched matmul, axis swaps, reshape, softmax, a
tanh-form GELU, reductions, sqrt, concatenation, and joint gathering.

Inside a `no_grad()` block no tape is recorded; forward evaluation then
has no bookkeeping overhead beyond the Tensor wrappers.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar

import numpy as np

# Context-local so concurrent no_grad() blocks (e.g. thread-parallel
# evaluation) cannot clobber each other's grad mode.
_grad_enabled: ContextVar[bool] = ContextVar("pafuse_grad_enabled", default=True)


@contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # Operator sugar for the common cases.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = _accumulate(self.grad, np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(current, update):
    # No defensive copy: accumulation always rebinds (current + update
    # allocates), and backward never mutates gradient arrays in place.
    return update if current is None else current + update


def _node(data, parents, backward) -> Tensor:
    if not _grad_enabled.get():
        return Tensor(data)
    return Tensor(data, parents, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the forward input actually had."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        a.grad = _accumulate(a.grad, _unbroadcast(g, a.data.shape))
        b.grad = _accumulate(b.grad, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        a.grad = _accumulate(a.grad, _unbroadcast(g, a.data.shape))
        b.grad = _accumulate(b.grad, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        a.grad = _accumulate(a.grad, _unbroadcast(g * b.data, a.data.shape))
        b.grad = _accumulate(b.grad, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim >= 2:
        # Stacked-input x weight-matrix: collapse the stack so both the
        # forward and both gradients are single GEMMs.
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out_data = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            a.grad = _accumulate(a.grad, (g2 @ bd.T).reshape(ad.shape))
            b.grad = _accumulate(b.grad, a2.T @ g2)

        return _node(out_data, (a, b), backward)

    if ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2] and ad.ndim > 3:
        # Equal-rank batched matmul: flatten the batch dims to one.
        lead = ad.shape[:-2]
        a3 = ad.reshape((-1,) + ad.shape[-2:])
        b3 = bd.reshape((-1,) + bd.shape[-2:])
        out3 = a3 @ b3
        out_data = out3.reshape(lead + out3.shape[-2:])

        def backward(g):
            g3 = g.reshape((-1,) + g.shape[-2:])
            a.grad = _accumulate(a.grad, (g3 @ b3.swapaxes(-1, -2)).reshape(ad.shape))
            b.grad = _accumulate(b.grad, (a3.swapaxes(-1, -2) @ g3).reshape(bd.shape))

        return _node(out_data, (a, b), backward)

    out_data = ad @ bd

    def backward(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        a.grad = _accumulate(a.grad, _unbroadcast(ga, ad.shape))
        b.grad = _accumulate(b.grad, _unbroadcast(gb, bd.shape))

    return _node(out_data, (a, b), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    # Materialize contiguously: downstream matmuls reshape their inputs,
    # which would otherwise copy once per consumer.
    out_data = np.ascontiguousarray(a.data.swapaxes(ax1, ax2))

    def backward(g):
        a.grad = _accumulate(a.grad, np.ascontiguousarray(g.swapaxes(ax1, ax2)))

    return _node(out_data, (a,), backward)


def linear(a, w, b=None) -> Tensor:
    """Fused a @ w + b for 2-D weight matrices (single-GEMM both ways)."""
    a, w = as_tensor(a), as_tensor(w)
    b = None if b is None else as_tensor(b)
    k, n = w.data.shape
    a2 = a.data.reshape(-1, k)
    out2 = a2 @ w.data
    if b is not None:
        out2 = out2 + b.data
    out_data = out2.reshape(a.data.shape[:-1] + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        a.grad = _accumulate(a.grad, (g2 @ w.data.T).reshape(a.data.shape))
        w.grad = _accumulate(w.grad, a2.T @ g2)
        if b is not None:
            b.grad = _accumulate(b.grad, g2.sum(axis=0))

    parents = (a, w) if b is None else (a, w, b)
    return _node(out_data, parents, backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.grad = _accumulate(a.grad, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        a.grad = _accumulate(a.grad, y * (g - inner))

    return _node(y, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    # tanh-form GELU; smooth everywhere, which keeps finite-difference
    # gradient checks well conditioned.
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    y = 0.5 * x * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 0.134145 * x2)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        a.grad = _accumulate(a.grad, g * local)

    return _node(y, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        a.grad = _accumulate(a.grad, (dxhat - m1 - xhat * m2) * inv)
        axes = tuple(range(g.ndim - 1))
        gain.grad = _accumulate(gain.grad, (g * xhat).sum(axis=axes))
        bias.grad = _accumulate(bias.grad, g.sum(axis=axes))

    return _node(y, (a, gain, bias), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def backward(g):
        # Subgradient 0 at exactly zero (relevant when a norm vanishes).
        local = np.divide(0.5, y, out=np.zeros_like(y), where=y > 0)
        a.grad = _accumulate(a.grad, g * local)

    return _node(y, (a,), backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            full = np.broadcast_to(g, a.data.shape)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            full = np.broadcast_to(g_exp, a.data.shape)
        a.grad = _accumulate(a.grad, np.ascontiguousarray(full))

    return _node(out_data, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.grad = _accumulate(t.grad, piece)

    return _node(out_data, tuple(tensors), backward)


def take(a, indices, axis: int) -> Tensor:
    """Gather slices along an axis; the backward pass scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        a.grad = _accumulate(a.grad, full)

    return _node(out_data, (a,), backward)


def gradcheck(fn, params: dict[str, np.ndarray], step: float = 1e-4,
              floor: float | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    fn maps {name: Tensor} to a scalar Tensor. Every element of every
    parameter is perturbed by +-step. The per-element error is
    |analytic - fd| / max(|analytic|, |fd|, floor); the floor defaults to
    the step size because central differences carry O(step^2) truncation
    error, so gradients far below the step cannot be compared relative to
    themselves (only their absolute agreement is meaningful there).
    """
    floor = step if floor is None else floor
    leaves = {k: Tensor(v) for k, v in params.items()}
    fn(leaves).backward()
    worst = 0.0
    for name, base in params.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        work = {k: (v.copy() if k == name else v) for k, v in params.items()}
        flat = work[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = float(fn({k: Tensor(v) for k, v in work.items()}).data)
            flat[i] = orig - step
            with no_grad():
                lo = float(fn({k: Tensor(v) for k, v in work.items()}).data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            an = analytic.reshape(-1)[i]
            err = abs(an - fd) / max(abs(an), abs(fd), floor)
            worst = max(worst, err)
    return worst
