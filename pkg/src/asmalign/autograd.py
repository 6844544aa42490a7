"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Just enough operator coverage for a small causal transformer: elementwise
arithmetic, matmul with broadcasting, reductions, shape ops, row gathering
for embeddings, and the compositions (softmax, layer norm) built from them.
Gradients are exact; finite differences are used only as an independent
check in the tests.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the shape of its source."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        # Frozen leaves take no stored gradient; intermediates always need
        # one so the sweep can continue through them.
        if not self.requires_grad and self._backward is None:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar or any-shape) tensor."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def backward(grad):
        a._accumulate(_sum_to_shape(grad, a.shape))
        b._accumulate(_sum_to_shape(grad, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data

    def backward(grad):
        a._accumulate(_sum_to_shape(grad * b.data, a.shape))
        b._accumulate(_sum_to_shape(grad * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data

    def backward(grad):
        a._accumulate(_sum_to_shape(grad / b.data, a.shape))
        b._accumulate(_sum_to_shape(-grad * a.data / (b.data ** 2), b.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data @ b.data

    def backward(grad):
        a._accumulate(_sum_to_shape(grad @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accumulate(_sum_to_shape(np.swapaxes(a.data, -1, -2) @ grad, b.shape))

    return _make(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    data = a.data ** exponent

    def backward(grad):
        a._accumulate(grad * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    data = np.exp(a.data)

    def backward(grad):
        a._accumulate(grad * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)
    data = np.log(a.data)

    def backward(grad):
        a._accumulate(grad / a.data)

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = _lift(a)
    data = np.tanh(a.data)

    def backward(grad):
        a._accumulate(grad * (1.0 - data ** 2))

    return _make(data, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    data = a.data.reshape(shape)

    def backward(grad):
        a._accumulate(grad.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(grad):
        a._accumulate(grad.transpose(inverse))

    return _make(data, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * grad.ndim
            index[axis] = slice(start, stop)
            t._accumulate(grad[tuple(index)])

    return _make(data, tensors, backward)


def narrow(a, key) -> Tensor:
    """Basic (slice / integer) indexing with gradient scatter-back."""
    a = _lift(a)
    data = a.data[key]

    def backward(grad):
        full = np.zeros_like(a.data)
        full[key] = grad
        a._accumulate(full)

    return _make(data, (a,), backward)


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by an integer array."""
    table = _lift(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(grad):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, grad)
        table._accumulate(full)

    return _make(data, (table,), backward)


def take_along_last(a, idx: np.ndarray) -> Tensor:
    """Pick one entry per position along the last axis (target gathering)."""
    a = _lift(a)
    idx = np.asarray(idx)
    expanded = np.expand_dims(idx, -1)
    data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def backward(grad):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, expanded, np.expand_dims(grad, -1), axis=-1)
        a._accumulate(full)

    return _make(data, (a,), backward)


# -- compositions ------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows sum to one up to float rounding."""
    a = _lift(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))  # constant shift
    e = exp(a - shift)
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    finite = np.where(np.isfinite(a.data), a.data, -np.inf)
    shift = Tensor(np.max(finite, axis=axis, keepdims=True))
    shifted = a - shift
    return shifted - log(tsum(exp(shifted), axis=axis, keepdims=True))


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    mu = tmean(a, axis=-1, keepdims=True)
    centered = a - mu
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, power(add(var, eps), 0.5))
    return add(mul(normed, gain), bias)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out
