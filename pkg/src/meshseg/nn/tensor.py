"""Tape-free reverse-mode autodiff over numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
pushes ``out.grad`` back into them. ``backward`` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import numpy as np


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'!r})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # a few elementwise helpers; enough for losses assembled in tests
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other, self.dtype) if isinstance(other, Tensor) else -np.asarray(other))

    def sum(self):
        return tsum(self)


def _lift(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = _lift(a), _lift(b, a.dtype if isinstance(a, Tensor) else None)
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def _backward():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(out.grad, b.shape))

    out._backward = _backward
    return out


def mul(a, b):
    a = _lift(a)
    b = _lift(b, a.dtype)
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def _backward():
        a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = _backward
    return out


def tsum(a):
    out = Tensor(a.data.sum(), _parents=(a,), _op="sum")

    def _backward():
        a._accumulate(np.broadcast_to(out.grad, a.shape))

    out._backward = _backward
    return out


def backward(loss):
    """Fill ``.grad`` of every tensor that ``loss`` depends on.

    ``loss`` must be a scalar produced by a recorded forward pass.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None or not loss.requires_grad:
        raise GraphError("no recorded forward pass: loss is a leaf or does not require grad")

    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if id(p) not in seen)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    # free intermediate buffers; leaves keep their grads
    for node in order:
        if node._parents:
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None
