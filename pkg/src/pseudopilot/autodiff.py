"""Tape-free reverse-mode differentiation over numpy arrays.

Every operation returns a :class:`Node` holding its value and a closure that
pushes the upstream gradient to its parents. :func:`backward` walks the graph
in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Node:
    __slots__ = ("value", "parents", "backward_fn", "grad", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), back)


def neg(a) -> Node:
    return Node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, (a, b), back)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def back(g):
        ga = g / b.value
        gb = -g * a.value / b.value**2
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(a.value / b.value, (a, b), back)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        return g @ b.value.T, a.value.T @ g

    return Node(a.value @ b.value, (a, b), back)


def reshape(a, shape) -> Node:
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Node:
    return Node(a.value.T, (a,), lambda g: (g.T,))


def relu(a) -> Node:
    mask = a.value > 0
    return Node(a.value * mask, (a,), lambda g: (g * mask,))


def sqrt(a) -> Node:
    out = np.sqrt(a.value)
    return Node(out, (a,), lambda g: (g * 0.5 / out,))


def log(a) -> Node:
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def exp(a) -> Node:
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def square(a) -> Node:
    return Node(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values; gradient passes only where the input is strictly inside."""
    inside = (a.value > lo) & (a.value < hi)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def total(a, axis=None, keepdims=False) -> Node:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(out, (a,), back)


def mean(a, axis=None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return total(a, axis=axis) * (1.0 / n)


def unary(a, fn: Callable, dfn: Callable) -> Node:
    """Elementwise op from a value function and its derivative."""
    return Node(fn(a.value), (a,), lambda g: (g * dfn(a.value),))


def gather_rows(a, idx) -> Node:
    """Pick ``a[i, idx[i]]`` for each row i."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.value)
        out[rows, idx] = g
        return (out,)

    return Node(a.value[rows, idx], (a,), back)


def take(a, rows) -> Node:
    rows = np.asarray(rows, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, rows, g)
        return (out,)

    return Node(a.value[rows], (a,), back)


def where(mask, a, b) -> Node:
    a, b = as_node(a), as_node(b)
    mask = np.asarray(mask, dtype=bool)

    def back(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return Node(np.where(mask, a.value, b.value), (a, b), back)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, back)


def log_softmax(a, axis: int = -1) -> Node:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    # log1p over the non-maximal terms keeps saturated rows accurate
    e = np.exp(shifted)
    top = np.expand_dims(np.argmax(shifted, axis=axis), axis)
    np.put_along_axis(e, top, 0.0, axis=axis)
    lse = np.log1p(e.sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Node(out, (a,), back)


def softmax(a, axis: int = -1) -> Node:
    return exp(log_softmax(a, axis=axis))


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Populate ``.grad`` on every node reachable from a scalar ``root``."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g
