"""Minimal reverse-mode differentiation over numpy arrays.

Every operation creates a :class:`Var` that remembers its inputs and a
closure mapping the output gradient to input gradients.  ``backward`` sorts
the reachable nodes topologically and visits each one exactly once in
reverse order.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def zero_grad(self):
        self.grad = None


def param(value) -> Var:
    """Leaf that collects gradients."""
    return Var(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Var:
    return Var(np.asarray(value, dtype=np.float64))


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else const(x)


def _make(value, parents, fn, op) -> Var:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Var(value, op=op)
    return Var(value, parents, fn, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def topo_order(root: Var) -> list[Var]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    order = topo_order(root)
    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=root.value.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise arithmetic

def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)), "div")


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def spmm(m: sp.spmatrix, x) -> Var:
    """Constant sparse matrix times ``x``."""
    x = _wrap(x)
    mt = m.T.tocsr()
    return _make(m @ x.value, (x,), lambda g: (mt @ g,), "spmm")


# unary maps

def tanh(x) -> Var:
    x = _wrap(x)
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Var:
    x = _wrap(x)
    y = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x) -> Var:
    x = _wrap(x)
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def sin(x) -> Var:
    x = _wrap(x)
    return _make(np.sin(x.value), (x,), lambda g: (g * np.cos(x.value),), "sin")


def cos(x) -> Var:
    x = _wrap(x)
    return _make(np.cos(x.value), (x,), lambda g: (-g * np.sin(x.value),), "cos")


def sqrt(x) -> Var:
    x = _wrap(x)
    y = np.sqrt(x.value)
    return _make(y, (x,), lambda g: (0.5 * g / y,), "sqrt")


def abs_(x) -> Var:
    x = _wrap(x)
    return _make(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),), "abs")


def square(x) -> Var:
    x = _wrap(x)
    return _make(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


# reductions and shape ops

def sum_(x, axis=None, keepdims=False) -> Var:
    x = _wrap(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(out, (x,), fn, "sum")


def mean(x, axis=None, keepdims=False) -> Var:
    x = _wrap(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Var:
    x = _wrap(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Var:
    x = _wrap(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence, axis=-1) -> Var:
    xs = [_wrap(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.value for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def broadcast_rows(x, n: int) -> Var:
    """Tile a 1-D vector into ``n`` identical rows."""
    x = _wrap(x)
    return _make(np.broadcast_to(x.value, (n,) + x.shape).copy(), (x,),
                 lambda g: (g.sum(axis=0),), "broadcast_rows")


def index(x, key) -> Var:
    x = _wrap(x)

    def fn(g):
        out = np.zeros_like(x.value)
        np.add.at(out, key, g)
        return (out,)
    return _make(x.value[key], (x,), fn, "index")


def take_rows(x, idx: np.ndarray) -> Var:
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)
    return _make(x.value[idx], (x,), fn, "take_rows")


def replace_rows(base, idx: np.ndarray, rows) -> Var:
    """Copy of ``base`` with ``base[idx]`` replaced by ``rows``; other rows are copied bitwise."""
    base, rows = _wrap(base), _wrap(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = base.value.copy()
    out[idx] = rows.value

    def fn(g):
        gb = g.copy()
        gb[idx] = 0.0
        return (gb, g[idx])
    return _make(out, (base, rows), fn, "replace_rows")


def scatter_rows(rows, target: np.ndarray, n_out: int) -> Var:
    """Write ``rows[i]`` into slot ``target[i]`` in ascending ``i``; the last writer wins."""
    rows = _wrap(rows)
    target = np.asarray(target, dtype=np.int64)
    # winner per slot = largest source index that targets it
    winner = np.full(n_out, -1, dtype=np.int64)
    np.maximum.at(winner, target, np.arange(len(target)))
    filled = np.nonzero(winner >= 0)[0]
    src = winner[filled]
    out = np.zeros((n_out,) + rows.shape[1:])
    out[filled] = rows.value[src]

    def fn(g):
        gr = np.zeros_like(rows.value)
        gr[src] = g[filled]
        return (gr,)
    return _make(out, (rows,), fn, "scatter_rows")


def softmax(x, axis=-1) -> Var:
    x = _wrap(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (x,), fn, "softmax")


def custom(value, parents: Sequence[Var], fn, op: str) -> Var:
    """Hook for operations with a hand-written adjoint."""
    return _make(value, [_wrap(p) for p in parents], fn, op)


def linear(x, w, b) -> Var:
    return add(matmul(x, w), b)
