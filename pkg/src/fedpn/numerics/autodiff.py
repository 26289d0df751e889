"""Tape-style reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` is an append-only record of primitive operations.  Every
operation appends one node holding its value, its parent indices and a
vector-Jacobian product.  Because nodes are only ever appended, the tape
order is a topological order and :func:`backward` is a single reverse sweep.

Trainable parameters enter as named leaves via :meth:`Graph.param`.
:func:`stop_gradient` appends a node that forwards its input unchanged but
never passes a gradient back, so anything upstream of it contributes
exactly ``0.0``.

Example::

    g = Graph()
    w = g.param("w", 2.0)
    y = stop_gradient(w) * w
    backward(g, y)["w"]   # -> array(2.)
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ContractError
from . import special

__all__ = [
    "Graph",
    "Var",
    "backward",
    "stop_gradient",
    "exp",
    "log",
    "log1p",
    "tanh",
    "relu",
    "softplus",
    "sqrt",
    "square",
    "norm",
    "sum",
    "mean",
    "matmul",
    "reshape",
    "take",
    "logsumexp",
    "log_softmax",
    "softmax",
    "digamma",
    "lgamma",
]


@dataclass
class Node:
    op: str
    parents: tuple
    value: np.ndarray
    vjp: Callable | None = None
    name: str | None = None
    stop: bool = False
    requires_grad: bool = False


@dataclass
class Graph:
    """Append-only computation record; rebuild one per forward pass."""

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def _append(self, node):
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def param(self, name, value):
        if name in self.params:
            raise ContractError(f"parameter {name!r} already registered in this graph")
        arr = np.array(value, dtype=np.float64)
        var = self._append(Node("param", (), arr, name=name, requires_grad=True))
        self.params[name] = var.index
        return var

    def constant(self, value):
        return self._append(Node("const", (), np.asarray(value, dtype=np.float64)))

    def lift(self, value):
        if isinstance(value, Var):
            if value.graph is not self:
                raise ContractError("cannot mix variables from different graphs")
            return value
        return self.constant(value)


class Var:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "index")
    __array_priority__ = 1000

    def __init__(self, graph, index):
        self.graph = graph
        self.index = index

    @property
    def node(self):
        return self.graph.nodes[self.index]

    @property
    def value(self):
        return self.graph.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.node.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _unary(self, "neg", -self.value, lambda g: -g)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _graph_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.graph
    raise ContractError("at least one operand must be a graph variable")


def _record(graph, op, parents, value, vjp):
    req = any(graph.nodes[p].requires_grad for p in parents)
    return graph._append(
        Node(op, tuple(parents), np.asarray(value, dtype=np.float64), vjp if req else None,
             requires_grad=req)
    )


def _unary(x, op, value, vjp):
    return _record(x.graph, op, (x.index,), value, lambda g: (vjp(g),))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, op, fn, da, db):
    graph = _graph_of(a, b)
    a = graph.lift(a)
    b = graph.lift(b)
    av, bv = a.value, b.value
    out = fn(av, bv)

    def vjp(g):
        return (_unbroadcast(da(g, av, bv), av.shape), _unbroadcast(db(g, av, bv), bv.shape))

    return _record(graph, op, (a.index, b.index), out, vjp)


def add(a, b):
    return _binary(a, b, "add", np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, "sub", np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, "mul", np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        a, b, "div", np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def matmul(a, b):
    graph = _graph_of(a, b)
    a = graph.lift(a)
    b = graph.lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ContractError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return _record(graph, "matmul", (a.index, b.index), av @ bv,
                   lambda g: (g @ bv.T, av.T @ g))


def stop_gradient(x):
    """Identity in the forward pass; blocks every gradient in the backward pass."""
    graph = x.graph
    return graph._append(Node("stop_gradient", (x.index,), x.value, None, stop=True))


def exp(x):
    out = np.exp(x.value)
    return _unary(x, "exp", out, lambda g: g * out)


def log(x):
    v = x.value
    return _unary(x, "log", np.log(v), lambda g: g / v)


def log1p(x):
    v = x.value
    return _unary(x, "log1p", np.log1p(v), lambda g: g / (1.0 + v))


def tanh(x):
    out = np.tanh(x.value)
    return _unary(x, "tanh", out, lambda g: g * (1.0 - out * out))


def relu(x):
    v = x.value
    return _unary(x, "relu", np.maximum(v, 0.0), lambda g: g * (v > 0.0))


def softplus(x):
    v = x.value
    out = np.logaddexp(0.0, v)
    return _unary(x, "softplus", out, lambda g: g * np.exp(v - out))


def sqrt(x):
    out = np.sqrt(x.value)
    return _unary(x, "sqrt", out, lambda g: g * 0.5 / out)


def square(x):
    v = x.value
    return _unary(x, "square", v * v, lambda g: 2.0 * g * v)


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    v = x.value
    out = np.sqrt(np.sum(v * v, axis=axis))

    def vjp(g):
        r = np.expand_dims(out, axis)
        safe = np.where(r > 0.0, r, 1.0)
        return np.expand_dims(g, axis) * np.where(r > 0.0, v / safe, 0.0)

    return _unary(x, "norm", out, vjp)


def sum(x, axis=None, keepdims=False):
    v = x.value
    out = np.sum(v, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, v.shape).copy()

    return _unary(x, "sum", out, vjp)


def mean(x, axis=None, keepdims=False):
    v = x.value
    count = v.size if axis is None else np.prod([v.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(x, shape):
    v = x.value
    return _unary(x, "reshape", v.reshape(shape), lambda g: g.reshape(v.shape))


def getitem(x, idx):
    """Basic (slice / integer) indexing."""
    v = x.value

    def vjp(g):
        full = np.zeros_like(v)
        full[idx] = g
        return full

    return _unary(x, "getitem", v[idx], vjp)


def take(x, indices, axis=0):
    """Gather along ``axis`` with an integer index array; repeated indices accumulate."""
    v = x.value
    indices = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        full = np.zeros_like(v)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return full

    return _unary(x, "take", np.take(v, indices, axis=axis), vjp)


def logsumexp(x, axis=-1):
    v = x.value
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(v - m), axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = np.squeeze(out_k, axis=axis)

    def vjp(g):
        weights = np.exp(v - out_k)
        return np.expand_dims(g, axis) * weights

    return _unary(x, "logsumexp", out, vjp)


def log_softmax(x, axis=-1):
    v = x.value
    m = np.max(v, axis=axis, keepdims=True)
    shifted = v - m
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def vjp(g):
        return g - np.exp(out) * np.sum(g, axis=axis, keepdims=True)

    return _unary(x, "log_softmax", out, vjp)


def softmax(x, axis=-1):
    v = x.value
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - np.sum(g * out, axis=axis, keepdims=True))

    return _unary(x, "softmax", out, vjp)


def digamma(x):
    v = x.value
    return _unary(x, "digamma", special.digamma(v), lambda g: g * special.trigamma(v))


def lgamma(x):
    v = x.value
    return _unary(x, "lgamma", special.lgamma(v), lambda g: g * special.digamma(v))


def backward(graph, root):
    """Gradients of a scalar ``root`` with respect to every parameter leaf.

    Returns a dict mapping parameter name to an array of the parameter's
    shape.  Parameters with no path to ``root`` (or only paths through a
    stop-gradient node) receive exact zeros.
    """
    if not isinstance(root, Var) or root.graph is not graph:
        raise ContractError("root must be a variable of this graph")
    if root.value.size != 1:
        raise ContractError(f"root must be scalar-valued, got shape {root.shape}")
    nodes = graph.nodes
    grads = [None] * (root.index + 1)
    grads[root.index] = np.ones_like(root.value)
    for i in range(root.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not nodes[parent].requires_grad:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    out = {}
    for name, idx in graph.params.items():
        g = grads[idx] if idx < len(grads) else None
        out[name] = np.zeros_like(nodes[idx].value) if g is None else np.array(g)
    return out
