"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is an append-only tape. Every operation appends a :class:`Node`
whose inputs are strictly earlier nodes, so the tape is acyclic by
construction and ``backward`` is a single reverse sweep.

    g = Graph()
    w = g.param(np.array([1.0, 2.0]))
    loss = g.mean(g.square(w)) * 0.5
    grads = g.backward(loss)      # {w.id: array([0.5, 1.0])}
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "ShapeError",
    "GradCheckError",
    "finite_difference_check",
    "logsumexp",
]


class ShapeError(ValueError):
    pass


class GradCheckError(FloatingPointError):
    pass


def logsumexp(z: np.ndarray, axis: int | None = -1) -> np.ndarray:
    """Max-subtracted log-sum-exp; finite for logits of any finite magnitude."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class Node:
    """One tape entry. ``value`` is read-only once recorded."""

    __slots__ = ("graph", "id", "op", "inputs", "value", "attrs", "needs_grad")

    def __init__(self, graph, id_, op, inputs, value, attrs, needs_grad):
        self.graph = graph
        self.id = id_
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.graph.grad(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    # arithmetic sugar; python scalars become scale/shift ops
    def __add__(self, other):
        if isinstance(other, Node):
            return self.graph.add(self, other)
        return self.graph.shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return self.graph.sub(self, other)
        return self.graph.shift(self, -float(other))

    def __rsub__(self, other):
        return self.graph.shift(self.graph.scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class Graph:
    """Append-only differentiation tape. Single-writer; not thread safe."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._grads: list[np.ndarray | None] | None = None

    # -- leaves -----------------------------------------------------------
    def param(self, value) -> Node:
        return self._record("param", (), _freeze(value), {}, True)

    def const(self, value) -> Node:
        return self._record("const", (), _freeze(value), {}, False)

    def _record(self, op, inputs, value, attrs, needs_grad=None) -> Node:
        if needs_grad is None:
            needs_grad = any(self.nodes[i].needs_grad for i in inputs)
        if value.flags.writeable:
            value.setflags(write=False)
        node = Node(self, len(self.nodes), op, tuple(inputs), value, attrs, needs_grad)
        self.nodes.append(node)
        self._grads = None
        return node

    def _own(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.const(x)

    # -- generic entry point ----------------------------------------------
    def apply(self, op: str, *inputs, **attrs) -> Node:
        """Record ``op`` applied to ``inputs`` and return the new node."""
        try:
            fn = _FORWARD[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        nodes = [self._own(x) for x in inputs]
        value = fn(*[n.value for n in nodes], **attrs)
        return self._record(op, [n.id for n in nodes], np.asarray(value, dtype=np.float64), attrs)

    # -- op constructors with shape checks --------------------------------
    def matmul(self, a, b) -> Node:
        a, b = self._own(a), self._own(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return self.apply("matmul", a, b)

    def add_bias(self, x, b) -> Node:
        x, b = self._own(x), self._own(b)
        if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
            raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
        return self.apply("add_bias", x, b)

    def _same(self, name, a, b):
        a, b = self._own(a), self._own(b)
        if a.shape != b.shape:
            raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")
        return self.apply(name, a, b)

    def add(self, a, b) -> Node:
        return self._same("add", a, b)

    def sub(self, a, b) -> Node:
        return self._same("sub", a, b)

    def mul(self, a, b) -> Node:
        return self._same("mul", a, b)

    def scale(self, x, c: float) -> Node:
        return self.apply("scale", x, c=float(c))

    def shift(self, x, c: float) -> Node:
        return self.apply("shift", x, c=float(c))

    def relu(self, x) -> Node:
        return self.apply("relu", x)

    def rectify(self, x) -> Node:
        """max(0, x); identical to relu, named for hinge terms."""
        return self.apply("relu", x)

    def sigmoid(self, x) -> Node:
        return self.apply("sigmoid", x)

    def softplus(self, x) -> Node:
        return self.apply("softplus", x)

    def log(self, x) -> Node:
        return self.apply("log", x)

    def exp(self, x) -> Node:
        return self.apply("exp", x)

    def square(self, x) -> Node:
        return self.apply("square", x)

    def logsumexp(self, x) -> Node:
        """Reduce over the last axis."""
        x = self._own(x)
        if x.value.ndim == 0:
            raise ShapeError("logsumexp: needs at least one axis, got shape ()")
        return self.apply("logsumexp", x)

    def log_softmax(self, x) -> Node:
        x = self._own(x)
        if x.value.ndim != 2:
            raise ShapeError(f"log_softmax: expected 2-d logits, got shape {x.shape}")
        return self.apply("log_softmax", x)

    def sum(self, x, axis: int | None = None) -> Node:
        return self.apply("sum", x, axis=axis)

    def mean(self, x, axis: int | None = None) -> Node:
        return self.apply("mean", x, axis=axis)

    # -- reverse sweep ----------------------------------------------------
    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Populate gradients of scalar ``loss``; return ``{param id: grad}``."""
        loss = self._own(loss)
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads[node.id]
            if g is None or not node.inputs:
                continue
            ins = [self.nodes[i] for i in node.inputs]
            parts = _BACKWARD[node.op](g, node.value, *[n.value for n in ins], **node.attrs)
            for n, part in zip(ins, parts):
                if not n.needs_grad:
                    continue
                if grads[n.id] is None:
                    grads[n.id] = np.array(part, dtype=np.float64)
                else:
                    grads[n.id] = grads[n.id] + part
        # parameters unreachable from the loss still get a zero gradient
        for n in self.nodes:
            if n.op == "param" and grads[n.id] is None:
                grads[n.id] = np.zeros_like(n.value)
        self._grads = grads
        return {n.id: grads[n.id] for n in self.nodes if n.op == "param"}

    def grad(self, node: Node) -> np.ndarray | None:
        if self._grads is None:
            return None
        return self._grads[node.id]


# forward kernels ---------------------------------------------------------

def _log_softmax(z):
    return z - logsumexp(z, axis=-1)[..., None]


def _reduce(fn):
    def run(x, axis=None):
        return fn(x, axis=axis)
    return run


_FORWARD: dict[str, Callable] = {
    "matmul": lambda a, b: a @ b,
    "add_bias": lambda x, b: x + b,
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "scale": lambda x, c: x * c,
    "shift": lambda x, c: x + c,
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": _sigmoid,
    "softplus": _softplus,
    "log": np.log,
    "exp": np.exp,
    "square": np.square,
    "logsumexp": lambda x: logsumexp(x, axis=-1),
    "log_softmax": _log_softmax,
    "sum": _reduce(np.sum),
    "mean": _reduce(np.mean),
}


# backward kernels: (upstream grad, output value, *input values) -> input grads

def _expand(g, x, axis):
    if axis is None:
        return np.broadcast_to(g, x.shape)
    return np.broadcast_to(np.expand_dims(g, axis), x.shape)


def _bw_mean(g, out, x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return (_expand(g, x, axis) / n,)


_BACKWARD: dict[str, Callable] = {
    "matmul": lambda g, out, a, b: (g @ b.T, a.T @ g),
    "add_bias": lambda g, out, x, b: (g, g.sum(axis=0)),
    "add": lambda g, out, a, b: (g, g),
    "sub": lambda g, out, a, b: (g, -g),
    "mul": lambda g, out, a, b: (g * b, g * a),
    "scale": lambda g, out, x, c: (g * c,),
    "shift": lambda g, out, x, c: (g,),
    # subgradient at the kink is 0
    "relu": lambda g, out, x: (g * (x > 0),),
    "sigmoid": lambda g, out, x: (g * out * (1.0 - out),),
    "softplus": lambda g, out, x: (g * _sigmoid(x),),
    "log": lambda g, out, x: (g / x,),
    "exp": lambda g, out, x: (g * out,),
    "square": lambda g, out, x: (2.0 * g * x,),
    "logsumexp": lambda g, out, x: (g[..., None] * np.exp(x - out[..., None]),),
    "log_softmax": lambda g, out, x: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
    "sum": lambda g, out, x, axis=None: (_expand(g, x, axis),),
    "mean": _bw_mean,
}


def finite_difference_check(
    loss_fn: Callable[[Graph, list[Node]], Node],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(graph, param_nodes)`` must build a scalar loss on ``graph``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]

    g = Graph()
    nodes = [g.param(p) for p in params]
    loss = loss_fn(g, nodes)
    grads = g.backward(loss)
    analytic = [grads[n.id] for n in nodes]

    def value_at(ps):
        gg = Graph()
        return float(loss_fn(gg, [gg.param(p) for p in ps]).value)

    worst = 0.0
    for pi, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            vals = []
            for sign in (1.0, -1.0):
                shifted = [q.copy() for q in params]
                shifted[pi][idx] += sign * step
                v = value_at(shifted)
                if not np.isfinite(v):
                    raise GradCheckError(
                        f"non-finite loss {v} at param {pi}, index {idx}, offset {sign * step:+g}"
                    )
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a = float(analytic[pi][idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
