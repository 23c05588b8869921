"""A small reverse-mode differentiation engine over dense numpy arrays.

Operations are recorded on an append-only :class:`Graph` tape. Only nodes that
depend on a parameter are recorded, so evaluating a model on plain arrays costs
no more than the numpy calls themselves.

The op set is deliberately closed: ``affine``, ``activation`` (tanh, relu,
softplus, exp, log), elementwise ``add``/``sub``/``mul``/``div``, ``square``,
``reduce_sum``, ``reduce_mean`` and ``concat``. Binary elementwise ops broadcast
numpy-style, which covers adding per-unit vectors to batches.
"""
from __future__ import annotations

import functools
from typing import Callable, Mapping

import numpy as np

from .errors import NonFiniteError, ShapeError, UniVoiceError

ACTIVATIONS = ("tanh", "relu", "softplus", "exp", "log")


class Tensor:
    __slots__ = ("value", "graph", "index", "name", "_parents", "_vjp")

    def __init__(self, value, graph=None, parents=(), vjp=None, name=None):
        self.value = value
        self.graph = graph
        self.name = name
        self._parents = parents
        self._vjp = vjp
        self.index = graph._append(self) if graph is not None else -1

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        return float(np.asarray(self.value).reshape(()))

    @property
    def requires_grad(self) -> bool:
        return self.graph is not None

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

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"


class Graph:
    """Append-only tape of recorded operations."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def _append(self, node: Tensor) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        arr = np.array(value, dtype=self.dtype)
        _check_finite(arr, f"parameter {name}")
        t = Tensor(arr, self, name=name)
        self.params[name] = t
        return t

    def backward(self, loss: Tensor, seed: float = 1.0) -> dict[str, np.ndarray]:
        """Return d(seed * loss)/d(param) for every registered parameter."""
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[str, np.ndarray] = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        if loss.graph is not self:
            return grads
        adj: list[np.ndarray | None] = [None] * (loss.index + 1)
        adj[loss.index] = np.full(loss.value.shape, seed, dtype=loss.value.dtype)
        for i in range(loss.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if parent is None or parent.graph is not self:
                    continue
                j = parent.index
                adj[j] = pg if adj[j] is None else adj[j] + pg
        for name, p in self.params.items():
            if p.index < len(adj) and adj[p.index] is not None:
                grads[name] = adj[p.index]
        return grads


def _quiet(op):
    # overflow surfaces as NonFiniteError, so numpy's own warnings are redundant
    @functools.wraps(op)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
            return op(*args, **kwargs)

    return wrapper


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


def _value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _graph_of(*xs):
    graph = None
    for x in xs:
        if isinstance(x, Tensor) and x.graph is not None:
            if graph is not None and x.graph is not graph:
                raise UniVoiceError("operands belong to different graphs")
            graph = x.graph
    return graph


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(value, what, parents, vjp):
    _check_finite(value, what)
    graph = _graph_of(*parents)
    if graph is None:
        return Tensor(value)
    return Tensor(value, graph, tuple(p if isinstance(p, Tensor) else None for p in parents), vjp)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


@_quiet
def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x: [B x I]``, ``W: [I x O]``, ``b: [O]``."""
    xv, Wv, bv = _value(x), _value(W), _value(b)
    if xv.ndim != 2 or Wv.ndim != 2 or bv.ndim != 1 or xv.shape[1] != Wv.shape[0] or Wv.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"affine shape mismatch: x{tuple(xv.shape)} @ W{tuple(Wv.shape)} + b{tuple(bv.shape)}"
        )
    out = xv @ Wv + bv

    def vjp(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return _make(out, "affine", (x, W, b), vjp)


@_quiet
def activation(x, kind: str) -> Tensor:
    xv = _value(x)
    if kind == "tanh":
        out = np.tanh(xv)
        deriv = lambda: 1.0 - out**2
    elif kind == "relu":
        out = np.maximum(xv, 0.0)
        deriv = lambda: (xv > 0).astype(xv.dtype)
    elif kind == "softplus":
        out = np.logaddexp(0.0, xv)
        deriv = lambda: 0.5 * (1.0 + np.tanh(0.5 * xv))
    elif kind == "exp":
        out = np.exp(xv)
        deriv = lambda: out
    elif kind == "log":
        if np.any(xv <= 0):
            raise ValueError("log of non-positive entry")
        out = np.log(xv)
        deriv = lambda: 1.0 / xv
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return _make(out, kind, (x,), lambda g: (g * deriv(),))


@_quiet
def add(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _make(av + bv, "add", (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


@_quiet
def sub(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _make(av - bv, "sub", (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


@_quiet
def mul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    return _make(
        av * bv, "mul", (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


@_quiet
def div(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    out = av / bv
    return _make(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


@_quiet
def square(x) -> Tensor:
    xv = _value(x)
    return _make(xv * xv, "square", (x,), lambda g: (2.0 * g * xv,))


@_quiet
def reduce_sum(x, axis=None) -> Tensor:
    xv = _value(x)
    out = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _make(np.asarray(out), "reduce_sum", (x,), vjp)


def reduce_mean(x, axis=None) -> Tensor:
    xv = _value(x)
    count = xv.size if axis is None else xv.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / count)


@_quiet
def concat(xs, axis=-1) -> Tensor:
    vals = [_value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, "concat", tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def grad_check(
    f: Callable[[Graph | None, Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over all entries.

    ``f(graph, tensors)`` must build a scalar loss from the given parameter
    tensors; it is called with ``graph=None`` for the finite-difference probes.
    Any randomness has to be supplied from outside, which is checked by
    evaluating ``f`` twice at the base point.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value_at(point):
        out = f(None, {k: constant(v) for k, v in point.items()})
        return float(np.asarray(out.value).reshape(()))

    first, second = value_at(base), value_at(base)
    if first != second:
        raise UniVoiceError("function is not deterministic: repeated evaluations differ")

    graph = Graph()
    tensors = {k: graph.param(k, v) for k, v in base.items()}
    analytic = graph.backward(f(graph, tensors))

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value_at(base)
            flat[i] = orig - h
            down = value_at(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
            worst = max(worst, err)
    return worst
