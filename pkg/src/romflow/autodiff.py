"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation records its inputs and a vector-Jacobian product written in
terms of the same operations, so a backward pass run with
``create_graph=True`` is itself recorded and can be differentiated again.
The flow trainer relies on this for the score-matching penalty, whose
parameter gradient passes through the input gradient of the log-density.

Only the handful of operations the coupling layers need are provided.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_RECORDING = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


@contextlib.contextmanager
def _recording(flag: bool):
    global _RECORDING
    prev = _RECORDING
    _RECORDING = flag
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    """A numpy array with an optional node on the tape."""

    __slots__ = ("value", "requires_grad", "parents", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        # tuple of (parent, vjp) pairs; empty for leaves
        self.parents: tuple = ()

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    live = tuple((p, f) for p, f in parents if p.requires_grad)
    out = Tensor(value, requires_grad=bool(live) and _RECORDING)
    if out.requires_grad:
        out.parents = live
    return out


# --- elementary operations -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, [
        (a, lambda g: sum_to(g, sa)),
        (b, lambda g: sum_to(g, sb)),
    ])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, [
        (a, lambda g: sum_to(g, sa)),
        (b, lambda g: neg(sum_to(g, sb))),
    ])


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, [(a, neg)])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value * b.value, [
        (a, lambda g: sum_to(mul(g, b), sa)),
        (b, lambda g: sum_to(mul(g, a), sb)),
    ])


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.value @ b.value, [
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ])


def transpose(a: Tensor) -> Tensor:
    return _make(a.value.T, [(a, transpose)])


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.value.reshape(shape), [(a, lambda g: reshape(g, old))])


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.value), [])
    if a.requires_grad and _RECORDING:
        out.parents = ((a, lambda g: mul(g, 1.0 - mul(out, out))),)
        out.requires_grad = True
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.value), [])
    if a.requires_grad and _RECORDING:
        out.parents = ((a, lambda g: mul(g, out)),)
        out.requires_grad = True
    return out


def recip(a: Tensor) -> Tensor:
    """Elementwise 1/a, defined as 0 where a == 0."""
    v = a.value
    r = np.divide(1.0, v, out=np.zeros_like(v), where=v != 0)
    out = _make(r, [])
    if a.requires_grad and _RECORDING:
        out.parents = ((a, lambda g: neg(mul(g, mul(out, out)))),)
        out.requires_grad = True
    return out


def log_abs(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        v = np.log(np.abs(a.value))
    return _make(v, [(a, lambda g: mul(g, recip(a)))])


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at 0 is taken as 0."""
    out = _make(np.sqrt(a.value), [])
    if a.requires_grad and _RECORDING:
        out.parents = ((a, lambda g: mul(g, mul(0.5, recip(out)))),)
        out.requires_grad = True
    return out


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    v = np.sum(a.value, axis=axis, keepdims=keepdims)
    if axis is None:
        kshape = (1,) * len(shape)
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
    return _make(v, [(a, lambda g: broadcast_to(reshape(g, kshape), shape))])


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(np.broadcast_to(a.value, shape), [(a, lambda g: sum_to(g, old))])


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum ``a`` down to ``shape`` (reverse of numpy broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    v = a.value
    lead = v.ndim - len(shape)
    if lead:
        v = v.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and v.shape[i] != 1)
    if axes:
        v = v.sum(axis=axes, keepdims=True)
    big = a.shape
    return _make(v, [(a, lambda g: broadcast_to(g, big))])


def take_cols(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[1]
    return _make(a.value[:, idx], [(a, lambda g: put_cols(g, idx, n))])


def put_cols(a: Tensor, idx, n: int) -> Tensor:
    """Place the columns of ``a`` at positions ``idx`` of a zero (rows, n) array."""
    idx = np.asarray(idx, dtype=np.intp)
    v = np.zeros((a.shape[0], n))
    v[:, idx] = a.value
    return _make(v, [(a, lambda g: take_cols(g, idx))])


# --- differentiation -------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False,
         seed: Tensor | None = None) -> list[Tensor]:
    """Gradient of ``output`` with respect to each tensor in ``inputs``.

    ``output`` is normally a scalar. A non-scalar output needs ``seed``, the
    cotangent to pull back. With ``create_graph`` the returned tensors are on
    the tape and can be differentiated further.
    """
    inputs = list(inputs)
    if seed is None:
        if output.value.size != 1:
            raise ValueError("grad of a non-scalar output needs an explicit seed")
        seed = Tensor(np.ones_like(output.value))
    if not output.requires_grad:
        return [Tensor(np.zeros_like(x.value)) for x in inputs]

    order = _toposort(output)
    targets = {id(x) for x in inputs}
    # prune branches that cannot reach any input
    needed: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in needed for p, _ in node.parents):
            needed.add(id(node))

    grads: dict[int, Tensor] = {id(output): seed}
    with _recording(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None) if id(node) not in targets else grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node.parents:
                if id(parent) not in needed:
                    continue
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    return [grads.get(id(x), Tensor(np.zeros_like(x.value))) for x in inputs]
