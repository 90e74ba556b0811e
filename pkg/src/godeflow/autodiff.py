"""Minimal dense reverse-mode differentiation on float64 numpy arrays.

Every operation returns a fresh :class:`Tensor` and, while gradients are
enabled, records a tape node holding its parents and a closure that pushes
the upstream gradient back to them.  ``backward()`` on a scalar result walks
the recorded nodes once in reverse topological order.  There is exactly one
tape per training step; nothing is retained after the gradients are read.

Only the operations the rest of the package needs are implemented.  Inputs
are dense float64 arrays; elementwise operations broadcast under numpy rules
and gradients are summed back down to the parent shapes.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy import sparse as _sparse

from .errors import DimensionError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the ``with`` block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class _TapeNode:
    __slots__ = ("op", "parents", "push_grad")

    def __init__(self, op, parents, push_grad):
        self.op = op
        self.parents = parents
        self.push_grad = push_grad


class Tensor:
    """Dense float64 array plus an optional gradient and tape reference."""

    __slots__ = ("values", "requires_grad", "grad", "tape_node")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self) -> None:
        """Fill ``grad`` on every tensor this scalar depends on."""
        if self.values.size != 1:
            raise DimensionError(
                f"backward() needs a scalar, got shape {self.values.shape}"
            )
        order = _topological_order(self)
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node.tape_node is not None and node.grad is not None:
                node.tape_node.push_grad(node.grad)

    # small amount of operator sugar; everything funnels into the module ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.tape_node is not None:
            for parent in node.tape_node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _record(values: np.ndarray, parents: tuple[Tensor, ...], push_grad, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs)
    if needs:
        out.tape_node = _TapeNode(op, parents, push_grad)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.values.shape} and {b.values.shape} do not broadcast"
        ) from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.values.shape} and {b.values.shape}"
        )
    if a.values.shape[1] != b.values.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ, {a.values.shape} @ {b.values.shape}"
        )
    av, bv = a.values, b.values

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(g @ bv.T)
        if b.requires_grad:
            b.accumulate_grad(av.T @ g)

    return _record(av @ bv, (a, b), push, "matmul")


def matmul_const(operator, x: Tensor, operator_t=None) -> Tensor:
    """Left-multiply by a fixed linear operator (dense or scipy sparse).

    The operator receives no gradient; the gradient with respect to ``x`` is
    ``operator.T @ g``.  Pass ``operator_t`` to reuse a prebuilt transpose.
    """
    if x.ndim != 2:
        raise DimensionError(f"matmul_const expects a 2-d tensor, got {x.values.shape}")
    if operator.shape[1] != x.values.shape[0]:
        raise DimensionError(
            f"matmul_const: operator {operator.shape} does not match {x.values.shape}"
        )
    if operator_t is None:
        operator_t = operator.T
    values = operator @ x.values
    if _sparse.issparse(values):  # pragma: no cover - depends on operand types
        values = np.asarray(values.todense())

    def push(g):
        if x.requires_grad:
            x.accumulate_grad(np.asarray(operator_t @ g))

    return _record(np.asarray(values), (x,), push, "matmul_const")


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.values.shape))

    return _record(a.values + b.values, (a, b), push, "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "subtract")

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.values.shape))

    return _record(a.values - b.values, (a, b), push, "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "multiply")
    av, bv = a.values, b.values

    def push(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * bv, av.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * av, bv.shape))

    return _record(av * bv, (a, b), push, "multiply")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def push(g):
        if x.requires_grad:
            x.accumulate_grad(factor * g)

    return _record(factor * x.values, (x,), push, "scale")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.values.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    axis_norm = axis if axis >= 0 else values.ndim + axis
    sizes = [t.values.shape[axis_norm] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def push(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis_norm] = slice(lo, hi)
                t.accumulate_grad(g[tuple(index)])

    return _record(values, tensors, push, "concat")


def row_select(x: Tensor, indices) -> Tensor:
    """Select rows ``x[indices]`` (gather along the first axis)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise DimensionError(f"row_select indices must be 1-d, got {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= x.values.shape[0]):
        raise DimensionError(
            f"row_select: index out of range for {x.values.shape[0]} rows"
        )

    def push(g):
        if x.requires_grad:
            buf = np.zeros_like(x.values)
            np.add.at(buf, indices, g)
            x.accumulate_grad(buf)

    return _record(x.values[indices], (x,), push, "row_select")


def mean(x: Tensor, axis=None) -> Tensor:
    values = x.values.mean(axis=axis)
    count = x.values.size if axis is None else x.values.shape[axis]

    def push(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.full_like(x.values, 1.0 / count) * g)
        else:
            x.accumulate_grad(np.expand_dims(g, axis) / count * np.ones_like(x.values))

    return _record(values, (x,), push, "mean")


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    values = x.values.sum(axis=axis)

    def push(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.ones_like(x.values) * g)
        else:
            x.accumulate_grad(np.expand_dims(g, axis) * np.ones_like(x.values))

    return _record(values, (x,), push, "sum")


def square(x: Tensor) -> Tensor:
    xv = x.values

    def push(g):
        if x.requires_grad:
            x.accumulate_grad(2.0 * xv * g)

    return _record(xv * xv, (x,), push, "square")


def sigmoid(x: Tensor) -> Tensor:
    xv = x.values
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)

    def push(g):
        if x.requires_grad:
            x.accumulate_grad(out * (1.0 - out) * g)

    return _record(out, (x,), push, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)

    def push(g):
        if x.requires_grad:
            x.accumulate_grad((1.0 - out * out) * g)

    return _record(out, (x,), push, "tanh")


def log(x: Tensor) -> Tensor:
    xv = x.values

    def push(g):
        if x.requires_grad:
            x.accumulate_grad(g / xv)

    return _record(np.log(xv), (x,), push, "log")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def push(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out * (g - inner))

    return _record(out, (x,), push, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    """Log of softmax over the last axis, computed stably in one node."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    total = ex.sum(axis=-1, keepdims=True)
    out = shifted - np.log(total)
    soft = ex / total

    def push(g):
        if x.requires_grad:
            x.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return _record(out, (x,), push, "log_softmax")


def gradient_reversal(x: Tensor) -> Tensor:
    """Identity in the forward pass; negates the gradient in the backward pass."""

    def push(g):
        if x.requires_grad:
            x.accumulate_grad(-g)

    return _record(x.values, (x,), push, "gradient_reversal")
