"""Tape-based reverse-mode automatic differentiation over dense float64 matrices.

Every op appends a record to the active :class:`Graph` (if any) and links its
output tensor to the inputs it was computed from. ``backward`` walks the
records reachable from a scalar root in reverse creation order, so the tape
order and the traversal order always agree.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> backward(sum_all(square(x)))
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_node_ids = itertools.count()
_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "ddian_active_graph", default=None
)


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Append-only operation tape; use one per training step.

    ``with Graph() as g:`` makes ``g`` the active tape for the current thread
    or task. Ops executed outside any active graph are still differentiable;
    their records are simply not collected anywhere but on the tensors.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._token = None

    def __enter__(self):
        if self._token is not None:
            raise ContractError("graph is already active")
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc):
        _active_graph.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)


def current_graph() -> Graph | None:
    return _active_graph.get()


class Tensor:
    """Rank-2 float64 array with an accumulated gradient."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "record", "name")
    __array_priority__ = 100  # keep numpy from hijacking reflected operators

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise DimensionError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.values = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.record: Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.record is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self):
        self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, values: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = np.zeros_like(values)
    out.node_id = next(_node_ids)
    out.name = None
    out.record = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        rec = Record(op, inputs, out, grad_fn)
        out.record = rec
        graph = _active_graph.get()
        if graph is not None:
            graph.records.append(rec)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(op, a: Tensor, b: Tensor) -> tuple[int, int]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")

    def grad_fn(g):
        return g @ b.values.T, a.values.T @ g

    return _make("matmul", a.values @ b.values, (a, b), grad_fn)


def add_row_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Add the 1 x n row ``b`` to every row of ``a``."""
    if b.shape[0] != 1 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"add_row_broadcast: cannot add row {b.shape} to {a.shape}")

    def grad_fn(g):
        return g, g.sum(axis=0, keepdims=True)

    return _make("add_row_broadcast", a.values + b.values, (a, b), grad_fn)


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.values + b.values, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.values - b.values, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a 1-row or 1-column operand is broadcast."""
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make("mul", a.values * b.values, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    out = a.values / b.values

    def grad_fn(g):
        ga = g / b.values
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make("div", out, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _make("scale", a.values * c, (a,), grad_fn)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def grad_fn(g):
        return (g,)

    return _make("add_scalar", a.values + float(c), (a,), grad_fn)


def square(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (2.0 * a.values * g,)

    return _make("square", a.values * a.values, (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    # strict inequality: the subgradient at exactly 0 is 0
    mask = a.values > 0.0

    def grad_fn(g):
        return (g * mask,)

    return _make("relu", np.where(mask, a.values, 0.0), (a,), grad_fn)


def log_softmax_rows(a: Tensor) -> Tensor:
    if a.shape[1] < 1:
        raise DimensionError("log_softmax_rows needs at least one column")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax_rows", out, (a,), grad_fn)


def grad_reverse(a: Tensor, lam: float) -> Tensor:
    """Identity on the way forward; multiplies the gradient by ``-lam`` on the way back."""
    lam = float(lam)
    if not lam >= 0.0:
        raise ParameterError(f"grad_reverse: lambda must be >= 0, got {lam}")

    def grad_fn(g):
        return (-lam * g,)

    return _make("grad_reverse", a.values.copy(), (a,), grad_fn)


# --- reductions and indexing ----------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.full(a.shape, g[0, 0]),)

    return _make("sum_all", np.array([[a.values.sum()]]), (a,), grad_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size

    def grad_fn(g):
        return (np.full(a.shape, g[0, 0] / n),)

    return _make("mean_all", np.array([[a.values.sum() / n]]), (a,), grad_fn)


def sum_rows(a: Tensor) -> Tensor:
    """Sum each row, giving an m x 1 column."""

    def grad_fn(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum_rows", a.values.sum(axis=1, keepdims=True), (a,), grad_fn)


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def grad_fn(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("gather_rows", a.values[idx], (a,), grad_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat_rows needs at least one tensor")
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([p.shape[0] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=0))

    return _make("concat_rows", np.vstack([p.values for p in parts]), parts, grad_fn)


# --- driver ---------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Intermediate gradients live only for the duration of the call, so calling
    this twice without zeroing doubles every leaf gradient.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 root, got shape {root.shape}")
    if root.record is None:
        if root.requires_grad:
            root.grad += 1.0
        return

    records = {}
    stack = [root.record]
    while stack:
        rec = stack.pop()
        if rec.output.node_id in records:
            continue
        records[rec.output.node_id] = rec
        stack.extend(t.record for t in rec.inputs if t.record is not None)

    pending = {root.node_id: np.ones((1, 1))}
    for node_id in sorted(records, reverse=True):
        rec = records[node_id]
        g = pending.pop(node_id, None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if not t.requires_grad or gi is None:
                continue
            if t.record is None:
                t.grad += gi
            elif t.node_id in pending:
                pending[t.node_id] = pending[t.node_id] + gi
            else:
                pending[t.node_id] = gi


def zero_grad_all(tensors) -> None:
    for t in tensors:
        t.grad.fill(0.0)
