"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a read-only float64 numpy array. Every operation on
tensors that require gradients records a :class:`TapeNode` holding the op
tag, its parent tensors and a closure over the forward values its backward
rule needs. Creation order numbers every tensor, so sorting reachable
tensors by that number (descending) is a valid reverse topological order of
the tape.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ShapeError

_creation = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(frozen=True, eq=False)
class TapeNode:
    op: str
    parents: tuple["Tensor", ...]
    backward: BackwardFn
    seq: int = field(default_factory=lambda: next(_creation))


class Tensor:
    """Immutable n-dimensional real array taking part in autodiff."""

    __slots__ = ("_data", "_node", "_leaf_grad", "name", "seq")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise ValueError("Tensor data must be finite (found NaN or Inf)")
        array.flags.writeable = False
        self._data = array
        self._node: TapeNode | None = None
        self._leaf_grad = bool(requires_grad)
        self.name = name
        self.seq = next(_creation)

    @classmethod
    def _from_op(cls, data: np.ndarray, node: TapeNode | None) -> "Tensor":
        out = cls.__new__(cls)
        # freeze a view so the caller keeps a writeable array
        array = np.asarray(data, dtype=np.float64).view()
        array.flags.writeable = False
        out._data = array
        out._node = node
        out._leaf_grad = False
        out.name = None
        out.seq = next(_creation)
        return out

    # -- introspection -------------------------------------------------
    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def node(self) -> TapeNode | None:
        return self._node

    @property
    def requires_grad(self) -> bool:
        return self._leaf_grad or self._node is not None

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._from_op(self._data, None)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_op(op: str, data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Build an op result, recording a tape node only when a parent needs gradients."""
    parents = tuple(parents)
    node = TapeNode(op, parents, backward_fn) if any(p.requires_grad for p in parents) else None
    return Tensor._from_op(data, node)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_op("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_op("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    x, y = a.data, b.data

    def backward(g):
        return unbroadcast(g * y, a.shape), unbroadcast(g * x, b.shape)

    return make_op("mul", x * y, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    x, y = a.data, b.data

    def backward(g):
        return unbroadcast(g / y, a.shape), unbroadcast(-g * x / (y * y), b.shape)

    return make_op("div", x / y, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def backward(g):
        return (g * exponent * x ** (exponent - 1),)

    return make_op("pow", x ** exponent, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op("log", np.log(x), (a,), lambda g: (g / x,))


# -- reductions and shape ---------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g):
        return (np.array(_expand_reduced(np.asarray(g), a.shape, axis, keepdims)),)

    return make_op("sum", out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    count = a.size // max(np.asarray(out).size, 1)

    def backward(g):
        return (np.array(_expand_reduced(np.asarray(g), a.shape, axis, keepdims)) / count,)

    return make_op("mean", out, (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return make_op("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    x, y = a.data, b.data

    def backward(g):
        return g @ y.T, x.T @ g

    return make_op("matmul", x @ y, (a, b), backward)


# -- reverse pass -------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.seq in seen:
            continue
        seen[t.seq] = t
        if t.node is not None:
            stack.extend(t.node.parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def parameter_key(t: Tensor) -> str:
    return t.name if t.name is not None else f"tensor{t.seq}"


def backward(loss: Tensor) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every reachable leaf
    that requires gradients, keyed by parameter name.

    The tape is not consumed; calling this twice yields identical results.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {loss.seq: np.ones(loss.shape, dtype=np.float64)}
    grads: dict[str, Tensor] = {}
    for t in _reachable(loss):
        g = pending.pop(t.seq, None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                key = parameter_key(t)
                if key in grads:
                    raise ValueError(f"two leaves share the parameter name {key!r}")
                grads[key] = Tensor._from_op(np.array(g, dtype=np.float64), None)
            continue
        for parent, pg in zip(t.node.parents, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                pg = unbroadcast(pg, parent.shape)
            prev = pending.get(parent.seq)
            pending[parent.seq] = pg if prev is None else prev + pg
    return grads
