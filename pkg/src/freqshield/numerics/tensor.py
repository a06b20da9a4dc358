"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a contiguous real array. Operations on tensors that
require gradients record a node on an implicit tape (the parent links plus a
closure mapping the output gradient to parent gradients). ``backward`` walks
the tape in reverse topological order and accumulates into ``.grad`` of every
leaf that requires it.

Broadcasting is deliberately absent: binary ops need equal shapes or a Python
scalar on one side. Bias-add is handled inside the layers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DTYPE = [np.dtype(np.float32)]


def get_dtype() -> np.dtype:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradchecks)."""
    _DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that is not connected to any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(value: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "fn") -> Tensor:
    """Wrap ``value`` as the output of an op. ``backward(g)`` returns one gradient per parent."""
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "add")
        return apply(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return apply(a.data + b, (a,), lambda g: (g,), "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "sub")
        return apply(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    return apply(a.data - b, (a,), lambda g: (g,), "sub")


def neg(a: Tensor) -> Tensor:
    return apply(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "mul")
        ad, bd = a.data, b.data
        return apply(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if isinstance(b, np.ndarray):
        if b.shape != a.shape:
            raise ValueError(f"mul: constant shape {b.shape} vs {a.shape}")
        c = b.astype(a.data.dtype)
        return apply(a.data * c, (a,), lambda g: (g * c,), "mul")
    c = float(b)
    return apply(a.data * c, (a,), lambda g: (g * c,), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return apply(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return apply(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.full(shape, g, dtype=a.data.dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return apply(np.asarray(a.data.sum() / n, dtype=a.data.dtype), (a,),
                 lambda g: (np.full(shape, g / n, dtype=a.data.dtype),), "mean")


def dot(a: Tensor, c: np.ndarray) -> Tensor:
    """Inner product of a tensor with a constant array of the same shape."""
    c = np.asarray(c, dtype=a.data.dtype)
    if c.shape != a.shape:
        raise ValueError(f"dot: shape mismatch {a.shape} vs {c.shape}")
    return apply(np.asarray((a.data * c).sum(), dtype=a.data.dtype), (a,), lambda g: (g * c,), "dot")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _is_basic(idx):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return apply(np.ascontiguousarray(a.data[idx]), (a,), back, "getitem")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    data = np.stack([t.data for t in tensors])
    return apply(data, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return apply(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")
