"""Small reverse-mode autodiff over float64 numpy arrays.

Only the primitives the recurrent graph model needs are provided. Every op
records a node on creation; `backward` replays the reachable nodes in reverse
creation order, which is a valid reverse topological order because inputs
always exist before the outputs computed from them.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.op = "leaf"

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
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __neg__(self):
        return hadamard(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum over leading axes that the operand lacked, then over stretched length-1 axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(_binary(np.add, a, b, "add"), (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(_binary(np.subtract, a, b, "sub"), (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(_binary(np.multiply, a, b, "hadamard"), (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "hadamard")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum propagates NaN so later finiteness checks see it
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids exp overflow for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def absolute(a: Tensor) -> Tensor:
    # subgradient at exactly zero is 0
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "hadamard"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(as_tensor(a))


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(_binary(np.matmul, a, b, "matmul"), (a, b), back, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {a.shape}")
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    if a.ndim < 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows: non-finite input")
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), back, "softmax")


# ----------------------------------------------------------------- structure

def concat_last(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last: leading axes of {a.shape} and {b.shape} differ")
    k = a.shape[-1]
    return _record(np.concatenate([a.data, b.data], axis=-1), (a, b),
                   lambda g: (g[..., :k], g[..., k:]), "concat")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along `axis`, dropping that axis."""
    axis = axis % a.ndim

    def back(g):
        full = np.zeros(a.shape)
        idx = [slice(None)] * a.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _record(np.take(a.data, index, axis=axis), (a,), back, "select")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _record(out, tensors, back, "stack")


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record(np.array(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


# ------------------------------------------------------------------ backward

class GradTape:
    """Operations reachable from a root, in the order they were executed."""

    def __init__(self, root: Tensor):
        seen: dict[int, Tensor] = {}
        stack_ = [root]
        while stack_:
            t = stack_.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen[id(t)] = t
            stack_.extend(t._parents)
        self.records = sorted((t for t in seen.values() if t._backward is not None),
                              key=lambda t: t._seq)

    def __len__(self) -> int:
        return len(self.records)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        adj: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.records):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    adj[key] = pg if key not in adj else adj[key] + pg
        if not self.records and root.requires_grad and root._backward is None:
            root.grad = seed.copy() if root.grad is None else root.grad + seed


def backward(root: Tensor) -> None:
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not depend on any tensor requiring grad")
    GradTape(root).replay(root, np.ones(root.shape))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
