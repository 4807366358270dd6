"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside
a tape nothing is recorded, which is how inference runs without building a
graph::

    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # array([6.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "Tape",
    "Tensor",
    "backward",
    "clamp",
    "concat",
    "ewise",
    "exp",
    "gradcheck",
    "log",
    "log_softmax",
    "matmul",
    "no_grad_value",
    "reduce",
    "relu",
    "sigmoid",
    "softmax",
    "sqrt",
    "tanh",
]


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


@dataclass
class Node:
    inputs: tuple["Tensor", ...]
    out: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "affect_forge_tape", default=None
)


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        backward(loss, self)


class Tensor:
    """N-dimensional float64 array that may take part in a tape.

    ``grad`` is populated on leaf tensors (tensors not produced on the tape)
    and accumulates across backward calls until reset with :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return ewise("add", self, other)

    def __radd__(self, other):
        return ewise("add", other, self)

    def __sub__(self, other):
        return ewise("sub", self, other)

    def __rsub__(self, other):
        return ewise("sub", other, self)

    def __mul__(self, other):
        return ewise("mul", self, other)

    def __rmul__(self, other):
        return ewise("mul", other, self)

    def __truediv__(self, other):
        return ewise("div", self, other)

    def __rtruediv__(self, other):
        return ewise("div", other, self)

    def __neg__(self):
        return ewise("neg", self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce("max", self, axis, keepdims)

    def relu(self):
        return ewise("relu", self)

    def tanh(self):
        return ewise("tanh", self)

    def exp(self):
        return ewise("exp", self)

    def log(self):
        return ewise("log", self)

    def sigmoid(self):
        return sigmoid(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def no_grad_value(x) -> np.ndarray:
    """Raw array behind ``x``, whether a Tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input needs grad.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, each of the input's shape.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out.requires_grad = False
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(tuple(inputs), out, backward_fn))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


_UNARY = {"neg", "relu", "tanh", "exp", "log", "sigmoid", "sqrt"}
_BINARY = {"add", "sub", "mul", "div"}


def ewise(op: str, a, b=None, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Elementwise operation ``op`` applied to ``a`` (and ``b`` for binary ops).

    Binary ops broadcast with numpy rules; gradients are summed back over
    broadcast axes.  ``clamp`` takes ``lo``/``hi`` and has zero gradient
    outside ``[lo, hi]``.
    """
    a = as_tensor(a)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        b = as_tensor(b)
        _broadcast_shape(a, b, op)
        return _BINARY_IMPL[op](a, b)
    if b is not None:
        raise ValueError(f"{op} is unary")
    if op == "clamp":
        return clamp(a, lo, hi)
    if op in _UNARY:
        return _UNARY_IMPL[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def _add(a: Tensor, b: Tensor) -> Tensor:
    return make_result(
        a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape))
    )


def _sub(a: Tensor, b: Tensor) -> Tensor:
    return make_result(
        a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))
    )


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw)


def _div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


_BINARY_IMPL = {"add": _add, "sub": _sub, "mul": _mul, "div": _div}


def _neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # two-sided form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    x = a.data
    return make_result(x**p, (a,), lambda g: (g * p * x ** (p - 1.0),))


def clamp(a, lo: float | None, hi: float | None) -> Tensor:
    a = as_tensor(a)
    x = a.data
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    if lo_ > hi_:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    inside = (x >= lo_) & (x <= hi_)
    return make_result(np.clip(x, lo_, hi_), (a,), lambda g: (g * inside,))


_UNARY_IMPL = {
    "neg": _neg,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "sqrt": sqrt,
}


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` batching rules (rank >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dims {a.shape} and {b.shape} not broadcastable") from None

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw)


def _normalize_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (int, tuple of ints, or None for all).

    Max sends the whole gradient to the first maximal element in row-major
    order along the reduced axes.
    """
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    if op == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        return make_result(
            out, (a,), lambda g: (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),)
        )
    if op == "mean":
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        out = a.data.mean(axis=axes, keepdims=keepdims)
        return make_result(
            out,
            (a,),
            lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, a.shape).copy(),),
        )
    if op == "max":
        if a.size == 0:
            raise ValueError("max of empty tensor")
        rest = tuple(i for i in range(a.ndim) if i not in axes)
        moved = np.transpose(a.data, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        first = np.argmax(flat, axis=-1)
        out_kept = np.take_along_axis(flat, first[..., None], axis=-1)[..., 0].reshape(kept_shape)
        out = out_kept if keepdims else out_kept.reshape(
            tuple(n for i, n in enumerate(a.shape) if i not in axes)
        )

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, first[..., None], g.reshape(first.shape + (1,)), axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(rest + axes)),)

        return make_result(np.asarray(out), (a,), bw)
    raise ValueError(f"unknown reduction {op!r}")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _normalize_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _normalize_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, dtype=np.float64), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing grad."""
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if id(loss) not in produced:
        if loss.requires_grad:
            loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
        return
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi


def gradcheck(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-4,
    indices: Iterable[tuple[int, int]] | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f(*xs)`` must return a scalar.  Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.  ``indices``
    restricts the probe to ``(tensor_position, flat_index)`` pairs.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved_flags = [t.requires_grad for t in xs]
    saved_grads = [t.grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f(*xs)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ValueError("gradcheck: f must return a scalar Tensor")
        tape.backward(out)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        del tape

        if indices is None:
            indices = [(k, i) for k, t in enumerate(xs) for i in range(t.size)]
        worst = 0.0
        for k, i in indices:
            flat = xs[k].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = no_grad_value(f(*xs)).item()
            flat[i] = orig - h
            fm = no_grad_value(f(*xs)).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        return worst
    finally:
        for t, flag, g in zip(xs, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = g
