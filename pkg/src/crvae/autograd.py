"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs include a tensor
attached to it. Leaves enter a tape through :meth:`Tape.watch`; tensors
built directly from arrays are detached constants. Broadcasting is limited
to a shape ``()`` operand combined with a tensor of any shape.

Example::

    tape = Tape()
    x = tape.watch(2.0)
    y = tape.watch(3.0)
    grads = backward(tape, x * y)
    grads[x.node].item()  # 3.0
"""

from __future__ import annotations

from numbers import Number
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "affine",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "clamp",
    "sum",
    "mean",
    "reshape",
    "slice",
    "concat",
    "take",
    "OPS",
]

MAX_AXES = 5


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class Tensor:
    """Immutable float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "node", "tape")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, *, _node: int | None = None, _tape: "Tape | None" = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"at most {MAX_AXES} axes supported, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.node = _node
        self.tape = _tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, node=None, tape=None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.node = node
        t.tape = tape
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def attached(self) -> bool:
        return self.node is not None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.attached else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Number):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Number):
            if other == 0:
                raise ZeroDivisionError("division of a tensor by zero")
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# A recorded op: output node, input nodes (None for detached inputs), and a
# vector-Jacobian rule mapping the output cotangent to one cotangent per input.
_Record = tuple[int, tuple, Callable[[np.ndarray], Sequence]]


class Tape:
    """Ordered record of operations; confined to the thread that owns it."""

    def __init__(self):
        self._records: list[_Record] = []
        self._leaves: dict[int, tuple] = {}
        self._count = 0

    def __len__(self) -> int:
        return len(self._records)

    def _new_node(self) -> int:
        node = self._count
        self._count += 1
        return node

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf and return it attached."""
        t = Tensor(value)
        node = self._new_node()
        t.node, t.tape = node, self
        self._leaves[node] = t.shape
        return t

    @property
    def leaves(self) -> list[int]:
        return list(self._leaves)

    def _record(self, inputs: Sequence[Tensor], vjp) -> int:
        node = self._new_node()
        self._records.append((node, tuple(x.node for x in inputs), vjp))
        return node


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (Number, np.ndarray, list, tuple)):
        return Tensor(x)
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _emit(out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands are attached to different tapes")
            tape = x.tape
    if tape is None:
        return Tensor._wrap(out)
    return Tensor._wrap(out, tape._record(inputs, vjp), tape)


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform "
                     "(only scalar-with-tensor broadcasting is supported)")


def _fold(g: np.ndarray, shape: tuple) -> np.ndarray:
    # reverse of scalar broadcasting
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Gradient of a scalar ``loss`` with respect to every leaf of ``tape``.

    Leaves with no path to ``loss`` receive an exact zero tensor.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss is not attached to the given tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for out, ins, vjp in reversed(tape._records):
        g = grads.pop(out, None)
        if g is None:
            continue
        for node, gi in zip(ins, vjp(g)):
            if node is None or gi is None:
                continue
            if node in grads:
                grads[node] = grads[node] + gi
            else:
                grads[node] = gi
    result = {}
    for node, shape in tape._leaves.items():
        g = grads.get(node)
        result[node] = Tensor._wrap(np.zeros(shape) if g is None else np.reshape(g, shape))
    return result


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_fold(g, a.shape), _fold(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("subtract", a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_fold(g, a.shape), _fold(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("multiply", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_fold(g * bd, a.shape), _fold(g * ad, b.shape)))


def div(a, b) -> Tensor:
    """Elementwise quotient; the denominator must be strictly positive."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("divide", a, b)
    if np.any(b.data <= 0):
        raise ValueError("divide: non-positive denominator (clamp it first)")
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(out, (a, b),
                 lambda g: (_fold(g / bd, a.shape), _fold(-g * out / bd, b.shape)))


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _emit(-x.data, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="raise"):
        try:
            out = np.exp(x.data)
        except FloatingPointError:
            raise ValueError("exp overflow; clamp the argument first") from None
    return _emit(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value (clamp the argument first)")
    d = x.data
    return _emit(np.log(d), (x,), lambda g: (g / d,))


def sqrt(x) -> Tensor:
    """Square root. Zero inputs get a zero subgradient instead of infinity."""
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _emit(out, (x,), vjp)


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    s = np.sign(x.data)
    return _emit(np.abs(x.data), (x,), lambda g: (g * s,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero strictly outside the interval."""
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``x`` (batch, in), ``w`` (in, out), ``b`` (out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if (x.ndim != 2 or w.ndim != 2 or b.ndim != 1
            or x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]):
        raise ShapeError(f"affine: shapes {x.shape}, {w.shape}, {b.shape} do not conform")
    xd, wd = x.data, w.data
    return _emit(xd @ wd + b.data, (x, w, b),
                 lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# --------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return _emit(x.data.sum(axis=axes), (x,),
                 lambda g: (np.broadcast_to(np.reshape(g, kept), shape),))


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean over an empty selection of shape {x.shape}")
    return scale(sum(x, axis), 1.0 / count)


# ------------------------------------------------------------------- layout

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {src} as {tuple(shape)}") from None
    if out.ndim > MAX_AXES:
        raise ShapeError(f"at most {MAX_AXES} axes supported, got {out.shape}")
    return _emit(out, (x,), lambda g: (np.reshape(g, src),))


def slice(x, index) -> Tensor:  # noqa: A001
    """Basic (int/slice) indexing; fancy indexing goes through :func:`take`."""
    x = _as_tensor(x)
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not (isinstance(i, (int, np.integer)) or i is Ellipsis
                or type(i).__name__ == "slice"):
            raise TypeError("slice supports ints, slices and Ellipsis only; use take()")
    src = x.shape

    def vjp(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _emit(np.array(x.data[index]), (x,), vjp)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    axis = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), vjp)


def take(x, indices, axis: int | None = None) -> Tensor:
    """Gather entries like :func:`numpy.take`; repeated indices accumulate."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    src = x.shape
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros(src)
        if axis is None:
            flat = full.reshape(-1)
            np.add.at(flat, idx.reshape(-1), g.reshape(-1))
        else:
            ax = axis % len(src)
            moved = np.moveaxis(full, ax, 0)
            gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
            np.add.at(moved, idx, gm)
        return (full,)

    return _emit(out, (x,), vjp)


# Registry of differentiable ops, used by the gradient checks.
OPS = {
    "add": add, "subtract": sub, "multiply": mul, "divide": div, "negate": neg,
    "scale": scale, "matmul": matmul, "affine": affine, "sigmoid": sigmoid,
    "tanh": tanh, "relu": relu, "exp": exp, "log": log, "sqrt": sqrt,
    "abs": absolute, "clamp": clamp, "sum": sum, "mean": mean,
    "reshape": reshape, "slice": slice, "concat": concat, "take": take,
}
