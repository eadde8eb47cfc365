"""Reverse-mode automatic differentiation over dense float64 arrays.

Every value is a Tensor wrapping a float64 ndarray. Operations executed
while a Tape is active are recorded in execution order, which is already
a valid topological order, so backward() is a single reverse sweep that
visits each recorded operation exactly once.

Conventions:
  * float64 everywhere; no in-place mutation of tracked tensors
  * gradients accumulate into same-shape .grad buffers, lazily allocated
  * broadcasting in elementwise ops is undone in backward by summing the
    broadcast axes (see _unbroadcast)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigurationError, UsageError

_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the heavy lifting lives in the module-level ops
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations for one forward pass.

    Entries are appended in execution order; backward() walks them in
    reverse, pushing each output gradient to the entry's inputs. Entries
    whose output never received a gradient are skipped.
    """

    def __init__(self):
        self._entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if not loss.requires_grad:
            raise UsageError("loss is not connected to any tracked tensor")
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self._entries):
            out_grad = entry.out.grad
            if out_grad is None:
                continue
            grads = entry.backward(out_grad)
            for tensor, grad in zip(entry.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Wrap out_data in a Tensor and record the op if tracking is active."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._entries.append(_Entry(out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded to reach shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ConfigurationError(
            f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * b_data, a_data.shape),
            _unbroadcast(g * a_data, b_data.shape),
        )

    return record((a, b), out, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = a.data / b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g / b_data, a_data.shape),
            _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape),
        )

    return record((a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    return record((a,), -a.data, lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    a_data = a.data
    return record((a,), a_data * a_data, lambda g: (2.0 * a_data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record((a,), out, lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record((a,), out, lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record((a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # 0.5 * (tanh(x/2) + 1) is stable for large |x|
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return record((a,), out, lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|)), stable at both tails."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        return (g * 0.5 * (np.tanh(-0.5 * x) + 1.0),)

    return record((a,), out, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record((a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    # gradient passes on the closed interval so a value parked exactly at a
    # bound can still move; strictly outside the bound it is cut
    mask = (a.data >= lo) & (a.data <= hi)
    return record((a,), out, lambda g: (g * mask,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("minimum", a, b)
    take_a = a.data <= b.data  # ties route to the first argument
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return record((a, b), out, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape
    return record((a,), np.sum(a.data), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record((a,), out, backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return record(
        (a,), np.mean(a.data), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def max_over_vector(a: Tensor, axis: int = -1) -> Tensor:
    """Max along one axis; backward sends all gradient to the first maximum."""
    out = np.max(a.data, axis=axis)
    argmax = np.argmax(a.data, axis=axis)  # np.argmax returns the lowest index
    shape = a.data.shape

    def backward(g):
        grad = np.zeros(shape)
        np.put_along_axis(
            grad,
            np.expand_dims(argmax, axis),
            np.expand_dims(g, axis),
            axis=axis,
        )
        return (grad,)

    return record((a,), out, backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return record(
        (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(sizes)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return record(tuple(tensors), out, backward)


def take(a: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather elements of the flattened tensor at fixed integer indices."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    out = a.data.reshape(-1)[idx]
    shape = a.data.shape

    def backward(g):
        grad = np.zeros(a.data.size)
        np.add.at(grad, idx, g.reshape(-1))
        return (grad.reshape(shape),)

    return record((a,), out, backward)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of two 1-D vectors; defined as 0 with zero gradient when
    either vector has zero norm."""
    if u.data.shape != v.data.shape or u.data.ndim != 1:
        raise ConfigurationError(
            f"cosine_similarity: expected equal 1-D shapes, got {u.data.shape} "
            f"and {v.data.shape}"
        )
    ud, vd = u.data, v.data
    nu = float(np.linalg.norm(ud))
    nv = float(np.linalg.norm(vd))
    if nu == 0.0 or nv == 0.0:
        return record(
            (u, v), np.float64(0.0), lambda g: (np.zeros_like(ud), np.zeros_like(vd))
        )
    cos = float(ud @ vd) / (nu * nv)

    def backward(g):
        gu = g * (vd / (nu * nv) - cos * ud / (nu * nu))
        gv = g * (ud / (nu * nv) - cos * vd / (nv * nv))
        return gu, gv

    return record((u, v), np.float64(cos), backward)
