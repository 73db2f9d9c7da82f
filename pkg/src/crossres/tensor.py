"""Dense float tensors with reverse-mode automatic differentiation.

The graph is an explicit tape: while a ``Tape`` is active, every operation
whose inputs require gradients appends a backward closure. ``Tape.backward``
walks the closures in reverse execution order and then drops them, so the
graph lives exactly as long as one forward/backward cycle. Without an active
tape, all operations are plain (inference-mode) array math.

Arrays are float32 by default; float64 inputs stay float64 so the gradient
checker can run the same code in double precision.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible, naming the offending axis."""


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tape:
    """Records backward closures for one forward pass.

    One tape is single-threaded; independent tapes (separate threads or
    sequential phases) never share entries. Entries are cleared after
    ``backward`` so a tape can be reused, though fresh tapes are cheap.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def record(self, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        out._tracked = True
        self._entries.append((out, backward))

    def backward(self, root: "Tensor") -> None:
        """Back-propagate from a scalar tensor and free the graph."""
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if not root._tracked:
            self._entries.clear()
            return
        root.grad = np.ones_like(root.data)
        for out, fn in reversed(self._entries):
            if out.grad is not None:
                fn(out.grad)
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


class Tensor:
    """A numpy array plus optional gradient buffer.

    ``requires_grad`` marks leaves (parameters). Non-leaf tensors produced
    under an active tape are tracked automatically. ``grad`` is allocated
    lazily on first accumulation and always matches ``data`` in shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tracked = self.requires_grad

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's array, cut off from the graph."""
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, own: bool = False) -> None:
        """Add g into the grad buffer.

        ``own=True`` promises g is a freshly allocated array no other tensor
        references, letting the first accumulation adopt it without a copy.
        """
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use explicit ops")
        return scale(self, 1.0 / float(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> None:
    """Append a tape entry if grads are being tracked for any input."""
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        tape.record(out, backward)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ShapeError(f"{op}: operands differ on axis {axis}: {da} vs {db}")
        raise ShapeError(f"{op}: operand ranks differ: {a.shape} vs {b.shape}")


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g if a.data.size != 1 else g.sum(keepdims=a.ndim > 0).reshape(a.shape))
        if b._tracked:
            b.accumulate_grad(g if b.data.size != 1 else g.sum(keepdims=b.ndim > 0).reshape(b.shape))

    _record(out, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g if a.data.size != 1 else g.sum(keepdims=a.ndim > 0).reshape(a.shape))
        if b._tracked:
            gb = -g
            b.accumulate_grad(gb if b.data.size != 1 else gb.sum(keepdims=b.ndim > 0).reshape(b.shape), own=b.data.size != 1)

    _record(out, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(as_tensor(a), float(b))
    if not isinstance(a, Tensor):
        return scale(b, float(a))
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            ga = g * b.data
            a.accumulate_grad(ga if a.data.size != 1 else ga.sum(keepdims=a.ndim > 0).reshape(a.shape), own=a.data.size != 1)
        if b._tracked:
            gb = g * a.data
            b.accumulate_grad(gb if b.data.size != 1 else gb.sum(keepdims=b.ndim > 0).reshape(b.shape), own=b.data.size != 1)

    _record(out, (a, b), backward)
    return out


def scale(a: Tensor, k: float) -> Tensor:
    a = as_tensor(a)
    k = a.data.dtype.type(k)
    out = Tensor(a.data * k)

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g * k, own=True)

    _record(out, (a,), backward)
    return out


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g * (2.0 * a.data), own=True)

    _record(out, (a,), backward)
    return out


def abs_(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g * np.sign(a.data), own=True)

    _record(out, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g / a.data, own=True)

    _record(out, (a,), backward)
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    data = np.maximum(a.data, a.data.dtype.type(lo))
    out = Tensor(data)
    mask = a.data > lo

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g * mask, own=True)

    _record(out, (a,), backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # numerically stable split over sign
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = Tensor(data)

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g * (data * (1.0 - data)), own=True)

    _record(out, (a,), backward)
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise max(x, slope*x)."""
    a = as_tensor(a)
    mask = a.data >= 0
    s = a.data.dtype.type(slope)
    out = Tensor(np.where(mask, a.data, a.data * s))

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(np.where(mask, g, g * s), own=True)

    _record(out, (a,), backward)
    return out


# -- reductions ------------------------------------------------------------


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))
    n = a.data.size

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False))

    _record(out, (a,), backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    _record(out, (a,), backward)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    out = Tensor(np.asarray(np.mean(diff * diff), dtype=a.dtype))
    n = a.data.size

    def backward(g: np.ndarray) -> None:
        gd = (2.0 / n) * g * diff
        if a._tracked:
            a.accumulate_grad(gd, own=True)
        if b._tracked:
            b.accumulate_grad(-gd, own=True)

    _record(out, (a, b), backward)
    return out


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "l1")
    diff = a.data - b.data
    out = Tensor(np.asarray(np.mean(np.abs(diff)), dtype=a.dtype))
    n = a.data.size

    def backward(g: np.ndarray) -> None:
        gd = (g / n) * np.sign(diff)
        if a._tracked:
            a.accumulate_grad(gd.astype(a.dtype, copy=False), own=a.dtype == gd.dtype)
        if b._tracked:
            b.accumulate_grad((-gd).astype(b.dtype, copy=False), own=True)

    _record(out, (a, b), backward)
    return out


# -- shape ops ---------------------------------------------------------------


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (N,C,H,W) tensors along the channel axis."""
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    for t in ts[1:]:
        for axis in (0, 2, 3):
            if t.shape[axis] != ref.shape[axis]:
                raise ShapeError(
                    f"concat_channels: operands differ on axis {axis}: "
                    f"{ref.shape[axis]} vs {t.shape[axis]}"
                )
    out = Tensor(np.concatenate([t.data for t in ts], axis=1))
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]

    def backward(g: np.ndarray) -> None:
        parts = np.split(g, splits, axis=1)
        for t, p in zip(ts, parts):
            if t._tracked:
                t.accumulate_grad(p)

    _record(out, ts, backward)
    return out


def concat_batch(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (N,C,H,W) tensors along the batch axis."""
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    for t in ts[1:]:
        if t.shape[1:] != ref.shape[1:]:
            raise ShapeError(
                f"concat_batch: per-sample shapes differ: {ref.shape[1:]} vs {t.shape[1:]}"
            )
    out = Tensor(np.concatenate([t.data for t in ts], axis=0))
    splits = np.cumsum([t.shape[0] for t in ts])[:-1]

    def backward(g: np.ndarray) -> None:
        parts = np.split(g, splits, axis=0)
        for t, p in zip(ts, parts):
            if t._tracked:
                t.accumulate_grad(p)

    _record(out, ts, backward)
    return out


def slice_batch(a: Tensor, start: int, stop: int) -> Tensor:
    """View rows [start, stop) of the batch axis as a new tensor."""
    a = as_tensor(a)
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice_batch: [{start}, {stop}) outside batch of {a.shape[0]}")
    out = Tensor(a.data[start:stop])

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            buf = np.zeros_like(a.data)
            buf[start:stop] = g
            a.accumulate_grad(buf, own=True)

    _record(out, (a,), backward)
    return out


def pad2d(a: Tensor, pad: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    a = as_tensor(a)
    top, bottom, left, right = pad
    out = Tensor(
        np.pad(a.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    )
    h, w = a.shape[2], a.shape[3]

    def backward(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g[:, :, top : top + h, left : left + w])

    _record(out, (a,), backward)
    return out


# -- initialization ----------------------------------------------------------


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
               slope: float = 0.2) -> np.ndarray:
    """He-style uniform init matched to leaky-relu gain."""
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
