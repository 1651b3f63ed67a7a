"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Values are immutable once created. Ops record onto the tape returned by
``record()`` whenever any input carries a gradient requirement; outside a
recording context every op is plain forward evaluation. One tape per training
step, one independent tape per federated client.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class TapeError(RuntimeError):
    """Backward invoked without a usable tape."""


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A flat float64 array with shape metadata and a grad-tracking flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

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

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return _wrap(self.data.copy(), rg)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every path goes through the recorded primitives
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(arr: np.ndarray, requires_grad: bool) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = requires_grad
    return t


class _Node:
    """One executed primitive: output, inputs, and the vector-Jacobian product."""

    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Execution-ordered record of primitive ops.

    Appending at op execution time guarantees topological order: every op's
    inputs were produced by earlier entries or are leaves.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[_Node] = []

    def __len__(self) -> int:
        return len(self.entries)


_ACTIVE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "fedtsseg_tape", default=None
)


@contextlib.contextmanager
def record():
    """Activate a fresh tape for the enclosed ops. Context-local, reentrant."""
    tape = Tape()
    token = _ACTIVE.set(tape)
    try:
        yield tape
    finally:
        _ACTIVE.reset(token)


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = _wrap(out_data, True)
        tape.entries.append(_Node(out, inputs, vjp))
        return out
    return _wrap(out_data, False)


def backward(loss: Tensor, wrt: Sequence[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    """Gradients of a scalar loss with respect to each tensor in ``wrt``.

    The walk reads the tape without consuming it, so several losses recorded
    on one tape can each be differentiated. Tensors in ``wrt`` that do not
    reach the loss get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _ACTIVE.get()
    if tape is None:
        raise TapeError("backward called outside a record() context and without a tape")
    if not tape.entries:
        raise TapeError("backward on an empty tape")

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.entries):
        g_out = acc.get(id(node.out))
        if g_out is None:
            continue
        grads = node.vjp(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            prev = acc.get(key)
            # out-of-place accumulation: the first stored array may alias an
            # upstream gradient and must never be mutated
            acc[key] = g if prev is None else prev + g
    return [acc.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# broadcast helpers (trailing/singleton axes only, equal rank)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch {sa} vs {sb} (reshape explicitly)")
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")
    return tuple(out)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    shape = _broadcast_shape(a, b, "add")
    out = a.data + b.data
    return _emit(out, (a, b), lambda g, sa=a.shape, sb=b.shape: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    return _emit(out, (a, b), lambda g, sa=a.shape, sb=b.shape: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def vjp(g, a=a, b=b):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _emit(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def vjp(g, a=a, b=b):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g, c=c: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.ndim > 3:
        raise ShapeError(f"matmul supports 2-d pairs or batched 3-d pairs, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def vjp(g, a=a, b=b):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _emit(out, (a, b), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g, inv=inv: (g.transpose(inv),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit(a.data.reshape(shape), (a,), lambda g, s=a.shape: (g.reshape(s),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis and d != ref[i] for i, d in enumerate(t.shape)
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g, axis=axis, offsets=offsets):
        sl = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(offsets) - 1):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _emit(out, tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    dim = a.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g, a=a, sl=sl):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _emit(a.data[sl], (a,), vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, a=a, axis=axis, keepdims=keepdims):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape),)

    return _emit(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty extent")
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g, a=a, axis=axis, keepdims=keepdims, count=count):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape),)

    return _emit(np.asarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _emit(out, (a,), lambda g, x=a.data: (g * (x > 0.0),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    out = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def vjp(g, x=x):
        d = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * d,)

    return _emit(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _emit(out, (a,), lambda g, y=out: (g * y * (1.0 - y),))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g, y=out: (g * y,))


def tabs(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    return _emit(out, (a,), lambda g, x=a.data: (g * np.sign(x),))


# hook point for attention-allocation instrumentation; see observe_softmax()
_SOFTMAX_OBSERVER: contextvars.ContextVar[Callable | None] = contextvars.ContextVar(
    "fedtsseg_softmax_observer", default=None
)


@contextlib.contextmanager
def observe_softmax(callback: Callable[[tuple[int, ...]], None]):
    """Report the shape of every softmax evaluated in the enclosed scope."""
    token = _SOFTMAX_OBSERVER.set(callback)
    try:
        yield
    finally:
        _SOFTMAX_OBSERVER.reset(token)


def softmax(a: Tensor, axis: int) -> Tensor:
    if axis >= a.ndim or a.ndim == 0:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    obs = _SOFTMAX_OBSERVER.get()
    if obs is not None:
        obs(a.shape)
    # max-subtraction keeps exp bounded for inputs of any magnitude
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, y=out, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _emit(out, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty normalization axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = centered * inv_std
    out = norm * gamma.data + beta.data

    def vjp(g, norm=norm, inv_std=inv_std, gamma=gamma, d=d):
        gn = g * gamma.data
        dx = (
            gn - gn.mean(axis=-1, keepdims=True) - norm * (gn * norm).mean(axis=-1, keepdims=True)
        ) * inv_std
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * norm).sum(axis=axes) if axes else g * norm
        dbeta = g.sum(axis=axes) if axes else g
        return dx, dgamma, dbeta

    return _emit(out, (x, gamma, beta), vjp)
