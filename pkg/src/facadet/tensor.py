"""Dense tensors with a recording tape for reverse-mode differentiation.

Every differentiable operation in the package is expressed as a forward
computation on NumPy arrays plus a backward rule. Forward calls append a
record to the active :class:`Tape`; :func:`backward` replays those records
in exact reverse order.

Arrays default to float32. Operations preserve the dtype of their inputs,
so a float64 copy of a graph runs the same code path (used by the gradient
checker to separate truncation error from round-off).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised when backward is called on something it cannot differentiate."""


class Tensor:
    """An n-d array (normally NCHW) with an optional gradient slot."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "name", "_is_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._is_op = False

    # -- array protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of differentiable operations for one training step."""

    def __init__(self):
        self.records: list[Record] = []
        self._leaves: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, fn) -> None:
        for t in inputs:
            if t.requires_grad and not t._is_op:
                self._leaves[id(t)] = t
        self.records.append(Record(out, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires grad")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if not loss._is_op:
            _accumulate_leaf(loss, grads.pop(id(loss)))
            return
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._is_op:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    _accumulate_leaf(t, gi)

    def reset(self) -> None:
        """Drop all records and zero the gradients of every leaf seen."""
        for t in self._leaves.values():
            t.zero_grad()
        self.records.clear()
        self._leaves.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextmanager
def use_tape(tape: Optional[Tape] = None) -> Iterator[Tape]:
    """Temporarily record into ``tape`` (a fresh one by default)."""
    tape = Tape() if tape is None else tape
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate across calls until the tape is reset.
    """
    (tape or _state.tape).backward(loss)


def make(data: np.ndarray, inputs: tuple, fn) -> Tensor:
    """Wrap an op result, recording ``fn`` if any input needs a gradient."""
    out = Tensor(data, dtype=data.dtype)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_op = True
        _state.tape.record(out, inputs, fn)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                           _unbroadcast(g, sb) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                           _unbroadcast(-g, sb) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b),
                lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                           _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return (_unbroadcast(ga, ad.shape) if a.requires_grad else None,
                _unbroadcast(-ga * out, bd.shape) if b.requires_grad else None)

    return make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    e = float(exponent)
    return make(ad ** e, (a,), lambda g: (g * e * ad ** (e - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,))


def atan(a: Tensor) -> Tensor:
    ad = a.data
    return make(np.arctan(ad), (a,), lambda g: (g / (1.0 + ad * ad),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    ad = a.data
    s = _sigmoid_np(ad)
    return make(ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0) + np.log1p(np.exp(-np.abs(ad)))
    return make(out.astype(ad.dtype, copy=False), (a,), lambda g: (g * _sigmoid_np(ad),))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return make(np.maximum(ad, bd), (a, b),
                lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)))


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return make(np.minimum(ad, bd), (a, b),
                lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    ad = a.data
    keep = ad > lo
    return make(np.where(keep, ad, np.asarray(lo, ad.dtype)), (a,), lambda g: (g * keep,))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits; targets are constants."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return make(out.astype(x.dtype, copy=False), (logits,), lambda g: (g * (_sigmoid_np(x) - t),))


# ---------------------------------------------------------------------------
# Reductions and shape
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing and integer-array gathers; repeated indices accumulate."""
    shape, dtype = a.shape, a.dtype

    fancy = any(isinstance(i, (np.ndarray, list)) for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return make(np.array(a.data[index]), (a,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        s = list(x.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"cannot concatenate shapes {xs[0].shape} and {x.shape} along axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        sl = [slice(None)] * g.ndim
        res = []
        for i in range(len(xs)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return res

    return make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack NCHW tensors along C."""
    xs = [as_tensor(x) for x in xs]
    for x in xs[1:]:
        if x.ndim != 4 or x.shape[0] != xs[0].shape[0] or x.shape[2:] != xs[0].shape[2:]:
            raise ShapeError(f"channel concat needs equal N,H,W: {xs[0].shape} vs {x.shape}")
    return concat(xs, axis=1)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover {x.shape[1]} channels")
    return [x[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes))]


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with NumPy batch semantics (2-D is the common case)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make(ad @ bd, (a, b), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilised by subtracting the row max."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs rows of length >= 1")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make(out, (x,), bw)


def zeros(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
