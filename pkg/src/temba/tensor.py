"""Reverse-mode autodiff on numpy arrays with an explicit gradient tape.

Design notes, kept short because the code is the contract:

* A ``Tensor`` wraps a C-contiguous float32/float64 ndarray of rank <= 3
  with (batch, time, channels) semantics, a lazily allocated ``grad``
  slot of the same shape/dtype, and a ``requires_grad`` flag.
* A ``Tape`` is an ordered record of executed primitives. Ops record
  themselves only while a tape is active and some input requires grad.
  ``Tape.backward(root)`` seeds d(root)/d(root) = 1 and replays the
  record once, in reverse execution order; fan-out accumulates
  additively, frozen leaves accumulate nothing.
* Slices and gathers copy; nothing on the tape aliases anything else.
* Every primitive checks its output for NaN/Inf and raises NumericFault
  naming the op. The check is a self dot product (NaN and Inf both
  poison it) with an exact isfinite confirmation when it trips, so the
  hot path is one BLAS call and overflow can't cause a false alarm.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericFault

_FLOAT_DTYPES = (np.float32, np.float64)

_np_dot = np.dot


def _all_finite(arr: np.ndarray) -> bool:
    # Fast path: a self dot product goes non-finite whenever the array holds
    # a nan or inf. It can also overflow on finite values past ~1e154, so a
    # suspicious result is confirmed with the exact (slower) check before
    # anyone gets told the array is bad.
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if not arr.size:
        return True
    if math.isfinite(_np_dot(arr, arr)):
        return True
    return bool(np.isfinite(arr).all())


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not _all_finite(arr):
        raise NumericFault(f"{op}: non-finite output")


class Tensor:
    """A rank <= 3 float array with a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise ContractViolation(f"tensor rank {arr.ndim} > 3")
        # ascontiguousarray would promote 0-d to shape (1,); keep scalars 0-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; every overload routes through the module primitives
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class _Entry:
    __slots__ = ("name", "out", "fn")

    def __init__(self, name: str, out: Tensor, fn: Callable[[np.ndarray], None]):
        self.name = name
        self.out = out
        self.fn = fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitives; replayed in reverse by backward()."""

    def __init__(self):
        self._entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into every recorded tensor's grad."""
        if root.ndim != 0:
            raise ContractViolation(
                f"backward root must be a scalar, got shape {root.shape}")
        if root.grad is None:
            root.grad = np.ones((), dtype=root.dtype)
        for entry in reversed(self._entries):
            g = entry.out.grad
            if g is None:
                continue  # op not on any path to the root: zero flows, skip
            entry.fn(g)


def backward(root: Tensor, tape: Tape | None = None) -> None:
    if tape is None:
        if not _TAPE_STACK:
            raise ContractViolation("backward called with no active tape")
        tape = _TAPE_STACK[-1]
    tape.backward(root)


def accum_grad(t: Tensor, g: np.ndarray) -> None:
    """Add g into t.grad, allocating on first touch. No-op for frozen leaves."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def record_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Create the output tensor of a primitive and register its backward.

    ``backward_fn(out_grad)`` must accumulate into the inputs via
    accum_grad. This is the extension point used by the scan kernel,
    dilation, and the fused losses.
    """
    _check_finite(name, out_data)
    needs = bool(_TAPE_STACK) and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out_data = np.asarray(out_data)
    # keep 0-d outputs 0-d (ascontiguousarray would promote them to (1,))
    out.data = out_data if out_data.ndim == 0 else np.ascontiguousarray(out_data)
    out.grad = None
    out.requires_grad = needs
    if out.data.ndim > 3:
        raise ContractViolation(f"{name}: output rank {out.data.ndim} > 3")
    if needs:
        _TAPE_STACK[-1]._entries.append(_Entry(name, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(name: str, a: Tensor, b: Tensor, out_data: np.ndarray,
            da: Callable[[np.ndarray], np.ndarray],
            db: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    def fn(g):
        accum_grad(a, _unbroadcast(da(g), a.shape))
        accum_grad(b, _unbroadcast(db(g), b.shape))
    return record_op(name, (a, b), out_data, fn)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting; grads un-broadcast by summation)

def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, a.data * b.data,
                   lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _binary("div", a, b, out,
                   lambda g: g / b.data,
                   lambda g: -g * a.data / (b.data * b.data))


def neg(a: Tensor) -> Tensor:
    def fn(g):
        accum_grad(a, -g)
    return record_op("neg", (a,), -a.data, fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(T,K)@(K,N) or (B,T,K)@(K,N); the right operand is always rank 2."""
    if b.ndim != 2:
        raise ContractViolation(f"matmul: right operand must be rank 2, got {b.shape}")
    if a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        accum_grad(a, g @ b.data.T)
        if a.ndim == 2:
            accum_grad(b, a.data.T @ g)
        else:
            accum_grad(b, np.tensordot(a.data, g, axes=([0, 1], [0, 1])))
    return record_op("matmul", (a, b), out, fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b in one tape entry; same shape rules as matmul, b rank 1."""
    if w.ndim != 2:
        raise ContractViolation(f"linear: weight must be rank 2, got {w.shape}")
    if x.ndim not in (2, 3) or x.shape[-1] != w.shape[0]:
        raise ContractViolation(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.ndim != 1 or b.shape[0] != w.shape[1]:
            raise ContractViolation(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out += b.data

    def fn(g):
        accum_grad(x, g @ w.data.T)
        if x.ndim == 2:
            accum_grad(w, x.data.T @ g)
        else:
            accum_grad(w, np.tensordot(x.data, g, axes=([0, 1], [0, 1])))
        if b is not None:
            accum_grad(b, g.sum(axis=tuple(range(g.ndim - 1))))
    inputs = (x, w) if b is None else (x, w, b)
    return record_op("linear", inputs, out, fn)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def fn(g):
        accum_grad(a, g * out)
    return record_op("exp", (a,), out, fn)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def fn(g):
        accum_grad(a, g / a.data)
    return record_op("log", (a,), out, fn)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def fn(g):
        accum_grad(a, g * (0.5 / out))
    return record_op("sqrt", (a,), out, fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def fn(g):
        accum_grad(a, g * out * (1.0 - out))
    return record_op("sigmoid", (a,), out, fn)


def softplus(a: Tensor) -> Tensor:
    # overflow-safe: x + log1p(exp(-x)) for x > 0, log1p(exp(x)) otherwise
    x = a.data
    out = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))),
                   np.log1p(np.exp(np.minimum(x, 0.0))))

    def fn(g):
        accum_grad(a, g * _sigmoid(x))
    return record_op("softplus", (a,), out, fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def fn(g):
        accum_grad(a, g * (1.0 - out * out))
    return record_op("tanh", (a,), out, fn)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def fn(g):
        accum_grad(a, g * (s * (1.0 + a.data * (1.0 - s))))
    return record_op("silu", (a,), out, fn)


# ---------------------------------------------------------------------------
# reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accum_grad(a, np.broadcast_to(g, a.shape).copy())
    return record_op("sum", (a,), out, fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accum_grad(a, np.broadcast_to(g / count, a.shape).copy())
    return record_op("mean", (a,), out, fn)


# ---------------------------------------------------------------------------
# shape and indexing ops (all of these copy)

def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise ContractViolation("transpose without axes requires rank 2")
        axes = (1, 0)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def fn(g):
        accum_grad(a, np.ascontiguousarray(g.transpose(inv)))
    return record_op("transpose", (a,), out, fn)


def index_select(a: Tensor, axis: int, idx: np.ndarray) -> Tensor:
    """Strided gather along ``axis``; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def fn(g):
        buf = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = idx
        np.add.at(buf, tuple(sl), g)
        accum_grad(a, buf)
    return record_op("index_select", (a,), out, fn)


def scatter_select(a: Tensor, axis: int, idx: np.ndarray, length: int) -> Tensor:
    """Inverse of index_select: place slices of ``a`` at ``idx`` in a zero
    tensor whose ``axis`` has size ``length``. Indices must be unique."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size != np.unique(idx).size:
        raise ContractViolation("scatter_select: duplicate indices")
    shape = list(a.shape)
    shape[axis] = length
    out = np.zeros(shape, dtype=a.dtype)
    sl = [slice(None)] * a.ndim
    sl[axis] = idx
    out[tuple(sl)] = a.data

    def fn(g):
        accum_grad(a, np.ascontiguousarray(g[tuple(sl)]))
    return record_op("scatter_select", (a,), out, fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along ``axis`` (copying)."""
    if start < 0 or start + length > a.shape[axis]:
        raise ContractViolation(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(sl)])

    def fn(g):
        buf = np.zeros_like(a.data)
        buf[tuple(sl)] = g
        accum_grad(a, buf)
    return record_op("narrow", (a,), out, fn)


def flip(a: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(a.data, axis=axis))

    def fn(g):
        accum_grad(a, np.ascontiguousarray(np.flip(g, axis=axis)))
    return record_op("flip", (a,), out, fn)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)
    ax = axis if axis >= 0 else out.ndim + axis

    def fn(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            accum_grad(t, np.ascontiguousarray(g[tuple(sl)]))
    return record_op("concat", tuple(ts), out, fn)


# ---------------------------------------------------------------------------
# fused layers

def conv1d_depthwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Causal depthwise temporal convolution.

    x: (B, T, D), weight: (D, w), bias: (D,). Output position t sees
    inputs t-w+1 .. t (left zero padding), independently per channel.
    """
    if x.ndim != 3 or weight.ndim != 2 or x.shape[2] != weight.shape[0]:
        raise ContractViolation(
            f"conv1d_depthwise: incompatible shapes {x.shape}, {weight.shape}")
    B, T, D = x.shape
    w = weight.shape[1]
    out = np.broadcast_to(bias.data, (B, T, D)).copy()
    for j in range(w):
        shift = w - 1 - j  # how far in the past tap j looks
        if shift < T:
            out[:, shift:, :] += weight.data[:, j] * x.data[:, :T - shift, :]

    def fn(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for j in range(w):
            shift = w - 1 - j
            if shift < T:
                gx[:, :T - shift, :] += weight.data[:, j] * g[:, shift:, :]
                gw[:, j] = np.sum(g[:, shift:, :] * x.data[:, :T - shift, :], axis=(0, 1))
        accum_grad(x, gx)
        accum_grad(weight, gw)
        accum_grad(bias, g.sum(axis=(0, 1)))
    return record_op("conv1d_depthwise", (x, weight, bias), out, fn)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / sqrt(mean(x^2, channels) + eps) * gain."""
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xh = x.data * r
    out = xh * gain.data

    def fn(g):
        dxh = g * gain.data
        accum_grad(gain, np.sum(g * xh, axis=tuple(range(x.ndim - 1))))
        dot = np.mean(dxh * xh, axis=-1, keepdims=True)
        accum_grad(x, r * (dxh - xh * dot))
    return record_op("rms_norm", (x, gain), out, fn)


# ---------------------------------------------------------------------------
# construction helpers

def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
