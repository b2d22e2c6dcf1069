"""Dense tensors with reverse-mode differentiation on an explicit tape.

The engine is deliberately small: numpy arrays as storage, a module-level
tape that records every primitive application, and `backward()` which
replays the tape in reverse. Only the primitives the video operators need
are implemented; everything else is composed from them so each op gets its
gradient for free.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(dtype):
    """Accept 'f32'/'f64' strings or numpy dtypes, return a numpy dtype."""
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ParameterError(f"unknown dtype {dtype!r}; expected f32 or f64")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ParameterError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class TapeNode:
    """One recorded primitive application: output, inputs, pullback."""

    __slots__ = ("out", "inputs", "pullback")

    def __init__(self, out, inputs, pullback):
        self.out = out
        self.inputs = inputs
        self.pullback = pullback


class Tape:
    """Ordered record of primitive applications plus the leaves they consumed."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def clear(self):
        self.nodes.clear()
        self.leaves.clear()


_tape = Tape()


def active_tape() -> Tape:
    return _tape


def reset_tape():
    _tape.clear()


class Tensor:
    """N-dimensional array of f32/f64 reals, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; all routed through the recorded primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def zeros(shape, dtype="f64", requires_grad=False):
    return Tensor(np.zeros(shape, dtype=resolve_dtype(dtype)), requires_grad=requires_grad)


def ones(shape, dtype="f64", requires_grad=False):
    return Tensor(np.ones(shape, dtype=resolve_dtype(dtype)), requires_grad=requires_grad)


def _record(out_data, inputs, pullback) -> Tensor:
    """Wrap a primitive result; append a tape node if any input is tracked."""
    out = Tensor(out_data)
    if not _grad_enabled:
        return out
    tracked = False
    for t in inputs:
        if isinstance(t, Tensor) and t.requires_grad:
            tracked = True
            if t.is_leaf:
                _tape.leaves[id(t)] = t
    if tracked:
        out.requires_grad = True
        out.is_leaf = False
        _tape.nodes.append(TapeNode(out, inputs, pullback))
    return out


def backward(loss: Tensor, clear: bool = True):
    """Populate `.grad` on every tracked leaf reachable (or not) from `loss`.

    Walks the tape once in reverse recording order; leaves that do not
    influence the loss get a zero gradient. By default the tape is cleared
    afterwards so training loops do not accumulate stale nodes.
    """
    if not isinstance(loss, Tensor):
        raise ParameterError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ParameterError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.pullback(g)):
            if gi is None or not (isinstance(t, Tensor) and t.requires_grad):
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
        node.out.grad = None  # intermediates never keep grads
    for leaf in _tape.leaves.values():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)
    if clear:
        _tape.clear()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def pullback(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), pullback)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def pullback(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), pullback)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def pullback(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), pullback)


def power(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def pullback(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), pullback)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def pullback(g):
        return (g * out,)

    return _record(out, (a,), pullback)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def pullback(g):
        return (g / a.data,)

    return _record(out, (a,), pullback)


def relu(a) -> Tensor:
    """max(x, 0); the active set is strictly positive, grad 0 at exactly 0."""
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0).astype(a.data.dtype, copy=False)

    def pullback(g):
        return (g * mask,)

    return _record(out, (a,), pullback)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def pullback(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _record(out, (a, b), pullback)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def pullback(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=False),)

    return _record(out, (a,), pullback)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def pullback(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), pullback)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def pullback(g):
        return (g.transpose(inv),)

    return _record(out, (a,), pullback)


def take(a, idx) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into place."""
    a = as_tensor(a)
    out = a.data[idx]

    def pullback(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _record(out, (a,), pullback)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def pullback(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), pullback)


def pad_axis(a, axis: int, left: int, right: int, mode: str = "constant") -> Tensor:
    """Pad one axis with zeros or edge replication."""
    if left < 0 or right < 0:
        raise ParameterError("pad widths must be non-negative")
    if mode not in ("constant", "edge"):
        raise ParameterError(f"unknown pad mode {mode!r}")
    a = as_tensor(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (left, right)
    out = np.pad(a.data, widths, mode=mode)
    n = a.shape[axis]

    def pullback(g):
        core = [slice(None)] * a.ndim
        core[axis] = slice(left, left + n)
        gx = g[tuple(core)].copy()
        if mode == "edge":
            first = [slice(None)] * a.ndim
            last = [slice(None)] * a.ndim
            first[axis] = 0
            last[axis] = n - 1
            if left:
                lo = [slice(None)] * a.ndim
                lo[axis] = slice(0, left)
                gx[tuple(first)] += g[tuple(lo)].sum(axis=axis)
            if right:
                hi = [slice(None)] * a.ndim
                hi[axis] = slice(left + n, left + n + right)
                gx[tuple(last)] += g[tuple(hi)].sum(axis=axis)
        return (gx,)

    return _record(out, (a,), pullback)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul supports 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def pullback(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), pullback)
