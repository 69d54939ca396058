"""Dense float64 tensors with reverse-mode differentiation over a flat tape.

The tape is define-by-run: while a Tape is active, every op whose inputs are
tracked appends one node (output tensor + backward closure). Because nodes are
appended in execution order, walking the list in reverse is already a reverse
topological traversal, so each node is visited exactly once.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ACTIVE_TAPE = None


class Tape:
    """Recording of one forward pass. Single-threaded; no nesting."""

    def __init__(self):
        self.nodes = []  # (output Tensor, backward closure)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, out):
        """Seed d(out)/d(out) = 1 and accumulate grads into tracked leaves.

        `out` must be a scalar produced under this tape. Multiple uses of a
        tensor accumulate additively.
        """
        if out.data.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {out.shape}")
        if not self.nodes:
            raise RuntimeError("backward on an empty tape")
        out.grad = np.ones_like(out.data)
        for tensor, bwd in reversed(self.nodes):
            if tensor.grad is not None:
                bwd(tensor.grad)


class no_grad:
    """Context that suspends tape recording (ops return untracked tensors)."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._saved = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._saved
        return False


class Tensor:
    """n-dimensional float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants (floats / ndarrays) stay out of the tape
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _tracking(*tensors):
    if _ACTIVE_TAPE is None:
        return False
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _record(out, bwd):
    out.requires_grad = True
    _ACTIVE_TAPE.nodes.append((out, bwd))


def _acc(tensor, g, own):
    """Add g into tensor.grad; copy when g aliases another grad buffer."""
    if tensor.grad is None:
        tensor.grad = g if own else g.copy()
    else:
        tensor.grad += g


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    bd = _as_data(b)
    _check_broadcast(a.data, bd, "add")
    out = Tensor(a.data + bd)
    if _tracking(a, b):
        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g, a.data.shape), own=False)
            if isinstance(b, Tensor) and b.requires_grad:
                _acc(b, _unbroadcast(g, b.data.shape), own=False)
        _record(out, bwd)
    return out


def sub(a, b):
    bd = _as_data(b)
    _check_broadcast(a.data, bd, "sub")
    out = Tensor(a.data - bd)
    if _tracking(a, b):
        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g, a.data.shape), own=False)
            if isinstance(b, Tensor) and b.requires_grad:
                _acc(b, _unbroadcast(-g, b.data.shape), own=True)
        _record(out, bwd)
    return out


def neg(a):
    out = Tensor(-a.data)
    if _tracking(a):
        def bwd(g):
            _acc(a, -g, own=True)
        _record(out, bwd)
    return out


def mul(a, b):
    bd = _as_data(b)
    _check_broadcast(a.data, bd, "mul")
    out = Tensor(a.data * bd)
    if _tracking(a, b):
        ad = a.data
        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g * bd, a.data.shape), own=True)
            if isinstance(b, Tensor) and b.requires_grad:
                _acc(b, _unbroadcast(g * ad, b.data.shape), own=True)
        _record(out, bwd)
    return out


def div(a, b):
    bd = _as_data(b)
    _check_broadcast(a.data, bd, "div")
    out = Tensor(a.data / bd)
    if _tracking(a, b):
        ad = a.data
        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g / bd, a.data.shape), own=True)
            if isinstance(b, Tensor) and b.requires_grad:
                _acc(b, _unbroadcast(-g * ad / (bd * bd), b.data.shape), own=True)
        _record(out, bwd)
    return out


def power(a, p):
    if not isinstance(p, (int, float)):
        raise TypeError("power exponent must be a python scalar")
    out = Tensor(a.data ** p)
    if _tracking(a):
        ad = a.data
        def bwd(g):
            _acc(a, g * (p * ad ** (p - 1)), own=True)
        _record(out, bwd)
    return out


def square(a):
    out = Tensor(a.data * a.data)
    if _tracking(a):
        ad = a.data
        def bwd(g):
            _acc(a, g * (2.0 * ad), own=True)
        _record(out, bwd)
    return out


def exp(a):
    out = Tensor(np.exp(a.data))
    if _tracking(a):
        od = out.data
        def bwd(g):
            _acc(a, g * od, own=True)
        _record(out, bwd)
    return out


def log(a):
    out = Tensor(np.log(a.data))
    if _tracking(a):
        ad = a.data
        def bwd(g):
            _acc(a, g / ad, own=True)
        _record(out, bwd)
    return out


def tanh(a):
    out = Tensor(np.tanh(a.data))
    if _tracking(a):
        od = out.data
        def bwd(g):
            _acc(a, g * (1.0 - od * od), own=True)
        _record(out, bwd)
    return out


def sigmoid(a):
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)))
    if _tracking(a):
        od = out.data
        def bwd(g):
            _acc(a, g * od * (1.0 - od), own=True)
        _record(out, bwd)
    return out


def gelu(a):
    """Exact Gaussian-CDF form: x * Phi(x)."""
    out = Tensor(_gelu_fwd(a.data))
    if _tracking(a):
        ad = a.data
        def bwd(g):
            _acc(a, g * _gelu_grad(ad), own=True)
        _record(out, bwd)
    return out


def _gelu_fwd(x):
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x):
    phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


# ---------------------------------------------------------------------------
# reductions

def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _tracking(a):
        shape = a.data.shape
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, shape), own=False)
        _record(out, bwd)
    return out


def mean_(a, axis=None, keepdims=False):
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if _tracking(a):
        shape = a.data.shape
        n = a.data.size if axis is None else shape[axis]
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g / n, shape), own=False)
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b):
    ad, bd = a.data, _as_data(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)
    if _tracking(a, b):
        def bwd(g):
            if a.requires_grad:
                _acc(a, g @ bd.T, own=True)
            if isinstance(b, Tensor) and b.requires_grad:
                _acc(b, ad.T @ g, own=True)
        _record(out, bwd)
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    if _tracking(a):
        orig = a.data.shape
        def bwd(g):
            _acc(a, g.reshape(orig), own=False)
        _record(out, bwd)
    return out


def moveaxis01(a):
    """Swap the first two axes (used to go [T,B,d] <-> [B,T,d])."""
    out = Tensor(np.swapaxes(a.data, 0, 1))
    if _tracking(a):
        def bwd(g):
            _acc(a, np.swapaxes(g, 0, 1), own=False)
        _record(out, bwd)
    return out


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    if _tracking(*tensors):
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            pieces = np.split(g, offsets[1:-1], axis=axis)
            for t, piece in zip(tensors, pieces):
                if t.requires_grad:
                    _acc(t, piece, own=False)
        _record(out, bwd)
    return out


def narrow(a, start, stop):
    """Slice [start:stop] along the last axis."""
    out = Tensor(a.data[..., start:stop])
    if _tracking(a):
        shape = a.data.shape
        def bwd(g):
            if a.grad is None:
                a.grad = np.zeros(shape)
            a.grad[..., start:stop] += g
        _record(out, bwd)
    return out


def stack0(tensors):
    """Stack along a new leading axis."""
    out = Tensor(np.stack([t.data for t in tensors], axis=0))
    if _tracking(*tensors):
        def bwd(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    _acc(t, g[i], own=False)
        _record(out, bwd)
    return out


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes through strictly inside the bounds."""
    out = Tensor(np.clip(a.data, lo, hi))
    if _tracking(a):
        inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
        def bwd(g):
            _acc(a, g * inside, own=True)
        _record(out, bwd)
    return out


def repeat_mid(a, n):
    """[B, d] -> [B, n, d] by repetition along a new middle axis."""
    b, d = a.data.shape
    out = Tensor(np.broadcast_to(a.data[:, None, :], (b, n, d)))
    if _tracking(a):
        def bwd(g):
            _acc(a, g.sum(axis=1), own=True)
        _record(out, bwd)
    return out


def axpy(a, b, c):
    """a + b * c with c a constant scalar/array; one tape node."""
    out = Tensor(a.data + b.data * c)
    if _tracking(a, b):
        def bwd(g):
            if a.requires_grad:
                _acc(a, g, own=False)
            if b.requires_grad:
                _acc(b, _unbroadcast(g * c, b.data.shape), own=True)
        _record(out, bwd)
    return out


def append_cols(a, b, const_cols):
    """Concat [a | b | const_cols] on the last axis; b and const_cols optional."""
    parts = [a.data]
    if b is not None:
        parts.append(b.data)
    if const_cols is not None:
        parts.append(const_cols)
    out = Tensor(np.concatenate(parts, axis=-1))
    if _tracking(a, b):
        na = a.data.shape[-1]
        nb = 0 if b is None else b.data.shape[-1]
        def bwd(g):
            if a.requires_grad:
                _acc(a, g[..., :na], own=False)
            if b is not None and b.requires_grad:
                _acc(b, g[..., na:na + nb], own=False)
        _record(out, bwd)
    return out


def gather_steps(a, idx):
    """Select per-element grid steps: a is [M,B,d], idx is [B,T] -> [B,T,d]."""
    m, b, d = a.data.shape
    if idx.shape[0] != b:
        raise ShapeError(f"gather_steps: index batch {idx.shape} vs data {a.data.shape}")
    cols = np.arange(b)[:, None]
    out = Tensor(a.data[idx, cols, :])
    if _tracking(a):
        shape = a.data.shape
        def bwd(g):
            if a.grad is None:
                a.grad = np.zeros(shape)
            np.add.at(a.grad, (idx, cols), g)
        _record(out, bwd)
    return out
