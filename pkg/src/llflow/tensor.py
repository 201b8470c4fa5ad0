"""Dense tensors with reverse-mode automatic differentiation on numpy arrays.

Image layout is (batch, channel, height, width). Operations record parent
links and backward closures on an implicit tape; ``backward`` replays the
tape in reverse topological order. Leaf tensors (parameters) may have their
``data`` updated in place between training steps; tensors produced by ops
are treated as immutable.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference, preprocessing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * data / b.data, b.shape))

    return _make(data, (a, b), bwd)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make(data, (a,), bwd)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(data, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), bwd)


def absolute(a):
    a = as_tensor(a)
    data = np.abs(a.data)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _make(data, (a,), bwd)


def maximum(a, b):
    """Elementwise max of a pair; at ties the gradient goes to the first arg."""
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    data = np.maximum(a.data, b.data)

    def bwd(g):
        take_a = a.data >= b.data
        if a.requires_grad:
            _accum(a, _unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(data, (a, b), bwd)


def leaky_relu(a, slope=0.2):
    return maximum(a, mul(a, slope))


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if len(axes) == 0:
        raise ValueError("empty axis set for reduction")
    return axes


def reduce_sum(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(data, (a,), bwd)


def reduce_mean(a, axes=None, keepdims=False):
    a = as_tensor(a)
    naxes = _norm_axes(axes, a.ndim)
    count = 1
    for ax in naxes:
        count *= a.shape[ax]
    return mul(reduce_sum(a, naxes, keepdims), 1.0 / count)


def channel_mean(a):
    """Mean over the channel axis, keeping a single channel in place."""
    a = as_tensor(a)
    ax = 0 if a.ndim == 3 else 1
    return reduce_mean(a, (ax,), keepdims=True)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), bwd)


def transpose(a, axes):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(data, (a,), bwd)


def index(a, idx):
    a = as_tensor(a)
    data = a.data[idx]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _make(data, (a,), bwd)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis (cheap backward, no scatter)."""
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accum(a, full)

    return _make(data, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, p)

    return _make(data, tuple(tensors), bwd)


def spatial_gradient(a, axis: str):
    """Forward difference along 'x' (width) or 'y' (height); last slice is zero."""
    a = as_tensor(a)
    ax = a.ndim - 1 if axis == "x" else a.ndim - 2
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    n = a.shape[ax]
    if n < 2:
        raise ValueError("spatial extent must be >= 2 for spatial_gradient")
    lead = a.data.take(range(1, n), axis=ax)
    body = a.data.take(range(0, n - 1), axis=ax)
    data = np.zeros_like(a.data)
    sl_body = [slice(None)] * a.ndim
    sl_body[ax] = slice(0, n - 1)
    data[tuple(sl_body)] = lead - body

    def bwd(g):
        gb = g[tuple(sl_body)]
        full = np.zeros_like(a.data)
        sl_hi = [slice(None)] * a.ndim
        sl_hi[ax] = slice(1, n)
        full[tuple(sl_hi)] += gb
        full[tuple(sl_body)] -= gb
        _accum(a, full)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, kh, kw, stride, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, ho, wo), (sb, sc, sh, sw, sh * stride, sw * stride)
    )
    return np.ascontiguousarray(view).reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, pad, ho, wo):
    b, c, h, w = xshape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,kH,kW)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive conv output extent ({ho}x{wo})")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(cout, -1)
    data = np.matmul(wmat, cols).reshape(b, cout, ho, wo)

    def bwd(g):
        gf = g.reshape(b, cout, ho * wo)
        if kernel.requires_grad:
            gw = np.tensordot(gf, cols, axes=([0, 2], [0, 2]))
            _accum(kernel, gw.reshape(kernel.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gf)
            _accum(x, _col2im(gcols, x.shape, kh, kw, stride, padding, ho, wo))

    return _make(data, (x, kernel), bwd)


# ---------------------------------------------------------------------------
# channel mixing (1x1 convolution as a matrix) and its inverse

def channel_mix(w, x):
    """Per-pixel channel mixing h' = W @ h with W a (C,C) matrix."""
    w, x = as_tensor(w), as_tensor(x)
    data = np.tensordot(w.data, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.tensordot(w.data.T, g, axes=([1], [1])).transpose(1, 0, 2, 3))
        if w.requires_grad:
            _accum(w, np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3])))

    return _make(data, (w, x), bwd)


def channel_mix_inverse(w, y):
    """Per-pixel mixing by W^{-1}; gradients flow to both W and y."""
    w, y = as_tensor(w), as_tensor(y)
    a = np.linalg.inv(w.data)
    data = np.tensordot(a, y.data, axes=([1], [1])).transpose(1, 0, 2, 3)

    def bwd(g):
        if y.requires_grad:
            _accum(y, np.tensordot(a.T, g, axes=([1], [1])).transpose(1, 0, 2, 3))
        if w.requires_grad:
            ga = np.tensordot(g, y.data, axes=([0, 2, 3], [0, 2, 3]))
            _accum(w, -a.T @ ga @ a.T)

    return _make(data, (w, y), bwd)


def logabsdet(w):
    """log|det W| of a square matrix; gradient is inv(W)^T."""
    w = as_tensor(w)
    sign, ld = np.linalg.slogdet(w.data)
    if sign == 0:
        raise np.linalg.LinAlgError("singular matrix in logabsdet")
    data = np.asarray(ld, dtype=w.data.dtype)

    def bwd(g):
        _accum(w, g * np.linalg.inv(w.data).T)

    return _make(data, (w,), bwd)


# ---------------------------------------------------------------------------
# backward pass

def backward(scalar: Tensor):
    """Backpropagate from a one-element tensor through the recorded tape.

    Fills ``grad`` on every recorded tensor reachable from ``scalar``.
    """
    if scalar.size != 1:
        raise ValueError("backward requires a one-element tensor")
    if not scalar.requires_grad:
        raise ValueError("tensor is detached from the tape")

    order = []
    seen = set()
    stack = [(scalar, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    scalar.grad = np.ones_like(scalar.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grads_of(scalar: Tensor, tensors: Iterable[Tensor]) -> dict:
    """Run backward and return {tensor -> gradient array} for the given leaves."""
    backward(scalar)
    return {t: (t.grad if t.grad is not None else np.zeros_like(t.data)) for t in tensors}


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None


LOG_2PI = math.log(2.0 * math.pi)
