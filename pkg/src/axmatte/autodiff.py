"""Minimal dense tensor with reverse-mode autodiff on numpy.

Define-by-run: every op records its parents and a backward closure on the
output tensor; `backward()` topologically sorts the graph and accumulates
gradients. Covers exactly the ops the matting network needs. f32 for
training/inference, f64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


class AutodiffError(ValueError):
    pass


def _as_array(data, dtype):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-d float array with optional gradient, node in a define-by-run tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _backward=None):
        if dtype is None:
            d = np.asarray(data).dtype
            dtype = d if d in (np.float32, np.float64) else np.float32
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward

    # ----- basic introspection -------------------------------------------
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, " \
               f"requires_grad={self.requires_grad})"

    # ----- graph plumbing --------------------------------------------------
    def _accum_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode sweep from this node. Requires a scalar unless an
        explicit output gradient is supplied."""
        if grad is None:
            if self.data.size != 1:
                raise AutodiffError("backward() needs a scalar loss or an "
                                    "explicit output gradient")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise AutodiffError("output gradient shape mismatch")

        # topological order via iterative DFS
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accum_grad(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ----- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Parameter:
    """Named trainable tensor inside a weights collection."""
    name: str
    tensor: Tensor
    trainable: bool = True


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _check_broadcast(a_shape, b_shape):
    """Allow equal shapes, scalars, or numpy-style broadcast where every
    mismatching extent is 1."""
    ra, rb = len(a_shape), len(b_shape)
    for i in range(1, min(ra, rb) + 1):
        da, db = a_shape[-i], b_shape[-i]
        if da != db and da != 1 and db != 1:
            raise AutodiffError(f"shape mismatch: {a_shape} vs {b_shape}")


def _unbroadcast(g, shape):
    """Sum gradient over broadcast axes so it matches `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _needs_grad(t):
    return t.requires_grad or bool(t._parents)


def _binary(a, b, fwd, bwd_a, bwd_b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor)
                              else np.float32))
    b = _wrap(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out_data = fwd(a.data, b.data)
    parents = tuple(t for t in (a, b) if _needs_grad(t))
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                 _parents=parents)
    if parents:
        def _bw(g):
            if _needs_grad(a):
                a._accum_grad(_unbroadcast(bwd_a(g, a.data, b.data, out_data), a.shape))
            if _needs_grad(b):
                b._accum_grad(_unbroadcast(bwd_b(g, a.data, b.data, out_data), b.shape))
        out._backward = _bw
    return out


def _unary(a, fwd, bwd):
    out_data = fwd(a.data)
    parents = (a,) if _needs_grad(a) else ()
    out = Tensor(out_data, requires_grad=a.requires_grad, _parents=parents)
    if parents:
        def _bw(g):
            a._accum_grad(bwd(g, a.data, out_data))
        out._backward = _bw
    return out


# ----- elementwise ----------------------------------------------------------

def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g,
                   lambda g, x, y, o: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g,
                   lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y,
                   lambda g, x, y, o: g * x)


def div(a, b):
    bv = b.data if isinstance(b, Tensor) else np.asarray(b)
    if np.any(bv == 0):
        raise AutodiffError("division by exact zero")
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def abs_(a):
    return _unary(a, np.abs, lambda g, x, o: g * np.sign(x))


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, o: g / (2.0 * o))


def square(a):
    return _unary(a, np.square, lambda g, x, o: g * 2.0 * x)


def exp(a):
    return _unary(a, np.exp, lambda g, x, o: g * o)


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def clamp(a, lo, hi):
    def bwd(g, x, o):
        return g * ((x >= lo) & (x <= hi)).astype(x.dtype)
    return _unary(a, lambda x: np.clip(x, lo, hi), bwd)


def prelu(x, slope):
    """PReLU with a learnable per-channel slope on the negative side.

    `slope` has shape (C,) and x is (N, C, H, W) (or any layout with the
    channel on axis 1)."""
    sl = slope.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    pos = x.data >= 0
    out_data = np.where(pos, x.data, sl * x.data)
    parents = tuple(t for t in (x, slope) if _needs_grad(t))
    out = Tensor(out_data, requires_grad=x.requires_grad or slope.requires_grad,
                 _parents=parents)
    if parents:
        def _bw(g):
            if _needs_grad(x):
                x._accum_grad(np.where(pos, g, sl * g))
            if _needs_grad(slope):
                gs = np.where(pos, 0.0, g * x.data)
                axes = tuple(i for i in range(x.ndim) if i != 1)
                slope._accum_grad(gs.sum(axis=axes).astype(slope.data.dtype))
        out._backward = _bw
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x):
    """tanh-approximation GELU, composed from primitives so the backward
    pass falls out of the graph."""
    inner = mul(add(x, mul(square(x) * x, 0.044715)), _GELU_C)
    return mul(mul(x, add(tanh(inner), 1.0)), 0.5)


# ----- shape ops -------------------------------------------------------------

def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.shape
    return _unary(a, lambda x: x.reshape(shape),
                  lambda g, x, o: g.reshape(orig))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _unary(a, lambda x: x.transpose(axes),
                  lambda g, x, o: g.transpose(inv))


def roll(a, shift, axis):
    return _unary(a, lambda x: np.roll(x, shift, axis=axis),
                  lambda g, x, o: np.roll(g, tuple(-s for s in shift) if
                                          isinstance(shift, tuple) else -shift,
                                          axis=axis))


def pad_zero(a, pads):
    """Zero-pad. `pads` is a sequence of (before, after) per axis, or a
    4-tuple (top, bottom, left, right) applied to the last two axes."""
    if len(pads) == 4 and not isinstance(pads[0], (tuple, list)):
        t, b, l, r = pads
        full = [(0, 0)] * (a.ndim - 2) + [(t, b), (l, r)]
    else:
        full = [tuple(p) for p in pads]
    if any(p[0] < 0 or p[1] < 0 for p in full):
        raise AutodiffError("negative padding")
    slices = tuple(slice(p[0], p[0] + s) for p, s in zip(full, a.shape))
    return _unary(a, lambda x: np.pad(x, full),
                  lambda g, x, o: g[slices])


def pad_reflect(a, pads):
    """Mirror-pad the last two axes (edge-inclusive reflection); `pads` is
    (top, bottom, left, right). Implemented as an index gather so the
    backward is a scatter-add."""
    t, b, l, r = pads
    H, W = a.shape[-2], a.shape[-1]
    idx = np.pad(np.arange(H * W).reshape(H, W), ((t, b), (l, r)),
                 mode="symmetric")
    lead = a.shape[:-2]
    def fwd(x):
        flat = x.reshape(lead + (H * W,))
        return flat[..., idx.reshape(-1)].reshape(lead + idx.shape)
    def bwd(g, x, o):
        gf = g.reshape(lead + (idx.size,))
        out = np.zeros(lead + (H * W,), dtype=g.dtype)
        np.add.at(out.reshape(-1, H * W).T, idx.reshape(-1),
                  gf.reshape(-1, idx.size).T)
        return out.reshape(x.shape)
    return _unary(a, fwd, bwd)


def crop(a, slices):
    """Slice view with scatter backward; inverse of pad_zero."""
    slices = tuple(slices)
    def bwd(g, x, o):
        full = np.zeros_like(x)
        full[slices] = g
        return full
    return _unary(a, lambda x: x[slices].copy(), bwd)


def concat(parts: Sequence[Tensor], axis: int):
    parts = list(parts)
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != axis % len(ref)):
            raise AutodiffError("concat: non-concat dims differ")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    parents = tuple(p for p in parts if _needs_grad(p))
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parts),
                 _parents=parents)
    if parents:
        sizes = [p.shape[axis] for p in parts]
        offs = np.cumsum([0] + sizes)
        def _bw(g):
            for p, o0, o1 in zip(parts, offs[:-1], offs[1:]):
                if _needs_grad(p):
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(o0, o1)
                    p._accum_grad(g[tuple(idx)])
        out._backward = _bw
    return out


def split(a, sizes: Iterable[int], axis: int):
    """Split into consecutive chunks of the given extents along `axis`."""
    sizes = list(sizes)
    if sum(sizes) != a.shape[axis]:
        raise AutodiffError("split sizes do not cover the axis")
    outs = []
    off = 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(off, off + s)
        outs.append(crop(a, tuple(idx)))
        off += s
    return outs


def index_select(table, idx):
    """Gather rows of a 2-d table; backward scatter-adds. Used for the
    relative-position bias lookup."""
    idx = np.asarray(idx)
    def bwd(g, x, o):
        full = np.zeros_like(x)
        np.add.at(full, idx.reshape(-1),
                  g.reshape(-1, x.shape[-1]))
        return full
    return _unary(table, lambda x: x[idx], bwd)


# ----- reductions ------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    orig_shape = a.shape
    def bwd(g, x, o):
        if axis is None:
            return np.broadcast_to(g, orig_shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, orig_shape).copy()
    return _unary(a, lambda x: x.sum(axis=axis, keepdims=keepdims), bwd)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ----- matmul / softmax / norm ------------------------------------------------

def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul inner dims: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    parents = tuple(t for t in (a, b) if _needs_grad(t))
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                 _parents=parents)
    if parents:
        def _bw(g):
            if _needs_grad(a):
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum_grad(_unbroadcast(ga, a.shape))
            if _needs_grad(b):
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum_grad(_unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


def softmax(a, axis=-1):
    if not np.all(np.isfinite(a.data)):
        raise AutodiffError("softmax on non-finite input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    def bwd(g, x, o):
        return o * (g - (g * o).sum(axis=axis, keepdims=True))
    return _unary(a, lambda x: s, bwd)


def layer_norm(x, gain, bias, axis=1, eps=1e-5):
    """Normalize over `axis` to zero mean / unit variance, then affine.

    Composed from primitives; gain and bias broadcast along the axis."""
    mu = mean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = mean(square(xc), axis=axis, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    g = reshape(gain, tuple(shape))
    b = reshape(bias, tuple(shape))
    return add(mul(xn, g), b)


# ----- conv / resample ---------------------------------------------------------

def _im2col(xp, kh, kw, stride):
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]  # N,C,OH,OW,kh,kw


def _col2im(cols, padded_shape, kh, kw, stride):
    N, C, Hp, Wp = padded_shape
    OH, OW = cols.shape[2], cols.shape[3]
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += \
                cols[:, :, :, :, i, j]
    return xp


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-d cross-correlation, NCHW inputs, OIHW weights."""
    N, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise AutodiffError(f"conv2d channels: input {C}, weight {Cw}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    if OH <= 0 or OW <= 0:
        raise AutodiffError("conv2d: non-positive output size")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride)             # N,C,OH,OW,kh,kw
    cols_m = cols.transpose(0, 2, 3, 1, 4, 5).reshape(N * OH * OW, C * kh * kw)
    w_m = w.data.reshape(O, C * kh * kw)
    out_m = cols_m @ w_m.T                          # (N*OH*OW, O)
    out_data = out_m.reshape(N, OH, OW, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, O, 1, 1)

    inputs = (x, w) + ((bias,) if bias is not None else ())
    parents = tuple(t for t in inputs if _needs_grad(t))
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs),
                 _parents=parents)
    if parents:
        def _bw(g):
            g_m = g.transpose(0, 2, 3, 1).reshape(N * OH * OW, O)
            if _needs_grad(w):
                gw = (g_m.T @ cols_m).reshape(w.shape)
                w._accum_grad(gw)
            if _needs_grad(x):
                dcols = (g_m @ w_m).reshape(N, OH, OW, C, kh, kw) \
                    .transpose(0, 3, 1, 2, 4, 5)
                dxp = _col2im(dcols, xp.shape, kh, kw, stride)
                if pad:
                    dxp = dxp[:, :, pad:pad + H, pad:pad + W]
                x._accum_grad(dxp)
            if bias is not None and _needs_grad(bias):
                bias._accum_grad(g.sum(axis=(0, 2, 3)))
        out._backward = _bw
    return out


def upsample_nearest(x, factor=2):
    if factor < 1 or int(factor) != factor:
        raise AutodiffError("upsample factor must be a positive integer")
    f = int(factor)
    if f == 1:
        return _unary(x, lambda v: v.copy(), lambda g, v, o: g)
    N, C, H, W = x.shape
    def bwd(g, v, o):
        return g.reshape(N, C, H, f, W, f).sum(axis=(3, 5))
    return _unary(x, lambda v: v.repeat(f, axis=2).repeat(f, axis=3), bwd)


def assert_finite(t: Tensor, what="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise AutodiffError(f"non-finite values in {what}")
    return t
