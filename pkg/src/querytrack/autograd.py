"""Dense tensors with reverse-mode differentiation on a recorded tape.

Every operation the localization pipeline needs is a `Function` with a
hand-written backward rule; `grad_check` verifies each rule against central
finite differences. Arrays are numpy, row-major, in the dtype selected by
`querytrack.precision`.
"""

import numpy as np
from scipy.special import erf

from .precision import default_dtype

# Additive mask values at or below this are treated as fully suppressed:
# softmax emits exactly 0 there. Real scores must stay above it.
MASK_SENTINEL = -1e9
_MASK_THRESHOLD = -1e8

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense real array with an optional gradient buffer.

    Tensors produced by ops are treated as immutable; only optimizer steps
    mutate parameter data in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray) and data.dtype == default_dtype():
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self._ctx = None

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
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return Add.apply(self, _wrap(other, self))

    def __radd__(self, other):
        return Add.apply(_wrap(other, self), self)

    def __sub__(self, other):
        return Sub.apply(self, _wrap(other, self))

    def __rsub__(self, other):
        return Sub.apply(_wrap(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _wrap(other, self))

    def __rmul__(self, other):
        return Mul.apply(_wrap(other, self), self)

    def __truediv__(self, other):
        return Div.apply(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_wrap(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return Min.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def abs(self):
        return Abs.apply(self)

    __abs__ = abs


class Parameter(Tensor):
    """A trainable tensor; shape is fixed after construction."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _wrap(value, like):
    if isinstance(value, Tensor):
        return value
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(value, dtype=like.data.dtype)
    t.requires_grad = False
    t.grad = None
    t._ctx = None
    return t


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Function:
    """An op on the tape: forward computes data, backward returns parent grads."""

    def __init__(self):
        self.parents = ()
        self.saved = ()

    @classmethod
    def apply(cls, *tensors, **kwargs):
        ctx = cls()
        ctx.parents = tensors
        out_data = ctx.forward(*[t.data for t in tensors], **kwargs)
        requires = _grad_enabled and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires)
        if requires:
            out._ctx = ctx
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Add(Function):
    def forward(self, a, b):
        self.saved = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.saved
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    def forward(self, a, b):
        self.saved = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        sa, sb = self.saved
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a * b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a / b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a, exponent):
        self.saved = (a, exponent)
        return a ** exponent

    def backward(self, g):
        a, p = self.saved
        return (g * p * a ** (p - 1.0),)


class Exp(Function):
    def forward(self, a):
        out = np.exp(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        return (g * self.saved[0],)


class Log(Function):
    def forward(self, a):
        self.saved = (a,)
        return np.log(a)

    def backward(self, g):
        return (g / self.saved[0],)


class Sqrt(Function):
    def forward(self, a):
        out = np.sqrt(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        return (g * 0.5 / self.saved[0],)


class Abs(Function):
    def forward(self, a):
        self.saved = (np.sign(a),)
        return np.abs(a)

    def backward(self, g):
        return (g * self.saved[0],)


class Tanh(Function):
    def forward(self, a):
        out = np.tanh(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        y = self.saved[0]
        return (g * (1.0 - y * y),)


class Sigmoid(Function):
    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        self.saved = (out,)
        return out

    def backward(self, g):
        y = self.saved[0]
        return (g * y * (1.0 - y),)


class Gelu(Function):
    """Exact Gaussian error linear unit: x * Phi(x)."""

    _INV_SQRT2 = 1.0 / np.sqrt(2.0)
    _INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

    def forward(self, a):
        self.saved = (a,)
        return 0.5 * a * (1.0 + erf(a * self._INV_SQRT2))

    def backward(self, g):
        a = self.saved[0]
        phi = np.exp(-0.5 * a * a) * self._INV_SQRT2PI
        return (g * (0.5 * (1.0 + erf(a * self._INV_SQRT2)) + a * phi),)


class Maximum(Function):
    def forward(self, a, b):
        self.saved = (a >= b, a.shape, b.shape)
        return np.maximum(a, b)

    def backward(self, g):
        take_a, sa, sb = self.saved
        return _unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)


class Minimum(Function):
    def forward(self, a, b):
        self.saved = (a <= b, a.shape, b.shape)
        return np.minimum(a, b)

    def backward(self, g):
        take_a, sa, sb = self.saved
        return _unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)


class Clip(Function):
    def forward(self, a, lo, hi):
        self.saved = ((a >= lo) & (a <= hi),)
        return np.clip(a, lo, hi)

    def backward(self, g):
        return (g * self.saved[0],)


class Where(Function):
    """Select by a constant boolean condition; grads route per branch."""

    def forward(self, a, b, cond):
        self.saved = (cond, a.shape, b.shape)
        return np.where(cond, a, b)

    def backward(self, g):
        cond, sa, sb = self.saved
        return _unbroadcast(g * cond, sa), _unbroadcast(g * ~cond, sb)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
        self.saved = (a, b)
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.saved
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.saved = (a.shape, axis, keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        shape, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


class Mean(Function):
    def forward(self, a, axis, keepdims):
        if axis is None:
            count = a.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= a.shape[ax]
        self.saved = (a.shape, axis, keepdims, count)
        return np.mean(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        shape, axis, keepdims, count = self.saved
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)


class Max(Function):
    """Reduction max; gradient flows to the first arg-max along the axis."""

    def forward(self, a, axis, keepdims):
        if axis is None or isinstance(axis, tuple):
            raise ValueError("Max supports a single reduction axis")
        idx = np.argmax(a, axis=axis)
        self.saved = (a.shape, axis, keepdims, idx)
        return np.max(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        shape, axis, keepdims, idx = self.saved
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(idx, axis), g, axis)
        return (out,)


class Min(Function):
    def forward(self, a, axis, keepdims):
        if axis is None or isinstance(axis, tuple):
            raise ValueError("Min supports a single reduction axis")
        idx = np.argmin(a, axis=axis)
        self.saved = (a.shape, axis, keepdims, idx)
        return np.min(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        shape, axis, keepdims, idx = self.saved
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(idx, axis), g, axis)
        return (out,)


class Reshape(Function):
    def forward(self, a, shape):
        self.saved = (a.shape,)
        return np.reshape(a, shape)

    def backward(self, g):
        return (np.reshape(g, self.saved[0]),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.saved = (a.shape,)
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return (_unbroadcast(g, self.saved[0]),)


class Transpose(Function):
    def forward(self, a, axes):
        self.saved = (axes,)
        return np.transpose(a, axes)

    def backward(self, g):
        axes = self.saved[0]
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.saved = (a.shape, index)
        return a[index]

    def backward(self, g):
        shape, index = self.saved
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.saved = (axis, [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        axis, sizes = self.saved
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))


class Stack(Function):
    def forward(self, *arrays, axis):
        self.saved = (axis,)
        return np.stack(arrays, axis=axis)

    def backward(self, g):
        axis = self.saved[0]
        return tuple(np.moveaxis(g, axis, 0))


class Softmax(Function):
    """Max-subtracted softmax along one axis.

    Entries at or below the mask sentinel come out exactly 0; a row with
    every entry masked is a contract violation.
    """

    def forward(self, a, axis):
        masked = a <= _MASK_THRESHOLD
        if np.any(np.all(masked, axis=axis)):
            raise ValueError("fully masked row in softmax input")
        m = np.max(a, axis=axis, keepdims=True)
        e = np.exp(a - m)
        if masked.any():
            e = np.where(masked, 0.0, e)
        out = e / np.sum(e, axis=axis, keepdims=True)
        self.saved = (out, axis)
        return out

    def backward(self, g):
        y, axis = self.saved
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


class Conv2d(Function):
    """2-d convolution, NHWC layout, odd square-ish kernels, same padding.

    Output spatial size is H/stride x W/stride (caller guarantees
    divisibility for stride > 1).
    """

    def forward(self, x, w, stride):
        if x.ndim != 4 or w.ndim != 4:
            raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
        if x.shape[3] != w.shape[2]:
            raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
        n, h, wd, _ = x.shape
        kh, kw, cin, cout = w.shape
        ph, pw = kh // 2, kw // 2
        ho = (h + 2 * ph - kh) // stride + 1
        wo = (wd + 2 * pw - kw) // stride + 1
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[:, di:di + stride * (ho - 1) + 1:stride,
                           dj:dj + stride * (wo - 1) + 1:stride, :]
                out += np.matmul(patch, w[di, dj])
        self.saved = (xp, w, stride, (n, h, wd), (ho, wo), (ph, pw))
        return out

    def backward(self, g):
        xp, w, stride, (n, h, wd), (ho, wo), (ph, pw) = self.saved
        kh, kw, cin, cout = w.shape
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for di in range(kh):
            for dj in range(kw):
                rows = slice(di, di + stride * (ho - 1) + 1, stride)
                cols = slice(dj, dj + stride * (wo - 1) + 1, stride)
                patch = xp[:, rows, cols, :]
                gw[di, dj] = np.einsum("nhwc,nhwk->ck", patch, g)
                gxp[:, rows, cols, :] += np.matmul(g, w[di, dj].T)
        gx = gxp[:, ph:ph + h, pw:pw + wd, :]
        return gx, gw


_RESIZE_CACHE = {}


def _resize_matrix(src, dst, dtype):
    """Row-interpolation matrix for the half-pixel, edge-clamped convention."""
    key = (src, dst, np.dtype(dtype).str)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    r = np.zeros((dst, src), dtype=dtype)
    if src == 1:
        r[:, 0] = 1.0
    else:
        pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0.0, src - 1.0)
        lo = np.floor(pos).astype(np.int64)
        t = pos - lo
        hi = np.minimum(lo + 1, src - 1)
        rows = np.arange(dst)
        np.add.at(r, (rows, lo), (1.0 - t).astype(dtype))
        np.add.at(r, (rows, hi), t.astype(dtype))
    _RESIZE_CACHE[key] = r
    return r


class BilinearResize(Function):
    """Resize axes 1 and 2 of an NHWC tensor (half-pixel centers, edge clamp)."""

    def forward(self, x, out_h, out_w):
        if x.ndim != 4:
            raise ValueError(f"bilinear_resize expects a 4-d NHWC tensor, got {x.shape}")
        if out_h < 1 or out_w < 1:
            raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")
        rh = _resize_matrix(x.shape[1], out_h, x.dtype)
        rw = _resize_matrix(x.shape[2], out_w, x.dtype)
        self.saved = (rh, rw)
        return np.einsum("ai,bj,nijc->nabc", rh, rw, x, optimize=True)

    def backward(self, g):
        rh, rw = self.saved
        return (np.einsum("ai,bj,nabc->nijc", rh, rw, g, optimize=True),)


class LayerNorm(Function):
    """Normalization over the last axis with affine scale and shift."""

    def forward(self, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        self.saved = (xhat, inv, gamma)
        return gamma * xhat + beta

    def backward(self, g):
        xhat, inv, gamma = self.saved
        lead = tuple(range(g.ndim - 1))
        g_gamma = np.sum(g * xhat, axis=lead)
        g_beta = np.sum(g, axis=lead)
        gh = g * gamma
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, g_gamma, g_beta


class RoiPool(Function):
    """Average-pooled bilinear sampling of a box region on an HWC feature map.

    Boxes live in frame pixel coordinates; the map covers a square frame of
    side `frame_size`. Each of the pool_size^2 bins is sampled at a 2x2 grid
    of points and averaged. Differentiable in the feature map only.
    """

    def forward(self, f, box, pool_size, frame_size):
        h, w, c = f.shape
        p = pool_size
        x1, y1, x2, y2 = (float(v) for v in box)
        sy, sx = h / frame_size, w / frame_size
        if (x2 - x1) <= 0.0 or (y2 - y1) <= 0.0:
            fy = np.array([(y1 + y2) / 2.0 * sy - 0.5])
            fx = np.array([(x1 + x2) / 2.0 * sx - 0.5])
            idx, wts = self._corners(fy, fx, h, w)
            val = sum(wt[..., None] * f[iy, ix] for (iy, ix), wt in zip(idx, wts))
            self.saved = ((h, w, c), p, idx, wts, True)
            return np.broadcast_to(val.reshape(1, 1, c), (p, p, c)).astype(f.dtype).copy()
        bins = np.arange(p, dtype=np.float64)
        offs = np.array([0.25, 0.75])
        ys = y1 + (y2 - y1) / p * (bins[:, None] + offs[None, :])   # [p, 2]
        xs = x1 + (x2 - x1) / p * (bins[:, None] + offs[None, :])
        fy = np.clip(ys * sy - 0.5, 0.0, h - 1.0)
        fx = np.clip(xs * sx - 0.5, 0.0, w - 1.0)
        gy = np.broadcast_to(fy[:, :, None, None], (p, 2, p, 2))
        gx = np.broadcast_to(fx[None, None, :, :], (p, 2, p, 2))
        idx, wts = self._corners(gy.ravel(), gx.ravel(), h, w)
        val = sum(wt[:, None] * f[iy, ix] for (iy, ix), wt in zip(idx, wts))
        out = val.reshape(p, 2, p, 2, c).mean(axis=(1, 3))
        self.saved = ((h, w, c), p, idx, wts, False)
        return out.astype(f.dtype)

    @staticmethod
    def _corners(fy, fx, h, w):
        y0 = np.floor(fy).astype(np.int64)
        x0 = np.floor(fx).astype(np.int64)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        ty, tx = fy - y0, fx - x0
        idx = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
        wts = [(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx]
        return idx, wts

    def backward(self, g):
        (h, w, c), p, idx, wts, degenerate = self.saved
        gf = np.zeros((h, w, c), dtype=g.dtype)
        if degenerate:
            total = g.sum(axis=(0, 1))
            for (iy, ix), wt in zip(idx, wts):
                np.add.at(gf, (iy, ix), wt[..., None] * total[None, :])
            return (gf,)
        gs = np.broadcast_to(g[:, None, :, None, :] / 4.0, (p, 2, p, 2, c)).reshape(-1, c)
        for (iy, ix), wt in zip(idx, wts):
            np.add.at(gf, (iy, ix), wt[:, None] * gs)
        return (gf,)


# functional wrappers

def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def matmul(a, b):
    return MatMul.apply(a, b)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def sqrt(x):
    return Sqrt.apply(x)


def tanh(x):
    return Tanh.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def gelu(x):
    return Gelu.apply(x)


def maximum(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    return Maximum.apply(a, _wrap(b, a))


def minimum(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    return Minimum.apply(a, _wrap(b, a))


def clip(x, lo, hi):
    return Clip.apply(x, lo=float(lo), hi=float(hi))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    return Where.apply(a, _wrap(b, a), cond=cond)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def conv2d(x, kernel, stride=1):
    return Conv2d.apply(x, kernel, stride=stride)


def bilinear_resize(x, out_h, out_w):
    """Resize [N,H,W,C] -> [N,out_h,out_w,C]; resizing to the same size is identity."""
    return BilinearResize.apply(x, out_h=int(out_h), out_w=int(out_w))


def layer_norm(x, gamma, beta, eps=1e-5):
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def roi_pool(feature, box, pool_size, frame_size):
    if pool_size < 1:
        raise ValueError(f"pool size must be >= 1, got {pool_size}")
    return RoiPool.apply(feature, box=tuple(box), pool_size=int(pool_size),
                         frame_size=float(frame_size))


def broadcast_to(x, shape):
    return BroadcastTo.apply(x, shape=tuple(shape))


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def stack(tensors, axis=0):
    return Stack.apply(*tensors, axis=axis)


def backward(loss):
    """Reverse sweep from a scalar loss, accumulating grads on the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p._ctx is not None or p.requires_grad:
                    stack_.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        ctx = node._ctx
        if ctx is None or node.grad is None:
            continue
        grads = ctx.backward(node.grad)
        for parent, g in zip(ctx.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.astype(parent.data.dtype, copy=False)
            else:
                parent.grad = parent.grad + g
        node._ctx = None
        if node is not loss and not isinstance(node, Parameter):
            node.grad = None


def grad_check(fn, params, eps=1e-4, tol=1e-4, max_coords=24, seed=0):
    """Compare analytic grads of a deterministic scalar `fn()` with central differences.

    `params` is an iterable of (name, tensor) pairs the closure reads. For
    tensors larger than `max_coords`, a fixed random subset of coordinates is
    probed. Returns {name: {"max_rel_err", "checked", "passed"}}.
    """
    params = list(params)
    first = fn()
    again = fn()
    if first.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.array_equal(first.data, again.data):
        raise RuntimeError("non-deterministic function: two forward passes differ")

    for _, p in params:
        p.grad = None
    backward(fn())
    analytic = {}
    for name, p in params:
        analytic[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(fn().data)
            flat[c] = orig - eps
            fm = float(fn().data)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(abs(numeric), abs(ana[c]), 1e-4)
            worst = max(worst, abs(numeric - ana[c]) / denom)
        report[name] = {"max_rel_err": worst, "checked": int(coords.size),
                        "passed": worst < tol}
    return report
