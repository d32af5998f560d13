"""Minimal dense-tensor core with reverse-mode differentiation.

Everything is backed by numpy arrays. Each op records its parents and a
closure that scatters the incoming gradient back to them; ``Tensor.backward``
walks the tape in reverse topological order. Gradients on reused tensors are
summed (standard reverse-mode semantics).
"""

from __future__ import annotations

import numpy as np


class NumericError(RuntimeError):
    """NaN/Inf appeared in a gradient; message names the offending op."""


class ContractError(ValueError):
    """An op's pre/post condition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=data.dtype if isinstance(data, np.ndarray) else np.float64)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Seed a scalar loss with gradient 1 and propagate to all leaves."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            # NaN/Inf propagate through the sum, so one reduction suffices
            if node.grad is not None and not np.isfinite(node.grad.sum()):
                raise NumericError(f"non-finite gradient produced at op '{node._op}'")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward, op):
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _accum(t, g):
    # grads are never mutated in place, so storing the reference is safe
    if t.grad is None:
        t.grad = np.asarray(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw, "mul")


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def sigmoid(x):
    x = _as_tensor(x)
    # exp may overflow to inf for very negative inputs; 1/(1+inf) saturates
    # to exactly 0, which is the correct limit, so the warning is silenced
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _accum(x, g * s * (1.0 - s))

    return _make(s, (x,), bw, "sigmoid")


def clamp(x, lo, hi):
    x = _as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        _accum(x, g * mask)

    return _make(np.clip(x.data, lo, hi), (x,), bw, "clamp")


def softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    return _make(s, (x,), bw, "softmax")


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bw, "matmul")


def bmm(a, b):
    """Batched matmul over the leading axis: (B,M,K) @ (B,K,N) -> (B,M,N)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ContractError(f"bmm expects 3-D operands, got {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.transpose(0, 2, 1))
        _accum(b, a.data.transpose(0, 2, 1) @ g)

    return _make(out_data, (a, b), bw, "bmm")


# -- shape manipulation ----------------------------------------------------

def reshape(x, shape):
    x = _as_tensor(x)

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes):
    x = _as_tensor(x)
    inv = np.argsort(axes)

    def bw(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def slice_axis(x, axis, start, stop):
    x = _as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _make(x.data[idx], (x,), bw, "slice")


# -- convolution and resampling -------------------------------------------

def _im2col(xp, kh, kw, stride, h_out, w_out):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, h_out, w_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols.reshape(c * kh * kw, h_out * w_out)


def conv2d(x, w, b=None, stride=1):
    """2-D convolution on a (C,H,W) map with zero padding k//2 ("same" at stride 1).

    w has shape (C_out, C_in, kh, kw); b, when given, shape (C_out,).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    c_out, c_in, kh, kw = w.data.shape
    if x.data.ndim != 3 or x.data.shape[0] != c_in:
        raise ContractError(f"conv2d input {x.data.shape} incompatible with weight {w.data.shape}")
    if kh == 1 and kw == 1 and stride == 1:
        return _conv1x1(x, w, b)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    wm = w.data.reshape(c_out, -1)
    y = (wm @ cols).reshape(c_out, h_out, w_out)
    if b is not None:
        y = y + b.data[:, None, None]

    def bw(g):
        gm = g.reshape(c_out, -1)
        _accum(w, (gm @ cols.T).reshape(w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(1, 2)))
        dcols = (wm.T @ gm).reshape(c_in, kh, kw, h_out, w_out)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += dcols[:, i, j]
        h, wd = x.data.shape[1], x.data.shape[2]
        _accum(x, dxp[:, ph : ph + h, pw : pw + wd])

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw, "conv2d")


def _conv1x1(x, w, b):
    c_out, c_in = w.data.shape[:2]
    c, h, wd = x.data.shape
    xm = x.data.reshape(c_in, h * wd)
    wm = w.data.reshape(c_out, c_in)
    y = (wm @ xm).reshape(c_out, h, wd)
    if b is not None:
        y = y + b.data[:, None, None]

    def bw(g):
        gm = g.reshape(c_out, -1)
        _accum(w, (gm @ xm.T).reshape(w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(1, 2)))
        _accum(x, (wm.T @ gm).reshape(x.data.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw, "conv2d")


def upsample_nearest(x, factor=2):
    x = _as_tensor(x)
    y = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def bw(g):
        c, h, w = x.data.shape
        _accum(x, g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)))

    return _make(y, (x,), bw, "upsample_nearest")


def _linear_weights(n_in, n_out, dtype):
    """Per-output (lo, hi, frac) for 1-D linear resampling, align-corners."""
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(dtype)
    return lo, hi, frac


def resize_bilinear(x, target):
    """Resize a (C,H,W) map to (C,th,tw) with separable linear interpolation."""
    x = _as_tensor(x)
    c, h, w = x.data.shape
    th, tw = target
    lo_h, hi_h, fh = _linear_weights(h, th, x.data.dtype)
    lo_w, hi_w, fw = _linear_weights(w, tw, x.data.dtype)
    rows = x.data[:, lo_h] * (1 - fh)[None, :, None] + x.data[:, hi_h] * fh[None, :, None]
    y = rows[:, :, lo_w] * (1 - fw)[None, None, :] + rows[:, :, hi_w] * fw[None, None, :]

    def bw(g):
        drows = np.zeros((c, th, w), dtype=x.data.dtype)
        np.add.at(drows, (slice(None), slice(None), lo_w), g * (1 - fw)[None, None, :])
        np.add.at(drows, (slice(None), slice(None), hi_w), g * fw[None, None, :])
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), lo_h), drows * (1 - fh)[None, :, None])
        np.add.at(dx, (slice(None), hi_h), drows * fh[None, :, None])
        _accum(x, dx)

    return _make(y, (x,), bw, "resize_bilinear")


def adaptive_avg_pool(x, target):
    """Adaptive average pooling of a (C,H,W) map to (C,th,tw).

    Window i covers [floor(i*n/t), ceil((i+1)*n/t)); pooling to the input's
    own grid is the identity. Integer up/down factors take fast paths.
    """
    x = _as_tensor(x)
    c, h, w = x.data.shape
    th, tw = target
    if th < 1 or tw < 1:
        raise ContractError("adaptive_avg_pool target must be at least 1x1")

    if (th, tw) == (h, w):
        def bw_id(g):
            _accum(x, g)
        return _make(x.data.copy(), (x,), bw_id, "adaptive_avg_pool")

    if h % th == 0 and w % tw == 0:
        fh, fw = h // th, w // tw
        y = x.data.reshape(c, th, fh, tw, fw).mean(axis=(2, 4))

        def bw_down(g):
            _accum(x, np.repeat(np.repeat(g, fh, axis=1), fw, axis=2) / (fh * fw))

        return _make(y, (x,), bw_down, "adaptive_avg_pool")

    if th % h == 0 and tw % w == 0:
        fh, fw = th // h, tw // w
        y = np.repeat(np.repeat(x.data, fh, axis=1), fw, axis=2)

        def bw_up(g):
            _accum(x, g.reshape(c, h, fh, w, fw).sum(axis=(2, 4)))

        return _make(y, (x,), bw_up, "adaptive_avg_pool")

    h_starts = (np.arange(th) * h) // th
    h_ends = -(-(np.arange(1, th + 1) * h) // th)
    w_starts = (np.arange(tw) * w) // tw
    w_ends = -(-(np.arange(1, tw + 1) * w) // tw)
    y = np.empty((c, th, tw), dtype=x.data.dtype)
    for i in range(th):
        for j in range(tw):
            y[:, i, j] = x.data[:, h_starts[i] : h_ends[i], w_starts[j] : w_ends[j]].mean(axis=(1, 2))

    def bw(g):
        dx = np.zeros_like(x.data)
        for i in range(th):
            for j in range(tw):
                area = (h_ends[i] - h_starts[i]) * (w_ends[j] - w_starts[j])
                dx[:, h_starts[i] : h_ends[i], w_starts[j] : w_ends[j]] += g[:, i : i + 1, j : j + 1] / area
        _accum(x, dx)

    return _make(y, (x,), bw, "adaptive_avg_pool")


# -- normalization and reductions -----------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale/shift by gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        n = x.data.shape[-1]
        dims = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=dims))
        _accum(bias, g.sum(axis=dims))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _accum(x, dx)

    return _make(y, (x, gain, bias), bw, "layer_norm")


def mean(x):
    x = _as_tensor(x)

    def bw(g):
        _accum(x, np.full_like(x.data, float(g) / x.data.size))

    return _make(np.asarray(x.data.mean()), (x,), bw, "mean")


def l1_loss(a, b):
    """Mean absolute difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    diff = a.data - b.data
    sign = np.sign(diff)

    def bw(g):
        _accum(a, float(g) * sign / diff.size)
        _accum(b, -float(g) * sign / diff.size)

    return _make(np.asarray(np.abs(diff).mean()), (a, b), bw, "l1_loss")


BCE_CLAMP = 1e-7


def bce_loss(p, target):
    """Mean binary cross-entropy; p is clamped into [1e-7, 1-1e-7] before the log."""
    p, target = _as_tensor(p), _as_tensor(target)
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.data
    val = -(t * np.log(pc) + (1 - t) * np.log1p(-pc)).mean()
    inside = (p.data >= BCE_CLAMP) & (p.data <= 1.0 - BCE_CLAMP)

    def bw(g):
        dp = (pc - t) / (pc * (1 - pc)) / p.data.size
        _accum(p, float(g) * dp * inside)

    return _make(np.asarray(val), (p, target), bw, "bce_loss")


def constant(data):
    """Wrap data as a non-differentiable leaf (stop-gradient)."""
    return Tensor(np.asarray(data))
