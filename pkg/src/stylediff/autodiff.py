"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every downstream module builds on this. Data lives in C-order numpy
float64 arrays; gradients are recorded on an explicit tape whose node
order is the execution order (which is automatically topological), and
backward walks the tape exactly once in reverse.
"""

import threading
from contextlib import contextmanager

import numpy as np

EPS_STD = 1e-5  # floor for standard deviations, keeps adaIN-style divisions total


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """N-d float64 array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all dispatch to the module-level ops
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError(".T is defined for 2-d tensors only")
        return swapaxes(self, 0, 1)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class GradTape:
    """Ordered record of differentiable ops.

    Nodes are appended in execution order, so inputs always precede the
    node that consumes them; backward() therefore only needs a single
    reverse sweep.
    """

    def __init__(self):
        self.nodes = []  # (out, inputs, backward_fn)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        if loss.size != 1:
            raise DimensionError("backward expects a scalar loss")
        if not loss.requires_grad:
            raise ValueError("loss does not require grad (nothing recorded)")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, bw in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            for inp, gi in zip(inputs, bw(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi if gi.flags["OWNDATA"] else gi.copy()
                else:
                    inp.grad += gi


_state = threading.local()


def _tape():
    return getattr(_state, "tape", None)


@contextmanager
def record(tape):
    prev = _tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextmanager
def no_grad():
    prev = _tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward):
    """Wrap an op result; record on the active tape when gradients flow."""
    tape = _tape()
    if tape is not None:
        for i in inputs:
            if i.requires_grad:
                out = Tensor(data, requires_grad=True)
                tape.nodes.append((out, inputs, backward))
                return out
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    inv = 1.0 / b.data
    return _make(
        a.data * inv,
        (a, b),
        lambda g: (
            _unbroadcast(g * inv, a.data.shape),
            _unbroadcast(-g * a.data * inv * inv, b.data.shape),
        ),
    )


def texp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tlog(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def tabs(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def silu(a):
    """x * sigmoid(x); the smooth activation used by the trainable nets."""
    a = as_tensor(a)
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = x * sig
    return _make(out, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),))


def maximum_scalar(a, c):
    """max(a, c) elementwise; subgradient 0 on the clamped side."""
    a = as_tensor(a)
    mask = a.data > c
    return _make(np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


def clip01(a):
    """Clamp to [0,1]; gradient passes through the interior only."""
    a = as_tensor(a)
    mask = (a.data > 0.0) & (a.data < 1.0)
    return _make(np.clip(a.data, 0.0, 1.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return _make(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return _make(
        np.ascontiguousarray(a.data.swapaxes(ax1, ax2)),
        (a,),
        lambda g: (np.ascontiguousarray(g.swapaxes(ax1, ax2)),),
    )


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """2-d x 2-d or batched 3-d x 3-d matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
        return _make(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g),
        )
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"matmul: batched dims disagree {a.shape} x {b.shape}")
        return _make(
            np.matmul(a.data, b.data),
            (a, b),
            lambda g: (
                np.matmul(g, b.data.swapaxes(1, 2)),
                np.matmul(a.data.swapaxes(1, 2), g),
            ),
        )
    raise DimensionError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")


def layernorm_lastaxis(x, eps=1e-5):
    """Zero-mean unit-variance normalization of the last axis (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) * inv,)

    return _make(y, (x,), backward)


def softmax(x, axis=-1):
    """Row-normalized exponentials, stabilized by max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=axis, keepdims=True)
    out = shifted

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), backward)


def channel_stats(x, axis=-2, keepdims=False):
    """Per-channel mean and std over the token axis.

    Std is the population std with variance floored at EPS_STD**2, so the
    returned sigma is always >= EPS_STD and its gradient at the floor is 0.
    """
    x = as_tensor(x)
    if x.data.shape[axis] < 1:
        raise DimensionError("channel_stats: empty token axis")
    mu = tmean(x, axis=axis, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    sigma = tsqrt(maximum_scalar(var, EPS_STD * EPS_STD))
    if not keepdims:
        mu = reshape(mu, _drop_axis(mu.data.shape, axis))
        sigma = reshape(sigma, _drop_axis(sigma.data.shape, axis))
    return mu, sigma


def _drop_axis(shape, axis):
    axis = axis % len(shape)
    return tuple(s for i, s in enumerate(shape) if i != axis)


# ---------------------------------------------------------------------------
# convolution and resampling (image tensors are (B, C, H, W))


def conv2d(x, w, bias=None, stride=1, padding=0):
    """Cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if bias is not None:
        bias = as_tensor(bias)
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise DimensionError(f"conv2d: channel mismatch {Cin} vs {Cin_w}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,Cin,Ho,Wo,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, Cin * kh * kw
    )
    wmat = w.data.reshape(Cout, Cin * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = gb = gx = None
        if w.requires_grad:
            gw = (gcols.T @ cols).reshape(Cout, Cin, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcol = (gcols @ wmat).reshape(B, Ho, Wo, Cin, kh, kw)
            gxp = np.zeros((B, Cin, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += (
                        gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : Hp - padding, padding : Wp - padding] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    return _make(out, (x, w, bias) if bias is not None else (x, w), backward)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling of (B,C,H,W)."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)
