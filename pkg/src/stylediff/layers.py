"""Small trainable building blocks shared by the descriptor and the UNet."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def init_linear(rng, fan_in, fan_out, scale=1.0):
    return Tensor(rng.standard_normal((fan_in, fan_out)) * (scale / np.sqrt(fan_in)), requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def linear(x, w, b=None):
    """x (..., in) @ w (in, out) + b; collapses leading dims for the matmul."""
    shape = x.shape
    if x.ndim > 2:
        x2 = ad.reshape(x, (-1, shape[-1]))
        y = ad.matmul(x2, w)
        y = ad.reshape(y, shape[:-1] + (w.shape[1],))
    else:
        y = ad.matmul(x, w)
    if b is not None:
        y = ad.add(y, b)
    return y


def layernorm(x, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    return ad.layernorm_lastaxis(x, eps)


def attention(q, k, v, extra_bias=None):
    """Single-head scaled dot-product attention over token matrices.

    q, k, v are (..., tokens, dim); extra_bias, when given, is added to the
    logits (used for masking padded key positions).
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale)
    if extra_bias is not None:
        scores = ad.add(scores, extra_bias)
    return ad.matmul(ad.softmax(scores, axis=-1), v)


class FeedForward:
    """Two-layer MLP dim -> mult*dim -> dim with SiLU."""

    def __init__(self, rng, dim, mult=4):
        self.w1 = init_linear(rng, dim, mult * dim)
        self.b1 = zeros(mult * dim)
        self.w2 = init_linear(rng, mult * dim, dim)
        self.b2 = zeros(dim)

    def __call__(self, x):
        return linear(ad.silu(linear(x, self.w1, self.b1)), self.w2, self.b2)

    def named_parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def sinusoid_table(length, dim):
    """Fixed sin/cos table, one row per position."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def grid_embedding(h, w, dim):
    """Fixed 2-D sinusoidal position table for an h x w lattice, (h*w, dim).

    Row and column coordinates each fill half the channels; attention over
    spatial tokens needs this to localize (convolutions alone carry almost
    no absolute position at desk scale).
    """
    half = dim // 2
    rows = sinusoid_table(h, half)
    cols = sinusoid_table(w, dim - half)
    table = np.zeros((h, w, dim))
    table[:, :, :half] = rows[:, None, :]
    table[:, :, half:] = cols[None, :, :]
    return table.reshape(h * w, dim)


def timestep_embedding(t, dim, max_steps=10000):
    """Sinusoidal embedding of integer timesteps t (array-like) -> (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    i = np.arange(dim // 2)[None, :]
    angle = t[:, None] / np.power(float(max_steps), 2.0 * i / dim)
    emb = np.zeros((t.shape[0], dim))
    emb[:, 0::2] = np.sin(angle)
    emb[:, 1::2] = np.cos(angle)
    return emb


def collect(prefix, module):
    """Flatten a module's named_parameters() under a dotted prefix."""
    return {f"{prefix}.{k}": v for k, v in module.named_parameters().items()}
