"""Frozen feature extractors plus the Haar band split and Gram statistics.

The patch, text, and convolutional encoders are seeded random frozen
networks standing in for large pretrained backbones; their weights are
derived from the run seed and never trained. Gradients may flow *through*
the convolutional feature net (the style loss needs that) but never into it.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .layers import sinusoid_table
from .rng import make_rng
from .synthdata import L_CAP, PAD, V_CAP

PATCH = 4
TOKEN_CHANNELS = 32  # c: patch/text token width
FEAT_CHANNELS = 24  # c': convolutional feature channels
FEAT_SCALE = 0.8  # calibrates Gram magnitudes so style distances are O(0.1..1)


@dataclass
class PatchTokenGrid:
    tokens: np.ndarray  # (g*g, c), row-major over the patch lattice
    grid: int
    channels: int


@dataclass
class FrequencyBands:
    low: np.ndarray  # ((g/2)^2, c)
    high: np.ndarray  # (3*(g/2)^2, c), band order LH, HL, HH


class FrozenEncoders:
    """All frozen stand-in networks for one run seed."""

    def __init__(self, seed):
        self.seed = seed
        rng = make_rng(seed, 7001)
        c = TOKEN_CHANNELS
        in_dim = 3 * PATCH * PATCH
        self.patch_w0 = rng.standard_normal((in_dim, c)) / np.sqrt(in_dim)
        self.patch_b0 = rng.standard_normal(c) * 0.1
        self.patch_w1 = rng.standard_normal((c, c)) / np.sqrt(c)
        self.patch_b1 = rng.standard_normal(c) * 0.1
        self.patch_w2 = rng.standard_normal((c, c)) / np.sqrt(c)
        self.patch_b2 = rng.standard_normal(c) * 0.1
        self.text_table = rng.standard_normal((V_CAP, c)) / np.sqrt(c)
        self.pos_table = sinusoid_table(L_CAP, c)
        # Zero-mean kernels: flat regions (the gray background) produce exactly
        # zero features, so Gram statistics describe the textured region only.
        w1 = rng.standard_normal((16, 3, 3, 3))
        w1 -= w1.mean(axis=(1, 2, 3), keepdims=True)
        w2 = rng.standard_normal((FEAT_CHANNELS, 16, 3, 3))
        w2 -= w2.mean(axis=(1, 2, 3), keepdims=True)
        self.conv1 = Tensor(w1 * (FEAT_SCALE / np.sqrt(27)))
        self.conv2 = Tensor(w2 * (FEAT_SCALE / np.sqrt(144)))

    def named_weights(self):
        """Flat name -> array view of every frozen weight (for checkpoints)."""
        return {
            "frozen.patch_w0": self.patch_w0,
            "frozen.patch_b0": self.patch_b0,
            "frozen.patch_w1": self.patch_w1,
            "frozen.patch_b1": self.patch_b1,
            "frozen.patch_w2": self.patch_w2,
            "frozen.patch_b2": self.patch_b2,
            "frozen.text_table": self.text_table,
            "frozen.conv1": self.conv1.data,
            "frozen.conv2": self.conv2.data,
        }

    # -- CLIP stand-in ------------------------------------------------------

    def patch_tokens(self, images):
        """Non-overlapping 4x4 patches -> frozen linear + tanh MLP tokens.

        images: (..., 3, H, W) with H = W divisible by 4.
        Returns (..., (H/4)^2, c) plain arrays (reference images carry no
        gradient).
        """
        images = np.asarray(images, dtype=np.float64)
        h, w = images.shape[-2], images.shape[-1]
        if h != w or h % PATCH:
            raise DimensionError(f"patch_tokens: size {h}x{w} not divisible by {PATCH}")
        g = h // PATCH
        lead = images.shape[:-3]
        x = images.reshape(lead + (3, g, PATCH, g, PATCH))
        x = np.moveaxis(x, -4, -2)  # (..., 3, g, g, PATCH, PATCH)
        x = np.moveaxis(x, -5, -3)  # (..., g, g, 3, PATCH, PATCH)
        flat = x.reshape(lead + (g * g, 3 * PATCH * PATCH))
        t0 = flat @ self.patch_w0 + self.patch_b0
        hdn = np.tanh(t0 @ self.patch_w1 + self.patch_b1)
        return hdn @ self.patch_w2 + self.patch_b2

    def patch_encode(self, image):
        """Single-image PatchTokenGrid."""
        tokens = self.patch_tokens(image)
        g = int(np.sqrt(tokens.shape[-2]))
        return PatchTokenGrid(tokens=tokens, grid=g, channels=TOKEN_CHANNELS)

    # -- text stand-in ------------------------------------------------------

    def text_encode(self, tokens):
        """Frozen table lookup plus sinusoidal positions on non-pad slots.

        tokens: (..., L) integer ids. Pad positions carry the pad table row
        exactly (no position added), so padded tails are content-free.
        """
        tokens = np.asarray(tokens)
        if (tokens < 0).any() or (tokens >= V_CAP).any():
            raise ValueError(f"text_encode: token id outside vocabulary of {V_CAP}")
        emb = self.text_table[tokens].copy()
        length = tokens.shape[-1]
        pos = self.pos_table[:length] if length <= L_CAP else sinusoid_table(length, emb.shape[-1])
        nonpad = (tokens != PAD)[..., None]
        emb += np.where(nonpad, pos, 0.0)
        return emb

    # -- VGG stand-in -------------------------------------------------------

    def feature_extract(self, images):
        """Two frozen stride-2 biasless convs with ReLU; returns (..., c', h'*w').

        Accepts a Tensor (gradient flows through to the input) or an array.
        """
        x = images if isinstance(images, ad.Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        squeeze = x.ndim == 3
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        h = ad.relu(ad.conv2d(x, self.conv1, stride=2, padding=1))
        h = ad.relu(ad.conv2d(h, self.conv2, stride=2, padding=1))
        b, cf, hh, ww = h.shape
        out = ad.reshape(h, (b, cf, hh * ww))
        return ad.reshape(out, (cf, hh * ww)) if squeeze else out


# ---------------------------------------------------------------------------
# Haar DWT over the patch-token lattice

_HAAR = 0.5 * np.array(
    [
        [1.0, 1.0, 1.0, 1.0],  # LL
        [1.0, -1.0, 1.0, -1.0],  # LH (detail across columns)
        [1.0, 1.0, -1.0, -1.0],  # HL (detail across rows)
        [1.0, -1.0, -1.0, 1.0],  # HH
    ]
)


def _lattice(tokens, g):
    return tokens.reshape(tokens.shape[:-2] + (g, g, tokens.shape[-1]))


def haar_dwt(grid):
    """One orthonormal 2-D Haar level over the g x g token lattice.

    Returns FrequencyBands with high = LH | HL | HH concatenated along the
    token axis (fixed order). Works per channel; Parseval holds exactly up
    to roundoff.
    """
    g, c = grid.grid, grid.channels
    if g % 2:
        raise DimensionError("haar_dwt needs an even token grid")
    lat = _lattice(grid.tokens, g)
    a = lat[..., 0::2, 0::2, :]
    b = lat[..., 0::2, 1::2, :]
    cc = lat[..., 1::2, 0::2, :]
    d = lat[..., 1::2, 1::2, :]
    stacked = np.stack([a, b, cc, d], axis=-1)  # (..., g/2, g/2, c, 4)
    coeffs = stacked @ _HAAR.T  # (..., g/2, g/2, c, 4)
    n = (g // 2) * (g // 2)
    flat = coeffs.reshape(grid.tokens.shape[:-2] + (n, c, 4))
    low = flat[..., 0]
    high = np.concatenate([flat[..., 1], flat[..., 2], flat[..., 3]], axis=-2)
    return FrequencyBands(low=low, high=high)


def haar_idwt(bands):
    """Inverse of haar_dwt; perfect reconstruction up to roundoff."""
    n, c = bands.low.shape[-2], bands.low.shape[-1]
    half = int(np.sqrt(n))
    hi = bands.high.reshape(bands.high.shape[:-2] + (3, n, c))
    coeffs = np.stack(
        [bands.low, hi[..., 0, :, :], hi[..., 1, :, :], hi[..., 2, :, :]], axis=-1
    )  # (..., n, c, 4)
    stacked = coeffs @ _HAAR  # orthonormal: inverse is the transpose
    lead = bands.low.shape[:-2]
    quads = stacked.reshape(lead + (half, half, c, 4))
    g = 2 * half
    lat = np.zeros(lead + (g, g, c))
    lat[..., 0::2, 0::2, :] = quads[..., 0]
    lat[..., 0::2, 1::2, :] = quads[..., 1]
    lat[..., 1::2, 0::2, :] = quads[..., 2]
    lat[..., 1::2, 1::2, :] = quads[..., 3]
    return PatchTokenGrid(tokens=lat.reshape(lead + (g * g, c)), grid=g, channels=c)


# ---------------------------------------------------------------------------
# Gram descriptor


def gram(features):
    """Token-count-normalized Gram vector of features (..., c', n) -> (..., c'^2).

    Accepts Tensors (differentiable, used by the style loss) or arrays.
    """
    if isinstance(features, ad.Tensor):
        cf = features.shape[-2]
        n = features.shape[-1]
        g = ad.mul(ad.matmul(features, ad.swapaxes(features, -1, -2)), 1.0 / n)
        return ad.reshape(g, features.shape[:-2] + (cf * cf,))
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[-1]
    g = np.matmul(f, np.swapaxes(f, -1, -2)) / n
    return g.reshape(f.shape[:-2] + (f.shape[-2] * f.shape[-2],))


def gram_of_image(encoders, image):
    """Gram descriptor of one image (or a batch) through the frozen features."""
    feats = encoders.feature_extract(np.asarray(image, dtype=np.float64))
    return gram(feats.data)


def average_gram(encoders, images):
    """Mean Gram descriptor over a stack of reference images (n, 3, H, W)."""
    return gram_of_image(encoders, images).mean(axis=0)
