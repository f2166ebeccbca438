"""The three training objectives and their unit-weight combination."""

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import estimate_x0, q_sample
from .encoders import gram

log = logging.getLogger(__name__)

DISEN_DELTA = 0.1  # weight of the image-similarity term in the disentangle loss
STYLE_MARGIN = 0.1  # hinge margin of the Gram triplet


@dataclass
class LossBreakdown:
    noise: float
    disen: float
    style: float
    total: float
    delta_p: float
    delta_n: float

    def as_dict(self):
        return {
            "noise": self.noise,
            "disen": self.disen,
            "style": self.style,
            "total": self.total,
            "delta_p": self.delta_p,
            "delta_n": self.delta_n,
        }


def noise_loss(eps, eps_hat):
    """Mean squared error over every entry."""
    target = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=np.float64))
    diff = ad.sub(target, eps_hat)
    return ad.tmean(ad.mul(diff, diff))


def _pool(tokens):
    """Mean over all leading token axes -> (B, c)."""
    if isinstance(tokens, Tensor):
        if tokens.ndim == 4:
            tokens = ad.reshape(tokens, (tokens.shape[0], -1, tokens.shape[-1]))
        return ad.tmean(tokens, axis=1)
    arr = np.asarray(tokens, dtype=np.float64)
    arr = arr.reshape(arr.shape[0], -1, arr.shape[-1])
    return Tensor(arr.mean(axis=1))


def _cosine_rows(a, b):
    """Row-wise cosine similarity of (B, c) tensors; zero vectors give 0."""
    for side, name in ((a, "left"), (b, "right")):
        data = side.data if isinstance(side, Tensor) else side
        norms = np.linalg.norm(np.asarray(data), axis=-1)
        if np.any(norms < 1e-12):
            log.warning("cosine guard: zero-norm pooled vector on %s side", name)
    dot = ad.tsum(ad.mul(a, b), axis=-1)
    na = ad.maximum_scalar(ad.tsqrt(ad.tsum(ad.mul(a, a), axis=-1)), 1e-12)
    nb = ad.maximum_scalar(ad.tsqrt(ad.tsum(ad.mul(b, b), axis=-1)), 1e-12)
    return ad.div(dot, ad.mul(na, nb))


def disen_loss(cap_tokens, zs, clip_tokens):
    """sim(caption, style) - delta * sim(image, style), mean over the batch.

    Each token set is mean-pooled to one vector per sample before the
    cosine; minimizing pushes the style embedding away from caption
    semantics while (weakly) anchoring it to the image features.
    """
    cap = _pool(cap_tokens)
    imgs = _pool(clip_tokens)
    style = _pool(zs)
    per_sample = ad.sub(_cosine_rows(cap, style), ad.mul(_cosine_rows(imgs, style), DISEN_DELTA))
    return ad.tmean(per_sample)


def gram_triplet_loss(frozen, x0_est, pos_images, neg_images):
    """Hinge on Gram distances: anchor close to style-preserving variants,
    far from style-destroyed ones.

    Returns (style, delta_p, delta_n) as scalar graph nodes; delta terms are
    batch means of the entrywise-absolute Gram distances.
    """
    g_anchor = gram(frozen.feature_extract(x0_est))  # (B, c'^2), differentiable
    g_pos = Tensor(gram(frozen.feature_extract(np.asarray(pos_images)).data))
    g_neg = Tensor(gram(frozen.feature_extract(np.asarray(neg_images)).data))
    dp = ad.tsum(ad.tabs(ad.sub(g_anchor, g_pos)), axis=-1)  # (B,)
    dn = ad.tsum(ad.tabs(ad.sub(g_anchor, g_neg)), axis=-1)
    hinge = ad.maximum_scalar(ad.add(ad.sub(dp, dn), STYLE_MARGIN), 0.0)
    return ad.tmean(hinge), ad.tmean(dp), ad.tmean(dn)


def total_loss(model, batch, use_style=True, use_disen=True):
    """Full objective on one batch; returns (total node, LossBreakdown).

    Pipeline: forward-noise the clean images, embed the references at the
    drawn timesteps, predict the noise, estimate the clean image, then
    combine the three terms with unit weights.
    """
    feats = model.ref_features(batch.ref_images, batch.ref_captions)
    z_t = q_sample(model.schedule, batch.x0, batch.t, batch.eps)
    zs = model.style_embedding(feats, batch.t)
    eps_hat = model.denoise(z_t, batch.t, batch.prompt_tokens, zs=zs)
    l_noise = noise_loss(batch.eps, eps_hat)
    _, x0_clamped = estimate_x0(model.schedule, Tensor(z_t), eps_hat, batch.t)
    zero = Tensor(np.zeros(()))
    if use_style:
        l_style, dp, dn = gram_triplet_loss(model.frozen, x0_clamped, batch.pos_images, batch.neg_images)
    else:
        l_style, dp, dn = zero, zero, zero
    l_disen = disen_loss(feats.caption_emb, zs, feats.clip_tokens) if use_disen else zero
    total = ad.add(ad.add(l_noise, l_disen), l_style)
    breakdown = LossBreakdown(
        noise=float(l_noise.data),
        disen=float(l_disen.data),
        style=float(l_style.data),
        total=float(total.data),
        delta_p=float(dp.data),
        delta_n=float(dn.data),
    )
    return total, breakdown
