"""Mixed style descriptor: fuses frequency-split patch tokens, Gram
statistics, and a negative caption branch into style embedding tokens.

The main branch runs modified transformer layers whose self-attention input
is modulated by Gram-derived scale/shift; a parallel plain transformer
branch digests caption tokens, and its aligned style-token slice is
subtracted from the main branch before each feed-forward, stripping
semantic leakage from the style embedding.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import FEAT_CHANNELS, TOKEN_CHANNELS, haar_dwt
from .layers import FeedForward, attention, collect, init_linear, layernorm, linear, timestep_embedding, zeros


@dataclass
class RefFeatures:
    """t-independent features of one batch of reference sets."""

    clip_tokens: np.ndarray  # (B, n, P, c): low | high band tokens per image
    caption_emb: np.ndarray  # (B, n, L, c)
    gram_avg: np.ndarray  # (B, FEAT_CHANNELS^2), averaged over the n references
    n_refs: int


def compute_ref_features(frozen, ref_images, ref_captions):
    """Encode reference images/captions once; reused across timesteps.

    ref_images: (B, n, 3, H, W); ref_captions: (B, n, L).
    """
    ref_images = np.asarray(ref_images, dtype=np.float64)
    b, n = ref_images.shape[:2]
    tokens = frozen.patch_tokens(ref_images)  # (B, n, g^2, c)
    g = int(np.sqrt(tokens.shape[-2]))
    from .encoders import PatchTokenGrid  # local import avoids cycle at module load

    bands = haar_dwt(PatchTokenGrid(tokens=tokens, grid=g, channels=tokens.shape[-1]))
    clip_tokens = np.concatenate([bands.low, bands.high], axis=-2)
    caption_emb = frozen.text_encode(ref_captions)
    feats = frozen.feature_extract(ref_images.reshape(b * n, *ref_images.shape[2:]))
    from .encoders import gram as gram_fn

    grams = gram_fn(feats.data).reshape(b, n, -1).mean(axis=1)
    return RefFeatures(clip_tokens=clip_tokens, caption_emb=caption_emb, gram_avg=grams, n_refs=n)


class _MainLayer:
    """Transformer layer with Gram-conditioned modulation of the attention input."""

    def __init__(self, rng, c, gram_dim):
        self.wq = init_linear(rng, c, c)
        self.wk = init_linear(rng, c, c)
        self.wv = init_linear(rng, c, c)
        self.wo = init_linear(rng, c, c)
        # zero init: the layer starts as a plain transformer (identity modulation)
        self.film_w = zeros((gram_dim, 2 * c))
        self.film_b = zeros(2 * c)
        self.ffn = FeedForward(rng, c)

    def named_parameters(self, with_film=True):
        params = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        if with_film:
            params.update({"film_w": self.film_w, "film_b": self.film_b})
        params.update(collect("ffn", self.ffn))
        return params


class _PlainLayer:
    def __init__(self, rng, c):
        self.wq = init_linear(rng, c, c)
        self.wk = init_linear(rng, c, c)
        self.wv = init_linear(rng, c, c)
        self.wo = init_linear(rng, c, c)
        self.ffn = FeedForward(rng, c)

    def __call__(self, x):
        y = layernorm(x)
        attn = attention(linear(y, self.wq), linear(y, self.wk), linear(y, self.wv))
        h = ad.add(x, linear(attn, self.wo))
        return ad.add(h, self.ffn(layernorm(h)))

    def named_parameters(self):
        params = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        params.update(collect("ffn", self.ffn))
        return params


class MixedStyleDescriptor:
    def __init__(
        self,
        rng,
        channels=TOKEN_CHANNELS,
        n_style_tokens=8,
        depth=2,
        gram_dim=FEAT_CHANNELS**2,
        use_gram_film=True,
        use_neg_branch=True,
    ):
        c = channels
        self.channels = c
        self.n_style_tokens = n_style_tokens
        self.depth = depth
        self.use_gram_film = use_gram_film
        self.use_neg_branch = use_neg_branch
        self.style_tokens = Tensor(rng.standard_normal((n_style_tokens, c)) * 0.2, requires_grad=True)
        self.time_w = init_linear(rng, c, c)
        self.time_b = zeros(c)
        self.main_layers = [_MainLayer(rng, c, gram_dim) for _ in range(depth)]
        self.neg_layers = [_PlainLayer(rng, c) for _ in range(depth)]
        self.align_w1 = init_linear(rng, c, c)
        self.align_b1 = zeros(c)
        self.align_w2 = init_linear(rng, c, c)
        self.align_b2 = zeros(c)

    def named_parameters(self):
        params = {
            "style_tokens": self.style_tokens,
            "time_w": self.time_w,
            "time_b": self.time_b,
        }
        for k, layer in enumerate(self.main_layers):
            params.update(
                {f"main{k}.{n}": p for n, p in layer.named_parameters(with_film=self.use_gram_film).items()}
            )
        if self.use_neg_branch:
            for k, layer in enumerate(self.neg_layers):
                params.update({f"neg{k}.{n}": p for n, p in layer.named_parameters().items()})
            params.update(
                {
                    "align_w1": self.align_w1,
                    "align_b1": self.align_b1,
                    "align_w2": self.align_w2,
                    "align_b2": self.align_b2,
                }
            )
        return params

    def time_delta(self, t):
        """Learnable projection of the sinusoidal timestep embedding, (B, c)."""
        sin = Tensor(timestep_embedding(t, self.channels))
        return linear(sin, self.time_w, self.time_b)

    def _neg_align(self, x):
        h = ad.silu(linear(x, self.align_w1, self.align_b1))
        return linear(h, self.align_w2, self.align_b2)

    def modulate(self, x, gram_vec, layer):
        """adaLN-style modulation: layernorm(x) * (1 + scale) + shift."""
        lay = self.main_layers[layer]
        film = linear(gram_vec, lay.film_w, lay.film_b)  # (B, 2c)
        c = self.channels
        scale = ad.reshape(film[:, :c], (film.shape[0], 1, c))
        shift = ad.reshape(film[:, c:], (film.shape[0], 1, c))
        return ad.add(ad.mul(layernorm(x), ad.add(scale, 1.0)), shift)

    def assemble(self, feats, t):
        """Build per-image main/negative token streams.

        Returns (main, neg) shaped (B*n, P+T_s, c) and (B*n, L+T_s, c);
        the timestep delta is added to the style tokens on the main branch
        only.
        """
        b, n, p, c = feats.clip_tokens.shape
        m = b * n
        ts = self.n_style_tokens
        clip = Tensor(feats.clip_tokens.reshape(m, p, c))
        cap = Tensor(feats.caption_emb.reshape(m, -1, c))
        delta = self.time_delta(t)  # (B, c)
        style = ad.reshape(self.style_tokens, (1, 1, ts, c))
        with_time = ad.add(style, ad.reshape(delta, (b, 1, 1, c)))  # (B,1,ts,c)
        style_t = ad.reshape(ad.add(with_time, Tensor(np.zeros((b, n, ts, c)))), (m, ts, c))
        style_plain = ad.add(ad.reshape(self.style_tokens, (1, ts, c)), Tensor(np.zeros((m, ts, c))))
        main = ad.concat([clip, style_t], axis=1)
        neg = ad.concat([cap, style_plain], axis=1)
        return main, neg

    def forward(self, feats, t):
        """Style embedding tokens (B, n*T_s, c) for timesteps t (B,)."""
        b, n, p, c = feats.clip_tokens.shape
        m = b * n
        ts = self.n_style_tokens
        main, neg = self.assemble(feats, t)
        if self.use_gram_film:
            gram_rep = Tensor(np.repeat(feats.gram_avg, n, axis=0))  # (m, gram_dim)
        for k in range(self.depth):
            if self.use_neg_branch:
                neg = self.neg_layers[k](neg)
            lay = self.main_layers[k]
            y = self.modulate(main, gram_rep, k) if self.use_gram_film else layernorm(main)
            attn = attention(linear(y, lay.wq), linear(y, lay.wk), linear(y, lay.wv))
            h = ad.add(main, linear(attn, lay.wo))
            if self.use_neg_branch:
                aligned = self._neg_align(neg[:, -ts:, :])
                h = ad.concat([h[:, :p, :], ad.sub(h[:, p:, :], aligned)], axis=1)
            main = ad.add(h, lay.ffn(layernorm(h)))
        out = main[:, p:, :]  # final style-token slice per reference image
        return ad.reshape(out, (b, n * ts, c))
