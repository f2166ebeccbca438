"""Tiny pixel-space denoising UNet hosting the attention adapters.

Layout: conv stem, two stride-2 down blocks, a mid block, two
nearest-upsample up blocks with skip connections, and an output conv.
Every block receives the sinusoidal timestep embedding through its own
learnable projection; every attention block carries text cross-attention,
and the adapted ones additionally run the style mechanisms.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .daa import AttentionAdapter
from .encoders import TOKEN_CHANNELS
from .layers import (
    FeedForward,
    attention,
    collect,
    grid_embedding,
    init_linear,
    layernorm,
    linear,
    timestep_embedding,
    zeros,
)

ATTENTION_LAYERS = ("down1", "down2", "up1", "up2")
UPSAMPLE_LAYERS = ("up1", "up2")


def placement_layers(mode):
    if mode == "up":
        return UPSAMPLE_LAYERS
    if mode == "all":
        return ATTENTION_LAYERS
    raise ValueError(f"unknown adapter placement {mode!r}")


class _Conv:
    def __init__(self, rng, cin, cout, stride=1):
        self.w = Tensor(rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(cin * 9), requires_grad=True)
        self.b = zeros(cout)
        self.stride = stride

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=1)

    def named_parameters(self):
        return {"w": self.w, "b": self.b}


class _ResBlock:
    """conv (optionally strided or channel-changing) + residual conv pair.

    The timestep embedding and the pooled prompt embedding are added
    between the convolutions; the pooled-prompt projection is
    zero-initialized so an untrained block is prompt-independent. A cold
    host cannot bootstrap semantics through cross-attention alone, so this
    additive path carries the coarse conditioning while attention learns
    the fine-grained part.
    """

    def __init__(self, rng, cin, cout, ch_time, stride=1):
        self.entry = _Conv(rng, cin, cout, stride=stride)
        self.conv1 = _Conv(rng, cout, cout)
        self.conv2 = _Conv(rng, cout, cout)
        self.time_w = init_linear(rng, ch_time, cout)
        self.time_b = zeros(cout)
        self.text_w = zeros((ch_time, cout))

    def __call__(self, x, t_emb, text_pool):
        h = ad.silu(self.entry(x))
        proj = ad.add(linear(t_emb, self.time_w, self.time_b), linear(text_pool, self.text_w))
        inner = ad.add(h, ad.reshape(proj, (proj.shape[0], h.shape[1], 1, 1)))
        inner = self.conv2(ad.silu(self.conv1(inner)))
        return ad.add(h, inner)

    def named_parameters(self):
        params = {}
        for name in ("entry", "conv1", "conv2"):
            params.update({f"{name}.{k}": v for k, v in getattr(self, name).named_parameters().items()})
        params["time_w"] = self.time_w
        params["time_b"] = self.time_b
        params["text_w"] = self.text_w
        return params


class AttentionBlock:
    """Self-attention + (dual-path) cross-attention + feed-forward."""

    def __init__(self, rng, d, adapted, style_channels=TOKEN_CHANNELS, text_channels=TOKEN_CHANNELS):
        self.d = d
        self.wq = init_linear(rng, d, d)
        self.wk = init_linear(rng, d, d)
        self.wv = init_linear(rng, d, d)
        self.wo = init_linear(rng, d, d)
        self.cq = init_linear(rng, d, d)
        self.ck = init_linear(rng, text_channels, d)
        self.cv = init_linear(rng, text_channels, d)
        self.ffn = FeedForward(rng, d, mult=2)
        self.adapter = AttentionAdapter(rng, style_channels, d) if adapted else None

    def named_parameters(self, with_dynamic=True):
        params = {
            "wq": self.wq,
            "wk": self.wk,
            "wv": self.wv,
            "wo": self.wo,
            "cq": self.cq,
            "ck": self.ck,
            "cv": self.cv,
        }
        params.update(collect("ffn", self.ffn))
        if self.adapter is not None:
            params.update(
                {f"adapter.{n}": p for n, p in self.adapter.named_parameters(with_dynamic).items()}
            )
        return params

    def __call__(self, x, text_emb, text_bias, zs=None, use_adain=True, use_dynamic=True):
        """x: (B, N, d) spatial tokens; zs: style embedding or None."""
        y = layernorm(x)
        v = linear(y, self.wv)
        if zs is not None and self.adapter is not None and use_adain:
            v = self.adapter.adain_values(v, zs)
        self_out = attention(linear(y, self.wq), linear(y, self.wk), v)
        h = ad.add(x, linear(self_out, self.wo))

        y2 = layernorm(h)
        q = linear(y2, self.cq)
        text_out = attention(q, linear(text_emb, self.ck), linear(text_emb, self.cv), extra_bias=text_bias)
        if zs is not None and self.adapter is not None:
            style_out = self.adapter.style_cross_attention(q, zs, use_dynamic=use_dynamic)
            lam = ad.reshape(self.adapter.lam, (1, 1, 1))
            text_out = ad.add(text_out, ad.mul(style_out, lam))
        h = ad.add(h, text_out)
        return ad.add(h, self.ffn(layernorm(h)))


class ToyUNet:
    def __init__(self, rng, channels=32, adapter_placement="up", style_channels=TOKEN_CHANNELS):
        ch = channels
        self.channels = ch
        self.adapter_placement = adapter_placement
        self.adapted = set(placement_layers(adapter_placement))
        self.stem = _Conv(rng, 3, ch)
        self.stem_time_w = init_linear(rng, ch, ch)
        self.stem_time_b = zeros(ch)
        self.down1 = _ResBlock(rng, ch, ch, ch, stride=2)
        self.down2 = _ResBlock(rng, ch, ch, ch, stride=2)
        self.mid = _ResBlock(rng, ch, ch, ch)
        self.up1 = _ResBlock(rng, 2 * ch, ch, ch)
        self.up2 = _ResBlock(rng, 2 * ch, ch, ch)
        self.out = _Conv(rng, ch, 3)
        self.attn = {
            name: AttentionBlock(rng, ch, adapted=name in self.adapted, style_channels=style_channels)
            for name in ATTENTION_LAYERS
        }
        # Zero-init time-gated input passthrough: noise prediction at high t is
        # dominated by a scaled copy of the input, which a shallow stack cannot
        # otherwise represent cheaply.
        self.skip_gate_w = zeros((ch, 3))
        self.skip_gate_b = zeros(3)
        self._pos_cache = {}  # fixed per-resolution position tables

    def named_parameters(self, with_dynamic=True):
        params = {}
        for name in ("stem", "down1", "down2", "mid", "up1", "up2", "out"):
            params.update({f"{name}.{k}": v for k, v in getattr(self, name).named_parameters().items()})
        for name, block in self.attn.items():
            params.update({f"attn.{name}.{k}": v for k, v in block.named_parameters(with_dynamic).items()})
        params["skip_gate.w"] = self.skip_gate_w
        params["skip_gate.b"] = self.skip_gate_b
        params["stem_time.w"] = self.stem_time_w
        params["stem_time.b"] = self.stem_time_b
        return params

    def adapters(self):
        return {name: self.attn[name].adapter for name in ATTENTION_LAYERS if self.attn[name].adapter}

    def _attend(self, x, name, text_emb, text_bias, zs, use_adain, use_dynamic):
        b, c, h, w = x.shape
        tokens = ad.swapaxes(ad.reshape(x, (b, c, h * w)), 1, 2)
        key = (h, w, c)
        if key not in self._pos_cache:
            self._pos_cache[key] = Tensor(grid_embedding(h, w, c)[None])
        tokens = ad.add(tokens, self._pos_cache[key])
        zs_here = zs if name in self.adapted else None
        tokens = self.attn[name](
            tokens, text_emb, text_bias, zs=zs_here, use_adain=use_adain, use_dynamic=use_dynamic
        )
        return ad.reshape(ad.swapaxes(tokens, 1, 2), (b, c, h, w))

    def forward(self, x, t, text_emb, text_bias, zs=None, use_adain=True, use_dynamic=True):
        """Predict noise for x (B,3,H,W) at integer timesteps t (B,)."""
        t_emb = Tensor(timestep_embedding(t, self.channels))
        text_pool = _masked_mean(text_emb, text_bias)
        kw = dict(text_emb=text_emb, text_bias=text_bias, zs=zs, use_adain=use_adain, use_dynamic=use_dynamic)
        stem_t = linear(t_emb, self.stem_time_w, self.stem_time_b)
        e0 = ad.silu(ad.add(self.stem(x), ad.reshape(stem_t, (stem_t.shape[0], self.channels, 1, 1))))
        d1 = self._attend(self.down1(e0, t_emb, text_pool), "down1", **kw)
        d2 = self._attend(self.down2(d1, t_emb, text_pool), "down2", **kw)
        m = self.mid(d2, t_emb, text_pool)
        u1 = self.up1(ad.concat([ad.upsample2x(m), d1], axis=1), t_emb, text_pool)
        u1 = self._attend(u1, "up1", **kw)
        u2 = self.up2(ad.concat([ad.upsample2x(u1), e0], axis=1), t_emb, text_pool)
        u2 = self._attend(u2, "up2", **kw)
        gate = linear(t_emb, self.skip_gate_w, self.skip_gate_b)  # (B, 3)
        passthrough = ad.mul(x, ad.reshape(gate, (gate.shape[0], 3, 1, 1)))
        return ad.add(self.out(u2), passthrough)


def text_mask_bias(tokens):
    """Additive attention bias masking pad key positions; (B, 1, L)."""
    tokens = np.asarray(tokens)
    bias = np.where(tokens == 0, -1e9, 0.0)
    return Tensor(bias[:, None, :])


def _masked_mean(text_emb, text_bias):
    """Mean prompt embedding over non-pad tokens, (B, c)."""
    keep = (text_bias.data[:, 0, :, None] == 0.0).astype(np.float64)  # (B, L, 1)
    denom = np.maximum(keep.sum(axis=1), 1.0)
    pooled = ad.tsum(ad.mul(text_emb, Tensor(keep)), axis=1)
    return ad.mul(pooled, Tensor(1.0 / denom))
