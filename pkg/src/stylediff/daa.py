"""Dynamic attention adapters.

Two mechanisms per adapted attention layer: an adaIN rescaling of the
self-attention value tensor toward style statistics, and a dual-path
cross-attention whose style-path key/value projections carry an additive,
input-dependent component produced by grouped weight generators.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import attention, init_linear, linear, zeros

DYN_LATENT = 16  # d_z
GROUPS = 4  # G


class AttentionAdapter:
    """Style-conditioning add-on for one attention layer of width d."""

    def __init__(self, rng, style_channels, d, d_z=DYN_LATENT, groups=GROUPS):
        if style_channels % groups:
            raise ValueError("style channels must divide evenly into groups")
        c = style_channels
        self.c = c
        self.d = d
        self.d_z = d_z
        self.groups = groups
        self.f_sa_w = init_linear(rng, c, d)
        self.f_sa_b = zeros(d)
        self.wks = init_linear(rng, c, d)
        self.wvs = init_linear(rng, c, d)
        self.proj_w = init_linear(rng, 2 * c, d_z)
        self.proj_b = zeros(d_z)
        # zero-init biases and weights: the dynamic term vanishes at init
        self.gen_k_w = zeros((d_z, groups * d))
        self.gen_k_b = zeros(groups * d)
        self.gen_v_w = zeros((d_z, groups * d))
        self.gen_v_b = zeros(groups * d)
        self.lam = zeros(1)

    def named_parameters(self, with_dynamic=True):
        params = {
            "f_sa_w": self.f_sa_w,
            "f_sa_b": self.f_sa_b,
            "wks": self.wks,
            "wvs": self.wvs,
            "lam": self.lam,
        }
        if with_dynamic:
            params.update(
                {
                    "proj_w": self.proj_w,
                    "proj_b": self.proj_b,
                    "gen_k_w": self.gen_k_w,
                    "gen_k_b": self.gen_k_b,
                    "gen_v_w": self.gen_v_w,
                    "gen_v_b": self.gen_v_b,
                }
            )
        return params

    def generator_parameter_count(self):
        """Parameters in both grouped generators (weights + biases)."""
        return 2 * (self.d_z * self.groups * self.d + self.groups * self.d)

    def full_generator_parameter_count(self):
        """What ungrouped generators would cost; the grouped ones must be lighter."""
        return 2 * (self.d_z * self.c * self.d + self.c * self.d)

    def adain_values(self, v, zs):
        """Rescale value tokens v (B, N, d) to the style statistics of f_SA(zs)."""
        s = linear(zs, self.f_sa_w, self.f_sa_b)  # (B, T, d)
        mu_s, sig_s = ad.channel_stats(s, axis=-2, keepdims=True)
        mu_v, sig_v = ad.channel_stats(v, axis=-2, keepdims=True)
        return ad.add(mu_s, ad.mul(ad.div(sig_s, sig_v), ad.sub(v, mu_v)))

    def dynamic_weights(self, zs):
        """Grouped dynamic key/value weight matrices (B, c, d) from zs stats."""
        mu, sigma = ad.channel_stats(zs, axis=-2)  # (B, c) each
        stats = ad.concat([mu, sigma], axis=-1)  # (B, 2c)
        z_l = linear(stats, self.proj_w, self.proj_b)  # (B, d_z)
        b = zs.shape[0]
        per_group = self.c // self.groups

        def expand(gen_w, gen_b):
            cols = linear(z_l, gen_w, gen_b)  # (B, G*d)
            cols = ad.reshape(cols, (b, self.groups, 1, self.d))
            full = ad.add(cols, Tensor(np.zeros((b, self.groups, per_group, self.d))))
            return ad.reshape(full, (b, self.c, self.d))

        return expand(self.gen_k_w, self.gen_k_b), expand(self.gen_v_w, self.gen_v_b)

    def style_cross_attention(self, q, zs, use_dynamic=True):
        """Style-path attention read: Attn(q, (Wks+Wkd) zs, (Wvs+Wvd) zs).

        The sum is applied in distributed form (base product + dynamic
        product) so that zeroed generators reproduce the static dual path
        bit-exactly.
        """
        k = linear(zs, self.wks)
        v = linear(zs, self.wvs)
        if use_dynamic:
            w_kd, w_vd = self.dynamic_weights(zs)
            k = ad.add(k, ad.matmul(zs, w_kd))
            v = ad.add(v, ad.matmul(zs, w_vd))
        return attention(q, k, v)
