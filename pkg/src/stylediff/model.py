"""Full model assembly: frozen encoders + style descriptor + adapted UNet."""

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Tensor
from .diffusion import DiffusionSchedule, ancestral_sample
from .encoders import FrozenEncoders, TOKEN_CHANNELS
from .msd import MixedStyleDescriptor, compute_ref_features
from .rng import make_rng
from .unet import ToyUNet, text_mask_bias


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 32
    n_style_tokens: int = 8
    msd_depth: int = 2
    T: int = 100
    adapter_placement: str = "up"  # "up" (default) or "all"
    no_gram_film: bool = False
    no_neg_branch: bool = False
    no_dynamic_weights: bool = False
    no_adain: bool = False

    def validate(self):
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if self.adapter_placement not in ("up", "all"):
            raise ValueError("adapter_placement must be 'up' or 'all'")
        return self


class StyleDiffusionModel:
    def __init__(self, config, seed):
        config.validate()
        self.config = config
        self.seed = seed
        self.frozen = FrozenEncoders(seed)
        self.msd = MixedStyleDescriptor(
            make_rng(seed, 1101),
            channels=TOKEN_CHANNELS,
            n_style_tokens=config.n_style_tokens,
            depth=config.msd_depth,
            use_gram_film=not config.no_gram_film,
            use_neg_branch=not config.no_neg_branch,
        )
        self.unet = ToyUNet(
            make_rng(seed, 1102),
            channels=config.channels,
            adapter_placement=config.adapter_placement,
        )
        self.schedule = DiffusionSchedule(T=config.T).check()

    # -- parameters -----------------------------------------------------

    def named_parameters(self):
        params = {f"msd.{k}": v for k, v in self.msd.named_parameters().items()}
        with_dynamic = not self.config.no_dynamic_weights
        unet_params = self.unet.named_parameters(with_dynamic)
        if self.config.no_adain:
            unet_params = {k: v for k, v in unet_params.items() if not k.endswith(("f_sa_w", "f_sa_b"))}
        params.update({f"unet.{k}": v for k, v in unet_params.items()})
        return params

    def trainable_set(self, freeze_host=False):
        """Names -> tensors that the optimizer may update.

        With freeze_host the host UNet stays fixed and only the style
        descriptor plus the adapters (incl. their mixing coefficients)
        train, mirroring an adapter-on-pretrained-backbone setup.
        """
        params = self.named_parameters()
        if not freeze_host:
            return params
        return {k: v for k, v in params.items() if k.startswith("msd.") or ".adapter." in k}

    # -- conditioning ---------------------------------------------------

    def ref_features(self, ref_images, ref_captions):
        return compute_ref_features(self.frozen, ref_images, ref_captions)

    def style_embedding(self, feats, t):
        return self.msd.forward(feats, t)

    def encode_prompt(self, prompt_tokens):
        prompt_tokens = np.atleast_2d(np.asarray(prompt_tokens))
        emb = Tensor(self.frozen.text_encode(prompt_tokens))
        return emb, text_mask_bias(prompt_tokens)

    # -- denoising ------------------------------------------------------

    def denoise(self, z_t, t, prompt_tokens, feats=None, zs=None):
        """Noise prediction; recomputes the style embedding at this t unless
        a precomputed zs is supplied."""
        cfg = self.config
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float64))
        text_emb, text_bias = self.encode_prompt(prompt_tokens)
        if zs is None and feats is not None:
            zs = self.style_embedding(feats, t)
        return self.unet.forward(
            z,
            t,
            text_emb,
            text_bias,
            zs=zs,
            use_adain=not cfg.no_adain,
            use_dynamic=not cfg.no_dynamic_weights,
        )

    def sample(self, prompt_tokens, ref_images=None, ref_captions=None, seed=0, steps=None, batch=None):
        """Generate images for the given prompts, optionally style-conditioned.

        prompt_tokens: (B, L). ref_images/ref_captions describe ONE reference
        set (n, 3, H, W) shared by the whole batch; the timestep-aware style
        embedding is recomputed at every sampler step.
        """
        prompt_tokens = np.atleast_2d(np.asarray(prompt_tokens))
        b = batch or prompt_tokens.shape[0]
        feats = None
        if ref_images is not None:
            feats = self.ref_features(ref_images[None], ref_captions[None])  # B=1

        def denoise_fn(z, t_arr):
            zs = None
            if feats is not None:
                zs1 = self.style_embedding(feats, t_arr[:1])
                zs = Tensor(np.repeat(zs1.data, b, axis=0))
            return self.denoise(z, t_arr, prompt_tokens, zs=zs)

        shape = (b, 3, self.config.image_size, self.config.image_size)
        return ancestral_sample(self.schedule, denoise_fn, shape, seed=seed, steps=steps)
