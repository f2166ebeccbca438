"""DDPM schedule, forward noising, clean-sample estimation, ancestral sampler."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import make_rng


class DiffusionSchedule:
    """Linear-beta schedule over T steps.

    Both endpoints are scaled for short chains: the end so that
    sqrt(alpha_bar_T) drops below 0.1 (sampling must start from noise the
    model trained on), and the start so that no level demands a denoising
    gain beyond what a small network can express — beta_0 ~ 1e-4 would
    require amplifying the input by 1/sqrt(beta_0) ~ 100x at t=0, leaving
    an irreducible loss floor that drowns the conditioning gradient.
    """

    def __init__(self, T=100, beta_start=0.04, beta_end=None):
        if beta_end is None:
            # sum(beta) ~ 4.8 makes alpha_bar_T ~ exp(-4.8-...) < 0.01 for any T
            beta_end = min(2 * 4.8 / T - beta_start, 0.45)
        self.T = T
        self.betas = np.linspace(beta_start, beta_end, T)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check(self):
        assert np.all(np.diff(self.alpha_bars) < 0), "alpha_bar must strictly decrease"
        assert 0 < self.alpha_bars[-1] < self.alpha_bars[0] < 1
        assert np.sqrt(self.alpha_bars[-1]) < 0.1, "terminal signal not destroyed enough"
        return self

    def _coeff(self, t, arr, ndim):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"timestep out of range [0, {self.T})")
        vals = arr[t]
        return vals.reshape(vals.shape + (1,) * (ndim - vals.ndim))


def q_sample(schedule, x0, t, noise):
    """z_t = sqrt(abar_t) x0 + sqrt(1-abar_t) noise; x0/noise (B,3,H,W) or (3,H,W)."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError("noise must match x0's shape")
    abar = schedule._coeff(t, schedule.alpha_bars, x0.ndim)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def estimate_x0(schedule, z_t, eps_hat, t):
    """Invert q_sample given a noise estimate.

    Returns (raw, clamped): the clamped branch feeds feature extraction in
    the style loss; gradients pass the clamp only inside (0, 1).
    """
    z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float64))
    abar = schedule._coeff(t, schedule.alpha_bars, z.ndim)
    raw = ad.mul(ad.sub(z, ad.mul(eps_hat, np.sqrt(1.0 - abar))), 1.0 / np.sqrt(abar))
    return raw, ad.clip01(raw)


def sample_timesteps(T, steps):
    """Descending subset of timesteps for the reverse pass."""
    if not 1 <= steps <= T:
        raise ValueError("steps must lie in [1, T]")
    ts = np.unique(np.linspace(0, T - 1, steps).round().astype(np.int64))
    return ts[::-1]


def ancestral_sample(schedule, denoise_fn, shape, seed, steps=None):
    """Standard DDPM reverse process from Gaussian noise, deterministic in seed.

    denoise_fn(z, t_array) -> noise prediction; runs with gradients off.
    Supports strided schedules: consecutive kept timesteps use the
    generalized posterior between their alpha_bar values.
    """
    steps = steps or schedule.T
    rng = make_rng(seed, 909)
    ts = sample_timesteps(schedule.T, steps)
    z = rng.standard_normal(shape)
    with ad.no_grad():
        for i, t in enumerate(ts):
            t_arr = np.full(shape[0], t, dtype=np.int64)
            eps_hat = denoise_fn(z, t_arr)
            eps = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
            abar_t = schedule.alpha_bars[t]
            x0 = (z - np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t)
            x0 = np.clip(x0, 0.0, 1.0)
            if i + 1 == len(ts):
                z = x0
                break
            s = ts[i + 1]
            abar_s = schedule.alpha_bars[s]
            alpha_ts = abar_t / abar_s
            beta_ts = 1.0 - alpha_ts
            mean = (
                np.sqrt(abar_s) * beta_ts / (1.0 - abar_t) * x0
                + np.sqrt(alpha_ts) * (1.0 - abar_s) / (1.0 - abar_t) * z
            )
            var = beta_ts * (1.0 - abar_s) / (1.0 - abar_t)
            z = mean + np.sqrt(var) * rng.standard_normal(shape)
    return z
