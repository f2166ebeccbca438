"""Deterministic RNG derivation: every random draw hangs off (seed, *keys)."""

import numpy as np


def make_rng(seed, *keys):
    """Independent generator for a (seed, key...) path; stable across runs."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
