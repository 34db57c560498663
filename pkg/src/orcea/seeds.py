"""Deterministic seed derivation so that every run is reproducible in isolation."""

import numpy as np


def sub_seed(*keys: int) -> int:
    """A 64-bit seed derived from a tuple of non-negative integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
