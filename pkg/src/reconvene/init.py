"""Seeded random streams and Kaiming-normal initialisation."""

from __future__ import annotations

import numpy as np

# stream tags keep the draws for different purposes independent
STREAM_INIT = 0
STREAM_REINIT_DENSE = 1
STREAM_REINIT_SPARSE = 2
STREAM_POLICY = 3
STREAM_PROFILE = 4
STREAM_SHUFFLE = 5
STREAM_DATA = 6


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys]))


def kaiming_normal(
    shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32
) -> np.ndarray:
    """N(0, 2 / fan_in) samples (fan-in mode, ReLU gain)."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape, dtype=np.float64) * std).astype(dtype)
