"""Named random streams.

Every random draw in a run comes from a Philox (counter-based) generator
keyed by an explicit integer seed and a stream name, so two stages never
share a stream by accident and nothing depends on global RNG state.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name."""
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str = "default") -> np.random.Generator:
    """Create a generator for ``(seed, stream)``.

    Args:
        seed: Non-negative run seed
        stream: Stream name, e.g. ``"data/holdout"`` or ``"bilevel"``

    Returns:
        Fresh numpy Generator backed by Philox
    """
    if seed < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence([int(seed), stream_key(stream)])
    return np.random.Generator(np.random.Philox(sequence))
