"""Counter-style random streams.

Every random draw in a run is addressed by a tuple ``(seed, purpose, *counters)``
and produced by a fresh Philox generator keyed on that tuple. Nothing depends on
how many workers process the ensemble, or in which order they finish.
"""

from __future__ import annotations

import numpy as np

# purpose tags, part of the stream key
INIT = 0
UNADJUSTED = 1
ADJUSTED = 2
PROBES = 3
TARGET = 4


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator addressed by ``(seed, *key)``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in key)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
