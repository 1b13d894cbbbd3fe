"""Deterministic random stream derivation.

Every stochastic component draws from a generator keyed by a root seed plus
a structured integer path (participant, segment, epoch, batch, slot, ...),
so results are independent of evaluation order and process scheduling.
"""

from __future__ import annotations

import numpy as np


def substream(root_seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream addressed by (root_seed, *path).

    Streams with different paths are statistically independent; the same
    (root_seed, path) always yields an identical sequence.
    """
    if root_seed < 0:
        raise ValueError("root_seed must be non-negative")
    key = tuple(int(p) for p in path)
    if any(p < 0 for p in key):
        raise ValueError(f"stream path must be non-negative, got {key}")
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
