"""Named, counter-based random streams.

Every stochastic draw in the pipeline comes from a stream addressed by
``(seed, purpose, *indices)``.  Streams are backed by Philox, a counter-based
generator, so any draw can be reproduced in isolation without replaying the
run: the address alone determines the stream.  Two runs with the same seed
replay each other exactly, and reordering unrelated work (parallel
trajectories, ensemble members) cannot perturb the draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["purpose_key", "stream"]


def purpose_key(purpose: str) -> int:
    """Stable 64-bit key for a stream purpose label."""
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return the generator for the stream named ``(seed, purpose, *indices)``.

    ``indices`` typically identify a step, trajectory, case or ensemble
    member.  The same address always yields the same stream, independent of
    platform and of any other draws made elsewhere.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    for idx in indices:
        if idx < 0:
            raise ValueError(f"stream indices must be non-negative, got {idx}")
    entropy = [int(seed), purpose_key(purpose), *[int(i) for i in indices]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
