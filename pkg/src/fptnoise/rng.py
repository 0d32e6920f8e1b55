"""Deterministic seed derivation.

All randomness in the package flows from one base seed. Sub-seeds are derived
with SplitMix64 over (base, purpose-tag, index) and fed into numpy's PCG64
stream. The derivation is pure integer arithmetic, so any implementation of
SplitMix64 reproduces the same streams.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF


def splitmix64(state: int) -> int:
    """One SplitMix64 output for the given 64-bit state."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(base: int, tag: str, index: int = 0) -> int:
    """Derive a 64-bit sub-seed from (base, tag, index).

    The tag bytes are folded in one at a time so distinct purposes get
    unrelated streams even when their indices collide.
    """
    h = base & _MASK
    for b in tag.encode("utf-8"):
        h = splitmix64(h ^ b)
    return splitmix64(h ^ (index & _MASK))


def make_generator(seed: int) -> np.random.Generator:
    """PCG64 generator for a derived seed (the package's sampling stream)."""
    return np.random.Generator(np.random.PCG64(seed))


def generator_for(base: int, tag: str, index: int = 0) -> np.random.Generator:
    """Convenience: generator seeded by derive_seed(base, tag, index)."""
    return make_generator(derive_seed(base, tag, index))
