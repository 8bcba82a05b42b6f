"""Seed handling: a splitmix64 mixer for deriving independent child seeds.

Every stochastic routine in the package takes an explicit 64-bit seed and
builds its own ``numpy`` generator from it. Child streams (replicates,
data splits, samplers) are derived with :func:`child_seed` so that runs
are reproducible and streams never collide by accident.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
# splitmix64 constants (Steele, Lea & Flood 2014)
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(value: int) -> int:
    """One splitmix64 finalization round of ``value`` (mod 2**64)."""
    z = (value + _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def child_seed(base_seed: int, index: int) -> int:
    """Derive the ``index``-th child seed of ``base_seed``.

    Defined as ``splitmix64(splitmix64(base_seed) ^ (index + 1) * GAMMA)``;
    distinct indices give pairwise-distinct streams for any fixed base.
    """
    if index < 0:
        raise ValueError(f"child index must be >= 0, got {index}")
    mixed = splitmix64(base_seed & _MASK64) ^ (((index + 1) * _GAMMA) & _MASK64)
    return splitmix64(mixed)


def generator(seed: int) -> np.random.Generator:
    """PCG64 generator seeded with a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed & _MASK64))
