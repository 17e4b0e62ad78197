"""Deterministic seed derivation.

Every randomized component takes an explicit 64-bit seed and derives child
seeds from (seed, index...) tuples with a splitmix64 hash, so per-item
streams are independent of iteration order and stable across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(*parts: int) -> int:
    """Hash an integer tuple into a 64-bit child seed."""
    state = 0x243F6A8885A308D3
    for p in parts:
        state = _splitmix64((state ^ (int(p) & _MASK)) & _MASK)
    return state


def generator(*parts: int) -> np.random.Generator:
    """PCG64 generator seeded from a derived child seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
