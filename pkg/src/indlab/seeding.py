"""Root-seed splitting.

Every random stream in the package is derived from one root seed by hashing
the seed together with a tuple of integer keys through splitmix64. The same
(root, keys) always gives the same child seed, independent of call order, so
parallel cells (per batch, per seed, per N) never share or reorder state.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(root: int, *keys: int) -> int:
    """Child seed for the stream addressed by ``keys`` under ``root``."""
    state = splitmix64(int(root) & _MASK)
    for key in keys:
        state = splitmix64(state ^ (int(key) & _MASK))
    return state


def rng(root: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, *keys)))
