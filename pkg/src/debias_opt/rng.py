"""Seed derivation.

Every random stream in the package is derived from one 64-bit root seed.
A component name is folded into the root with FNV-1a, mixed through
splitmix64, and the result seeds a numpy ``PCG64`` generator::

    child = splitmix64(root ^ fnv1a64(name_1))
    child = splitmix64(child ^ fnv1a64(name_2))   # for nested names
    rng   = numpy.random.Generator(PCG64(child))

Two components asking for different names never share a stream, and adding
a new component never perturbs the draws of an existing one.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, *names: str | int) -> int:
    h = splitmix64(int(seed) & MASK64)
    for name in names:
        h = splitmix64(h ^ fnv1a64(str(name)))
    return h


def make_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Return an independent generator for the component ``names``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *names)))
