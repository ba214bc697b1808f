"""Seeding conventions.

All randomness comes from numpy's PCG64 bit generator.  A root seed is turned
into a ``SeedSequence``; child streams are addressed by integer keys through
``SeedSequence(root, spawn_key=keys)``, so stream ``(cell, replicate)`` is the
same no matter how many workers run or in which order.
"""
from __future__ import annotations

import numpy as np

SeedLike = "int | np.random.SeedSequence | np.random.Generator | None"


def make_rng(seed=None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def child_seed(root: int, *keys: int) -> np.random.SeedSequence:
    """Deterministic child seed addressed by ``keys`` below ``root``."""
    return np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys))


def child_rng(root: int, *keys: int) -> np.random.Generator:
    return make_rng(child_seed(root, *keys))
