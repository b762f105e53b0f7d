"""Seed derivation.

All randomness flows through ``numpy.random.Generator`` backed by PCG64. Child
seeds are derived with numpy's ``SeedSequence`` hash (a documented mixing of the
entropy words), so a sample's stream depends only on its identifying integers
and never on generation order or worker count.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def mix_seed(*words: int) -> int:
    """Hash non-negative integers into one 64-bit seed."""
    ss = np.random.SeedSequence([int(w) & MASK64 for w in words])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))
