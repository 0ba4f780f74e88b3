"""
Seed derivation.

Every random stream in fedcert is keyed by a tuple of integers
(master seed, stream tag, row, round, client ...) so results never depend on
the order in which work is scheduled.
"""

from typing import Union

import numpy as np

# Stream tags keep independent uses of the same master seed apart.
STREAM_SUBSAMPLE = 1
STREAM_ROW_TRAIN = 2
STREAM_ROW_INIT = 3
STREAM_TIE_BREAK = 4
STREAM_ATTACK = 5
STREAM_BASELINE = 6


def derive_seed(*parts: Union[int, np.integer]) -> int:
    """Derive a 64-bit seed from a tuple of non-negative integers."""
    entropy = [int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)
    return int(state[0])


def make_rng(*parts: Union[int, np.integer]) -> np.random.Generator:
    """Return a Generator seeded by derive_seed(*parts)."""
    return np.random.default_rng(derive_seed(*parts))
