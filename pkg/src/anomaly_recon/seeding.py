"""Deterministic seed derivation.

Every stochastic component in the pipeline draws from a seed derived with
``fold_seed`` from the experiment seed plus a structural tag (stage name,
epoch, step, volume index, ...).  This keeps parallel workers independent
and makes resume-from-checkpoint bit-exact: no RNG state ever needs to be
serialized, only the position in the schedule.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def fold_seed(seed: int, *tags) -> int:
    """Derive a 64-bit child seed from a parent seed and hashable tags."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK64


def rng_for(seed: int, *tags) -> np.random.Generator:
    """NumPy generator seeded from ``fold_seed(seed, *tags)``."""
    return np.random.default_rng(fold_seed(seed, *tags))
