"""Deterministic seed derivation.

Every run consumes a single user-supplied base seed; stages, repetitions
and per-slide draws derive their own streams from it by label so that
adding a stage never disturbs the randomness of another.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(base_seed: int, *labels) -> int:
    """Derive a 64-bit seed from ``base_seed`` and a label path.

    Labels may be strings or integers; the derivation is stable across
    platforms and Python versions.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base_seed) & _MASK64).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(base_seed: int, *labels) -> np.random.Generator:
    """Generator seeded by the labeled derivation of ``base_seed``."""
    return np.random.default_rng(derive_seed(base_seed, *labels))
