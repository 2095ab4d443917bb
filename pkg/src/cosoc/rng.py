"""Deterministic RNG stream derivation.

Every stochastic operation in the package draws from a stream derived from a
64-bit master seed plus the entity it belongs to (image id, task index, ...),
so adding entities never perturbs the streams of existing ones and any subset
of the work can be reproduced independently.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _part_to_int(part: int | str) -> int:
    if isinstance(part, bool):  # bool is an int subclass; reject to avoid surprises
        raise TypeError("seed parts must be int or str, not bool")
    if isinstance(part, int):
        return part & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(*parts: int | str) -> np.random.SeedSequence:
    """Stable SeedSequence for a (seed, *labels) tuple; strings are hashed."""
    return np.random.SeedSequence([_part_to_int(p) for p in parts])


def derive_rng(*parts: int | str) -> np.random.Generator:
    """Independent Generator for a (seed, *labels) tuple."""
    return np.random.default_rng(seed_sequence(*parts))
