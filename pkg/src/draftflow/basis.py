"""Frozen random basis vectors.

Every symbolic object (prompt constraint, correction op, null slot) is
embedded through a fixed random vector derived from a stable hash of its
canonical text tag.  Vectors are frozen at first use, identical across
processes and platforms, and never trained.
"""

from __future__ import annotations

import hashlib
import math
from functools import lru_cache

import numpy as np

BASIS_SEED = 7


@lru_cache(maxsize=None)
def hashed_vector(tag: str, dim: int, seed_base: int = BASIS_SEED) -> np.ndarray:
    """Deterministic unit-scale vector for ``tag`` (read-only array)."""
    digest = hashlib.sha256(f"{seed_base}|{tag}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim) / math.sqrt(dim)
    vec.flags.writeable = False
    return vec


def sum_vectors(tags, dim: int, seed_base: int = BASIS_SEED) -> np.ndarray:
    """Order-invariant sum of hashed vectors; zero vector for no tags."""
    out = np.zeros(dim)
    for tag in tags:
        out += hashed_vector(tag, dim, seed_base)
    return out
