"""Deterministic RNG derivation keyed by (seed, purpose, ...) tuples."""
from __future__ import annotations

import hashlib

import numpy as np


def _part_to_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def seed_sequence(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([_part_to_int(p) for p in parts])


def rng_from(*parts) -> np.random.Generator:
    """Generator derived purely from the given parts; stable across processes."""
    return np.random.Generator(np.random.PCG64(seed_sequence(*parts)))


def derive_seed(*parts) -> int:
    """Stable 63-bit integer seed derived from the given parts."""
    joined = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(joined.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1
