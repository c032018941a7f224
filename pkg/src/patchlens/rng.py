"""Deterministic, splittable random streams.

Every consumer of randomness (init, dropout, shuffling, synthetic data)
derives its own counter-based Philox generator from ``(seed, *tags)``, so
streams never interleave and any component replays identically in
isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *tags: object) -> np.random.Generator:
    """Return a Philox generator keyed by the seed and a tag path."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    key = np.frombuffer(h.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
