"""Named, splittable random streams.

Every stream is a Philox (counter-based) generator keyed by a root seed and
a path of names or integers, e.g. ``stream(seed, "rep", 3, "signal-W")``.
Streams with different paths are statistically independent, and the same
path always reproduces the same numbers, regardless of call order or of
which worker process draws them.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream indices must be nonnegative")
        return int(part)
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    # names and small integers live in disjoint key ranges
    return int.from_bytes(digest, "little") | (1 << 32)


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for the named sub-stream of ``seed``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *path)))


def derive_seed(seed: int, *path) -> int:
    """Deterministic 63-bit child seed, for APIs that take a plain integer."""
    return int(seed_sequence(seed, *path).generate_state(2, np.uint64)[0] >> np.uint64(1))
