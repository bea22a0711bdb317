"""Named random streams derived from a single master seed.

Every consumer (the environment or any agent or rollout batch) gets its own
stream keyed by a stable name, so adding randomness in one place never
shifts the draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def seed_sequence(seed: int, *names: str | int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the sub-stream ``names`` of master ``seed``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))


def child_seed(seed: int, *names: str | int) -> int:
    """A 63-bit integer seed for the named sub-stream (for nested runs)."""
    return int(seed_sequence(seed, *names).generate_state(2, np.uint64)[0] >> np.uint64(1))


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a (n, k) probability matrix."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] >= cdf[:, :-1]).sum(axis=1) if probs.shape[1] > 1 else np.zeros(len(u), int)
    return idx.astype(np.int64)
