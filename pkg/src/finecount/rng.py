"""Seed derivation helpers.

Every stochastic step in the pipeline pulls from a generator derived from
(master seed, string tag), so reruns with the same config reproduce the same
artifacts bit for bit. Tags are hashed with sha256 rather than `hash()`, which
is salted per process.
"""

import hashlib

import numpy as np


def stable_hash(tag: str) -> int:
    """64-bit platform-independent hash of a string."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(seed: int, *tags: str) -> np.random.Generator:
    """Generator seeded by a master seed plus any number of string tags."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [stable_hash(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(seed: int, *tags: str) -> int:
    """Derived integer seed, for APIs that take a seed rather than a Generator."""
    ss = np.random.SeedSequence(
        [int(seed) & 0xFFFFFFFFFFFFFFFF] + [stable_hash(t) for t in tags]
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0])
