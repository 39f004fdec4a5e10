"""Named, reproducible RNG streams.

Every stochastic component draws from its own stream, derived from a single
64-bit base seed plus a name path (strings and ints). Streams are stable
across processes and numpy versions that keep PCG64, so any stage of the
pipeline can be re-run in isolation and reproduce its draws exactly.
"""

import hashlib

import numpy as np


def _to_entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream key parts must be str or int, got {type(part).__name__}")


def seed_sequence(base_seed: int, *key) -> np.random.SeedSequence:
    """SeedSequence for the stream named by ``key`` under ``base_seed``."""
    entropy = [_to_entropy(base_seed)] + [_to_entropy(k) for k in key]
    return np.random.SeedSequence(entropy)


def stream(base_seed: int, *key) -> np.random.Generator:
    """Generator for the stream named by ``key``, e.g. stream(7, "dataset-train")."""
    return np.random.Generator(np.random.PCG64(seed_sequence(base_seed, *key)))
