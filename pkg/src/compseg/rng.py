"""Named random-stream derivation from a single integer seed."""

import hashlib

import numpy as np


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for the stream ``(seed, *names)``."""
    h = hashlib.blake2b(repr((int(seed), *map(str, names))).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
