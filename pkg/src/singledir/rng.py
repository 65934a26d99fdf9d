"""Named random streams derived from a single master seed.

Every consumer of randomness asks for ``stream(seed, "purpose/detail")`` and
gets an independent generator; nothing touches numpy's global state.
"""
import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed) & _MASK64}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))
