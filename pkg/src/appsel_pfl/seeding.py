"""Named, reproducible RNG streams derived from a master seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(master_seed: int, *keys) -> np.random.Generator:
    """Generator for the stream ``(master_seed, *keys)``; keys may be ints or strings."""
    entropy = [_key(master_seed)] + [_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
