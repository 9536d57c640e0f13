"""Named random sub-streams derived from one master seed."""

import zlib

import numpy as np


def stream(seed: int, name: str, *ids: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *ids)``; stable across runs and platforms."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, ids)])
