"""Named random sub-streams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *names)``; stable across runs."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
