"""Named random streams derived from one root seed.

Every consumer asks for its own stream by name plus integer keys (client id,
round, epoch...). Streams never share state, so the order in which clients are
executed (serial or threaded) cannot change any drawn number.
"""

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, name, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFF, _name_key(name)] + [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
