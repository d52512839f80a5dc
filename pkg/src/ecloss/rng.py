"""Named random streams derived from one root seed."""
import zlib

import numpy as np


def stream(seed, *names):
    """Generator keyed by ``seed`` and a path of names or integers.

    ``stream(1, "shuffle", 3)`` is independent of ``stream(1, "init")`` and
    reproducible in isolation.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            key.append(zlib.crc32(name.encode()))
        else:
            key.append(int(name) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))
