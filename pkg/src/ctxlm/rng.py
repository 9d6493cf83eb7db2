"""Named random substreams.

Every random draw in the package comes from a generator derived from one
integer seed plus a path of names, so adding a new consumer never shifts
the stream of an existing one.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed, *names):
    """Return a ``numpy.random.Generator`` for ``seed`` and a name path."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
