"""Named, splittable random streams.

Every stochastic routine in the package takes an explicit ``numpy.random.Generator``.
Streams are derived from a root seed plus a path of names/integers, so
``stream(7, "spectrum", 12)`` always yields the same counter-based (Philox)
generator regardless of what else has been drawn elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Return the generator addressed by ``seed`` and the name path ``names``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *names) -> int:
    """A 63-bit integer seed derived deterministically from a stream address."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)
