"""Seeded, purpose-tagged random streams.

Every consumer of randomness derives its own counter-based stream from
(global seed, purpose tag, index). Streams are independent, so adding or
reordering one consumer (e.g. toggling the guided phase) never shifts the
randomness seen by another.
"""

import zlib

import numpy as np


def derive_rng(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Return an independent Philox stream for (seed, tag, index)."""
    key = zlib.crc32(tag.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed), key, int(index)])
    return np.random.Generator(np.random.Philox(ss))
