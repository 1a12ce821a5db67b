"""Counter-based random substreams.

A stream is identified by ``(seed, tag, index)``; streams never depend on
the order in which other streams were consumed, so results do not depend on
thread scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def substream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=(_tag_code(tag), int(index)))
    return np.random.Generator(np.random.Philox(seq))


def child(rng: np.random.Generator, tag: str) -> np.random.Generator:
    """Derive a named child stream from an existing generator.

    Consumes exactly one 64-bit draw from ``rng``.
    """
    seed = int(rng.integers(0, 2**63 - 1))
    return substream(seed, tag)
