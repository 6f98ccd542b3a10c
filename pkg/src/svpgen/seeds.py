"""Deterministic seed fan-out.

Every run owns a single root seed. Sub-seeds for stages, classes, or
per-image noise streams are derived by mixing the root seed with string or
integer tags through ``numpy.random.SeedSequence``. String tags are hashed
with CRC-32 so derivation is stable across processes and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_words(tags: tuple) -> list[int]:
    words = []
    for tag in tags:
        if isinstance(tag, str):
            words.append(zlib.crc32(tag.encode("utf-8")))
        elif isinstance(tag, (int, np.integer)):
            words.append(int(tag) & 0xFFFFFFFF)
        else:
            raise TypeError(f"seed tag must be str or int, got {type(tag).__name__}")
    return words


def derive_seed(root: int, *tags) -> int:
    """Derive a 32-bit sub-seed from a root seed and a tag path."""
    seq = np.random.SeedSequence([int(root)] + _tag_words(tags))
    return int(seq.generate_state(1, np.uint32)[0])


def rng_for(root: int, *tags) -> np.random.Generator:
    """A PCG64 generator deterministically bound to (root, *tags)."""
    return np.random.default_rng(np.random.SeedSequence([int(root)] + _tag_words(tags)))
