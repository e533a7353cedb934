"""Deterministic random number plumbing.

Every stochastic step in the package draws from a PCG64 generator built
from a ``numpy.random.SeedSequence`` over the user seed plus a stream tag,
so independent steps (row shuffles, bootstrap draws, noise streams, oracle
loops) get decorrelated streams that are reproducible bit for bit.

Standard-normal draws are produced by applying the inverse normal CDF to
uniforms taken from the open interval (0, 1), rather than relying on a
generator-internal normal method.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")


def derive_rng(seed, *tags) -> np.random.Generator:
    """Return a PCG64 generator for stream (seed, *tags).

    Distinct tag tuples yield statistically independent streams; the same
    tuple always yields the same stream.
    """
    entropy = [int(seed) & _MASK64] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Standard-normal draws via inverse CDF of open-interval uniforms."""
    # (j + 0.5) / 2^53 lies strictly inside (0, 1), so ndtri stays finite.
    u = (rng.integers(0, 1 << 53, size=size, dtype=np.int64) + 0.5) * 2.0**-53
    return ndtri(u)
