"""Pick-freeze hybrid matrices.

For feature i the hybrid matrix equals half A with column i taken from
half B. Evaluating a model on A, B, and the k hybrids is all the sampling
the sensitivity estimators need.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import HalfSplit


@dataclass
class PickFreezePair:
    """A half split plus lazily cached model outputs on its halves."""

    split: HalfSplit
    f_a: Optional[np.ndarray] = None
    f_b: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("f_a", "f_b"):
            vec = getattr(self, name)
            if vec is None:
                continue
            vec = np.asarray(vec, dtype=np.float64).ravel()
            if vec.shape[0] != self.split.n_half:
                raise ValueError(
                    f"{name} has length {vec.shape[0]}, expected {self.split.n_half}"
                )
            setattr(self, name, vec)


def build_pick_freeze(split: HalfSplit, i: int) -> np.ndarray:
    """Return a copy of half A with column i replaced by column i of B.

    The inputs are not modified and the swapped column is a fresh copy, so
    callers may hand the result to models that reorder rows internally.

    Raises:
        IndexError: i outside 0..k-1.
    """
    k = split.n_features
    if not 0 <= i < k:
        raise IndexError(f"feature index {i} out of range for {k} columns")
    hybrid = np.array(split.a, dtype=np.float64, copy=True)
    hybrid[:, i] = split.b[:, i]
    return hybrid
