"""Tabular dataset container, CSV ingestion, scaling, and half splitting.

The sensitivity pipeline consumes a plain real-valued feature matrix. This
module owns loading that matrix from CSV, optional min-max scaling for
distance-based models, and the seeded shuffle-and-split-in-halves step that
produces the paired sampling matrices.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .rng import derive_rng

_SPLIT_STREAM = "half-split"


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """An n x k feature matrix with column names and an optional target.

    Rows are observations, columns are features. All values must be finite.
    Instances are immutable and safe to share across concurrent workers.
    """

    features: np.ndarray
    feature_names: tuple
    target: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = _readonly(np.atleast_2d(self.features))
        object.__setattr__(self, "features", feats)
        names = tuple(str(n) for n in self.feature_names)
        object.__setattr__(self, "feature_names", names)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n, k = feats.shape
        if n < 2:
            raise ValueError(f"need at least 2 rows, got {n}")
        if k < 1:
            raise ValueError("need at least 1 feature column")
        if len(names) != k:
            raise ValueError(f"{k} columns but {len(names)} feature names")
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if any(not n for n in names):
            raise ValueError("feature names must be non-empty")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite values")
        if self.target is not None:
            tgt = _readonly(np.asarray(self.target).ravel())
            object.__setattr__(self, "target", tgt)
            if tgt.shape[0] != n:
                raise ValueError(
                    f"target length {tgt.shape[0]} does not match {n} rows"
                )
            if not np.isfinite(tgt).all():
                raise ValueError("target contains non-finite values")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def without_target(self) -> "Dataset":
        if self.target is None:
            return self
        return Dataset(self.features, self.feature_names, None)


@dataclass(frozen=True)
class ScalingSpec:
    """Per-column (min, max) pairs of a fitted min-max scaling."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mins", _readonly(np.asarray(self.mins).ravel()))
        object.__setattr__(self, "maxs", _readonly(np.asarray(self.maxs).ravel()))
        if self.mins.shape != self.maxs.shape:
            raise ValueError("mins and maxs must have the same length")
        if np.any(self.maxs < self.mins):
            raise ValueError("per-column max must be >= min")

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "ScalingSpec":
        m = np.asarray(m, dtype=np.float64)
        return cls(m.min(axis=0), m.max(axis=0))

    def transform(self, m: np.ndarray) -> np.ndarray:
        """Map columns affinely onto [0, 1]; constant columns map to 0."""
        m = np.asarray(m, dtype=np.float64)
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = (m - self.mins) / safe
        return np.where(span > 0, out, 0.0)

    def inverse(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=np.float64)
        return m * (self.maxs - self.mins) + self.mins


@dataclass(frozen=True)
class HalfSplit:
    """Disjoint halves A and B of a shuffled feature matrix.

    Both halves have floor(n/2) rows drawn without replacement from the
    source matrix (one source row is unused when n is odd). ``permutation``
    is the row shuffle that produced them.
    """

    a: np.ndarray
    b: np.ndarray
    permutation: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "a", _readonly(self.a))
        object.__setattr__(self, "b", _readonly(self.b))
        perm = np.array(self.permutation, dtype=np.int64, copy=True)
        perm.setflags(write=False)
        object.__setattr__(self, "permutation", perm)
        if self.a.shape != self.b.shape:
            raise ValueError("halves must have identical shapes")

    @property
    def n_half(self) -> int:
        return self.a.shape[0]

    @property
    def n_features(self) -> int:
        return self.a.shape[1]


def load_csv(path, target_column: Union[str, int, None] = None) -> Dataset:
    """Load a numeric CSV with a mandatory header row.

    Args:
        path: CSV file path (UTF-8, comma separated, '.' decimal point).
        target_column: header name or 0-based column index to move into the
            target vector; None keeps every column as a feature.

    Raises:
        FileNotFoundError: missing file.
        ValueError: duplicate header names, a non-numeric cell (reported
            with its 1-based data row and column), or an unknown target.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise ValueError(f"{path}: duplicate header names {dupes}")
        rows = []
        for r, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise ValueError(
                    f"{path}: row {r} has {len(record)} cells, expected {len(header)}"
                )
            values = []
            for c, cell in enumerate(record, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric cell {cell!r} at row {r}, column {c}"
                    ) from None
            rows.append(values)
    matrix = np.asarray(rows, dtype=np.float64)

    if target_column is None:
        return Dataset(matrix, tuple(header))

    if isinstance(target_column, str):
        if target_column not in header:
            raise ValueError(f"{path}: target column {target_column!r} not found")
        t_idx = header.index(target_column)
    else:
        t_idx = int(target_column)
        if not 0 <= t_idx < len(header):
            raise ValueError(f"{path}: target column index {t_idx} out of range")
    keep = [i for i in range(len(header)) if i != t_idx]
    names = tuple(header[i] for i in keep)
    return Dataset(matrix[:, keep], names, matrix[:, t_idx])


def write_csv(d: Dataset, path, target_name: str = "y") -> None:
    """Write a dataset as CSV with shortest round-trip float formatting.

    Reloading the file reproduces the matrices exactly. The write is
    atomic: a temp file is renamed over ``path`` only on success.
    """
    header = list(d.feature_names)
    if d.target is not None:
        header.append(target_name)
    lines = [",".join(header)]
    tgt = d.target
    for i in range(d.n_rows):
        cells = [repr(float(v)) for v in d.features[i]]
        if tgt is not None:
            cells.append(repr(float(tgt[i])))
        lines.append(",".join(cells))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def min_max_scale(d: Dataset):
    """Scale every feature column onto [0, 1].

    Constant columns map to 0 everywhere. The target is untouched.

    Returns:
        (scaled dataset, ScalingSpec) so the mapping can be inverted or
        applied to new rows.
    """
    spec = ScalingSpec.from_matrix(d.features)
    scaled = spec.transform(d.features)
    return Dataset(scaled, d.feature_names, d.target), spec


def shuffle_split_halves(d: Dataset, seed: int) -> HalfSplit:
    """Shuffle the rows of the feature matrix and split into two halves.

    The target is excluded. Deterministic given the seed; with an odd row
    count the last shuffled row is dropped.

    Raises:
        ValueError: fewer than 4 rows (each half needs at least 2).
    """
    n = d.n_rows
    if n < 4:
        raise ValueError(f"need at least 4 rows to split in halves, got {n}")
    rng = derive_rng(seed, _SPLIT_STREAM)
    perm = rng.permutation(n)
    half = n // 2
    a = d.features[perm[:half]]
    b = d.features[perm[half : 2 * half]]
    return HalfSplit(a, b, perm)
