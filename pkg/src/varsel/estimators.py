"""Sensitivity-index estimation from pick-freeze model evaluations.

The total-effect index of feature i is estimated as

    S_Ti = 1 - [ mean_j( f(A)_j * f(AB_i)_j ) - f0^2 ] / V

where A and B are disjoint halves of the shuffled feature matrix, AB_i is
A with column i taken from B, and f0 and V are the mean and population
variance of the model output over the *full* feature matrix. The
first-order index reuses the same prediction vectors:

    S_i = mean_j( f(B)_j * (f(AB_i)_j - f(A)_j) ) / V

Raw values can land outside [0, 1] from Monte Carlo noise; clamped copies
are kept alongside for presentation, while ranking always uses the raw
values (clamping would create spurious ties at 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import models
from .dataset import Dataset, shuffle_split_halves
from .sampling import PickFreezePair, build_pick_freeze


@dataclass(frozen=True)
class MomentPair:
    """Mean and population variance of model output over the full data."""

    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise ValueError("moments must be finite")
        if self.variance < 0:
            raise ValueError("variance must be non-negative")


@dataclass(frozen=True)
class FeatureSensitivity:
    """Per-feature indices, standard errors, and ranks (1 = most important)."""

    name: str
    first_order_raw: float
    total_effect_raw: float
    first_order: float
    total_effect: float
    se_first_order: float
    se_total_effect: float
    rank_first: int
    rank_total: int


@dataclass(frozen=True)
class SensitivityReport:
    features: tuple
    output_mean: float
    output_variance: float
    n_half: int
    holdout_mae: float
    seed: int
    predictor: dict = field(default_factory=dict)

    def ranks_total(self) -> List[int]:
        return [f.rank_total for f in self.features]

    def ranks_first(self) -> List[int]:
        return [f.rank_first for f in self.features]


def moments(predictions) -> MomentPair:
    """Mean and population variance of a prediction vector.

    V = mean(p^2) - mean(p)^2; negative round-off is snapped to 0.

    Raises:
        ValueError: fewer than 2 values or non-finite entries.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if p.shape[0] < 2:
        raise ValueError("moments need at least 2 predictions")
    if not np.isfinite(p).all():
        raise ValueError("predictions contain non-finite values")
    f0 = float(p.mean())
    v = float(np.mean(p * p) - f0 * f0)
    return MomentPair(mean=f0, variance=max(v, 0.0))


def _check_pair(f_a, other, mom, label):
    f_a = np.asarray(f_a, dtype=np.float64).ravel()
    other = np.asarray(other, dtype=np.float64).ravel()
    if f_a.shape[0] != other.shape[0]:
        raise ValueError(f"f_a and {label} must have equal length")
    if f_a.shape[0] < 2:
        raise ValueError("index estimation needs at least 2 rows per half")
    if mom.variance <= 0.0:
        raise ValueError(
            "model output variance is 0: sensitivity indices are undefined"
        )
    return f_a, other


def total_index(f_a, f_ab_i, mom: MomentPair) -> float:
    """Raw total-effect index from f(A), f(AB_i), and the full-data moments."""
    f_a, f_ab_i = _check_pair(f_a, f_ab_i, mom, "f_ab_i")
    inner = float(np.mean(f_a * f_ab_i))
    return 1.0 - (inner - mom.mean**2) / mom.variance


def first_order_index(f_a, f_b, f_ab_i, mom: MomentPair) -> float:
    """Raw first-order index from f(A), f(B), f(AB_i), and the moments."""
    f_a, f_ab_i = _check_pair(f_a, f_ab_i, mom, "f_ab_i")
    f_b = np.asarray(f_b, dtype=np.float64).ravel()
    if f_b.shape[0] != f_a.shape[0]:
        raise ValueError("f_a and f_b must have equal length")
    return float(np.mean(f_b * (f_ab_i - f_a))) / mom.variance


def _se_of_terms(terms, variance) -> float:
    n = terms.shape[0]
    if n < 2:
        return float("nan")
    return float(terms.std(ddof=1) / math.sqrt(n) / variance)


def rank(values) -> np.ndarray:
    """Ranks with 1 for the largest value; ties break to the lower index."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if not np.isfinite(v).all():
        raise ValueError("rank requires finite values")
    order = np.argsort(-v, kind="stable")
    out = np.empty(v.shape[0], dtype=np.int64)
    out[order] = np.arange(1, v.shape[0] + 1)
    return out


def _clamp(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def evaluate_with_predictor(
    predictor,
    d: Dataset,
    seed: int,
    spec_echo: Optional[dict] = None,
) -> SensitivityReport:
    """Run the sensitivity pipeline with an already-built predictor.

    Steps: evaluate the predictor on the full feature matrix for f0 and V,
    shuffle and split the rows into halves A and B, and for each feature
    evaluate the pick-freeze hybrid to form both indices. Deterministic
    given the seed (and the predictor's own internal stream, if any).
    """
    if d.n_rows < 4:
        raise ValueError("sensitivity evaluation needs at least 4 rows")
    feats = d.features
    full = predictor.predict(feats)
    mom = moments(full)
    if mom.variance <= 0.0:
        raise ValueError(
            "model output variance is 0: sensitivity indices are undefined"
        )

    split = shuffle_split_halves(d, seed)
    pair = PickFreezePair(split)
    pair.f_a = predictor.predict(split.a)
    pair.f_b = predictor.predict(split.b)
    n_half = split.n_half

    k = d.n_features
    first_raw = np.empty(k)
    total_raw = np.empty(k)
    se_first = np.empty(k)
    se_total = np.empty(k)
    for i in range(k):
        f_ab = predictor.predict(build_pick_freeze(split, i))
        t_terms = pair.f_a * f_ab
        u_terms = pair.f_b * (f_ab - pair.f_a)
        total_raw[i] = 1.0 - (float(t_terms.mean()) - mom.mean**2) / mom.variance
        first_raw[i] = float(u_terms.mean()) / mom.variance
        se_total[i] = _se_of_terms(t_terms, mom.variance)
        se_first[i] = _se_of_terms(u_terms, mom.variance)

    rank_first = rank(first_raw)
    rank_total = rank(total_raw)
    records = tuple(
        FeatureSensitivity(
            name=d.feature_names[i],
            first_order_raw=float(first_raw[i]),
            total_effect_raw=float(total_raw[i]),
            first_order=_clamp(float(first_raw[i])),
            total_effect=_clamp(float(total_raw[i])),
            se_first_order=float(se_first[i]),
            se_total_effect=float(se_total[i]),
            rank_first=int(rank_first[i]),
            rank_total=int(rank_total[i]),
        )
        for i in range(k)
    )
    return SensitivityReport(
        features=records,
        output_mean=mom.mean,
        output_variance=mom.variance,
        n_half=n_half,
        holdout_mae=float(getattr(predictor, "holdout_mae", float("nan"))),
        seed=int(seed),
        predictor=dict(spec_echo or getattr(predictor, "spec_echo", {})),
    )


def evaluate_features(
    spec: models.PredictorSpec, d: Dataset, seed: int
) -> SensitivityReport:
    """Fit the requested surrogate on the dataset, then rank its features.

    The model is trained on the full dataset (including target), the
    target is discarded, and both sensitivity indices are estimated for
    every feature. Deterministic given ``seed`` and ``spec.seed``.
    """
    fitted = models.fit(spec, d)
    return evaluate_with_predictor(fitted, d.without_target(), seed)
