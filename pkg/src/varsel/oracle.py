"""Closed-form benchmark functions, data generators, and brute-force oracles.

The double-loop oracle estimates Var(E[Y|X_S]) directly: an outer loop
draws the subset coordinates, an inner loop averages the function over
fresh draws of the complementary coordinates, and the variance of the
inner means is returned. It is slow but independent of the pick-freeze
estimator, which makes it the validation ground truth.

Output noise is handled by averaging it away in the inner loop: noise is
independent of every feature, so it inflates V(Y) by sigma^2 but
contributes nothing to any conditional-expectation variance. V(Y) used
for normalization keeps the sigma^2 term, matching what the fast
estimator sees on noisy evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Tuple

import numpy as np

from .dataset import Dataset
from .models import FittedPredictor
from .rng import derive_rng, standard_normal

FUNCTION_KINDS = (
    "friedman1",
    "friedman2",
    "additive_linear",
    "product_interaction",
    "constant",
)
DISTRIBUTIONS = ("uniform01", "normal", "paper_ranges")

# Ranges of the four relevant friedman2 columns; remaining columns are U[0,1].
FRIEDMAN2_RANGES = (
    (0.0, 100.0),
    (40.0 * math.pi, 560.0 * math.pi),
    (0.0, 1.0),
    (1.0, 11.0),
)

_CHUNK_ROWS = 1 << 19


@dataclass(frozen=True)
class AnalyticFunction:
    """A closed-form regression target with optional additive noise.

    ``sigma`` scales standard-normal noise added per evaluation when a
    noise draw is supplied (data generation and the noisy analytic
    predictor); the core shape itself is deterministic.
    """

    kind: str
    sigma: float = 0.0
    coefficients: Optional[tuple] = None
    constant_value: float = 0.0

    def __post_init__(self):
        if self.kind not in FUNCTION_KINDS:
            raise ValueError(f"unknown function kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "additive_linear":
            if not self.coefficients:
                raise ValueError("additive_linear requires coefficients")
            object.__setattr__(
                self, "coefficients", tuple(float(c) for c in self.coefficients)
            )

    @property
    def relevant_count(self) -> int:
        if self.kind == "friedman1":
            return 5
        if self.kind == "friedman2":
            return 4
        if self.kind == "additive_linear":
            return len(self.coefficients)
        if self.kind == "product_interaction":
            return 2
        return 0

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        """Noise-free evaluation on the rows of an n x k matrix (k >= relevant)."""
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("expected a 2-D matrix")
        if m.shape[1] < self.relevant_count:
            raise ValueError(
                f"{self.kind} needs at least {self.relevant_count} columns, "
                f"got {m.shape[1]}"
            )
        if self.kind == "friedman1":
            return (
                10.0 * np.sin(np.pi * m[:, 0] * m[:, 1])
                + 20.0 * (m[:, 2] - 0.5) ** 2
                + 10.0 * m[:, 3]
                + 5.0 * m[:, 4]
            )
        if self.kind == "friedman2":
            denom = m[:, 1] * m[:, 3]
            if np.any(denom == 0.0):
                raise ValueError(
                    "friedman2 undefined where column 1 * column 3 == 0"
                )
            return np.sqrt(m[:, 0] ** 2 + (m[:, 1] * m[:, 2] - 1.0 / denom) ** 2)
        if self.kind == "additive_linear":
            q = len(self.coefficients)
            return m[:, :q] @ np.asarray(self.coefficients)
        if self.kind == "product_interaction":
            return (m[:, 0] - 0.5) * (m[:, 1] - 0.5)
        return np.full(m.shape[0], self.constant_value)


def evaluate_row(func: AnalyticFunction, row, noise_draw: float = 0.0) -> float:
    """Evaluate one row, adding sigma * noise_draw."""
    value = func.evaluate(np.atleast_2d(np.asarray(row, dtype=np.float64)))[0]
    return float(value + func.sigma * noise_draw)


@dataclass(frozen=True)
class BenchmarkSpec:
    """Synthetic-experiment description: function, sizes, feature law, seed."""

    function: AnalyticFunction
    n: int
    k_total: int = 20
    feature_distribution: str = "uniform01"
    seed: int = 0

    def __post_init__(self):
        if self.feature_distribution not in DISTRIBUTIONS:
            raise ValueError(
                f"unknown feature distribution {self.feature_distribution!r}"
            )
        if self.k_total < self.function.relevant_count:
            raise ValueError(
                f"k_total={self.k_total} below the {self.function.relevant_count} "
                "relevant features"
            )
        if self.n < 4:
            raise ValueError("benchmark needs n >= 4")


def _column_bounds(spec: BenchmarkSpec, col: int) -> Tuple[float, float]:
    if spec.feature_distribution == "paper_ranges" and col < len(FRIEDMAN2_RANGES):
        return FRIEDMAN2_RANGES[col]
    return (0.0, 1.0)


def _draw_columns(spec: BenchmarkSpec, cols, n, rng) -> np.ndarray:
    """Draw n samples of the requested columns under the spec's feature law."""
    out = np.empty((n, len(cols)))
    if spec.feature_distribution == "normal":
        # Mean 0.5, sd 0.25, deliberately unclipped.
        out[:] = 0.5 + 0.25 * standard_normal(rng, (n, len(cols)))
        return out
    for j, col in enumerate(cols):
        lo, hi = _column_bounds(spec, col)
        out[:, j] = lo + (hi - lo) * rng.random(n)
    return out


def generate_dataset(spec: BenchmarkSpec) -> Dataset:
    """Generate a synthetic dataset with target y = f(x) + sigma * N(0,1).

    Feature names are x0..x{k-1}; draws are deterministic given the seed
    (features first, then the noise vector).
    """
    rng = derive_rng(spec.seed, "benchmark-data")
    x = _draw_columns(spec, range(spec.k_total), spec.n, rng)
    y = spec.function.evaluate(x)
    if spec.function.sigma > 0:
        y = y + spec.function.sigma * standard_normal(rng, spec.n)
    names = tuple(f"x{i}" for i in range(spec.k_total))
    return Dataset(x, names, y)


# ---------------------------------------------------------------------------
# Brute-force variance decomposition


def double_loop_variance_stats(
    func: AnalyticFunction,
    subset,
    spec: BenchmarkSpec,
    n_outer: int,
    n_inner: int,
) -> Tuple[float, float]:
    """Var(E[Y|X_subset]) by nested Monte Carlo, with its standard error.

    The outer loop fixes the subset coordinates, the inner loop averages
    the function (noise included) over the complement. The SE is the
    sampling error of the variance across outer draws.
    """
    subset = sorted(set(int(i) for i in subset))
    if not subset:
        raise ValueError("subset must be non-empty")
    if subset[0] < 0 or subset[-1] >= spec.k_total:
        raise ValueError(f"subset {subset} out of range for k={spec.k_total}")
    comp = [i for i in range(spec.k_total) if i not in subset]
    rng = derive_rng(spec.seed, "double-loop", len(subset), *subset)

    outer = _draw_columns(spec, subset, n_outer, rng)
    cols = np.empty((1, spec.k_total))  # template row ordering
    means = np.empty(n_outer)
    chunk = max(1, _CHUNK_ROWS // max(1, n_inner))
    for lo in range(0, n_outer, chunk):
        hi = min(lo + chunk, n_outer)
        block = hi - lo
        rows = np.empty((block * n_inner, spec.k_total))
        rows[:, subset] = np.repeat(outer[lo:hi], n_inner, axis=0)
        if comp:
            rows[:, comp] = _draw_columns(spec, comp, block * n_inner, rng)
        vals = func.evaluate(rows)
        if func.sigma > 0:
            vals = vals + func.sigma * standard_normal(rng, vals.shape[0])
        means[lo:hi] = vals.reshape(block, n_inner).mean(axis=1)
    del cols

    center = means.mean()
    dev2 = (means - center) ** 2
    variance = float(dev2.mean())
    # SE of a sample variance: sqrt((m4 - v^2) / n).
    m4 = float(np.mean(dev2**2))
    se = math.sqrt(max(m4 - variance**2, 0.0) / n_outer)
    return variance, se


def double_loop_variance(
    func: AnalyticFunction,
    subset,
    spec: BenchmarkSpec,
    n_outer: int,
    n_inner: int,
) -> float:
    """Var(E[Y|X_subset]) by nested Monte Carlo (value only)."""
    return double_loop_variance_stats(func, subset, spec, n_outer, n_inner)[0]


def total_variance_stats(
    func: AnalyticFunction, spec: BenchmarkSpec, n_samples: int
) -> Tuple[float, float]:
    """Plain Monte Carlo V(Y) including the noise term, with standard error."""
    rng = derive_rng(spec.seed, "total-variance")
    acc = []
    for lo in range(0, n_samples, _CHUNK_ROWS):
        block = min(_CHUNK_ROWS, n_samples - lo)
        rows = _draw_columns(spec, range(spec.k_total), block, rng)
        vals = func.evaluate(rows)
        if func.sigma > 0:
            vals = vals + func.sigma * standard_normal(rng, block)
        acc.append(vals)
    vals = np.concatenate(acc)
    center = vals.mean()
    dev2 = (vals - center) ** 2
    variance = float(dev2.mean())
    m4 = float(np.mean(dev2**2))
    se = math.sqrt(max(m4 - variance**2, 0.0) / n_samples)
    return variance, se


_MAX_COMPONENT_SIZE = 4


def partial_variance_component_stats(
    func: AnalyticFunction,
    subset,
    spec: BenchmarkSpec,
    n_outer: int,
    n_inner: int,
) -> Tuple[float, float]:
    """Interaction-only variance component of a feature subset, with SE.

    Inclusion-exclusion over Var(E[Y|X_T]) for the non-empty T inside the
    subset; for singletons this is double_loop_variance itself. The SE
    combines the member estimates in quadrature (independent streams).
    """
    subset = sorted(set(int(i) for i in subset))
    if not subset:
        raise ValueError("subset must be non-empty")
    if len(subset) > _MAX_COMPONENT_SIZE:
        raise ValueError(
            f"component limited to subsets of size {_MAX_COMPONENT_SIZE} "
            f"(cost doubles per extra feature), got {len(subset)}"
        )
    total = 0.0
    var_se = 0.0
    s = len(subset)
    for r in range(1, s + 1):
        sign = (-1.0) ** (s - r)
        for t in combinations(subset, r):
            value, se = double_loop_variance_stats(func, t, spec, n_outer, n_inner)
            total += sign * value
            var_se += se * se
    return total, math.sqrt(var_se)


def partial_variance_component(
    func: AnalyticFunction,
    subset,
    spec: BenchmarkSpec,
    n_outer: int,
    n_inner: int,
) -> float:
    return partial_variance_component_stats(func, subset, spec, n_outer, n_inner)[0]


@dataclass(frozen=True)
class BruteForceIndices:
    first_order: np.ndarray
    total_effect: np.ndarray
    variance: float


def brute_force_indices(
    func: AnalyticFunction,
    spec: BenchmarkSpec,
    n_outer: int,
    n_inner: int,
) -> BruteForceIndices:
    """Reference indices from the double-loop oracle.

    S_i = Var(E[Y|X_i]) / V and S_Ti = 1 - Var(E[Y|X_~i]) / V, with V from
    plain Monte Carlo over all features.
    """
    v, _ = total_variance_stats(func, spec, n_outer * n_inner)
    if v <= 0.0:
        raise ValueError("total variance is 0: indices are undefined")
    k = spec.k_total
    first = np.empty(k)
    total = np.empty(k)
    for i in range(k):
        first[i] = double_loop_variance(func, [i], spec, n_outer, n_inner) / v
        comp = [j for j in range(k) if j != i]
        total[i] = 1.0 - double_loop_variance(func, comp, spec, n_outer, n_inner) / v
    return BruteForceIndices(first_order=first, total_effect=total, variance=v)


# ---------------------------------------------------------------------------
# Analytic predictor for benchmark runs


class _AnalyticModel:
    """Evaluates the benchmark function, adding fresh noise per call.

    With sigma > 0 every evaluation draws new noise from a seeded stream,
    mirroring a noisy data-generating process; repeated calls on the same
    matrix therefore differ (deliberately), while whole runs remain
    deterministic given the construction seed. With sigma == 0 the model
    is a pure function.
    """

    def __init__(self, func: AnalyticFunction, noise_seed: int):
        self.func = func
        self._rng = derive_rng(noise_seed, "analytic-noise")

    def predict_matrix(self, m: np.ndarray) -> np.ndarray:
        vals = self.func.evaluate(m)
        if self.func.sigma > 0:
            vals = vals + self.func.sigma * standard_normal(self._rng, vals.shape[0])
        return vals


def as_predictor(
    func: AnalyticFunction, n_features: int, noise_seed: int = 0
) -> FittedPredictor:
    """Wrap an analytic function as a predictor (no fitting, holdout MAE 0)."""
    if n_features < func.relevant_count:
        raise ValueError(
            f"{func.kind} needs at least {func.relevant_count} feature columns"
        )
    echo = {
        "kind": "true_function",
        "function": func.kind,
        "sigma": func.sigma,
        "noise_seed": int(noise_seed),
    }
    if func.coefficients is not None:
        echo["coefficients"] = list(func.coefficients)
    if func.kind == "constant":
        echo["constant_value"] = func.constant_value
    return FittedPredictor(
        kind="true_function",
        k_expected=int(n_features),
        holdout_mae=0.0,
        spec_echo=echo,
        model=_AnalyticModel(func, noise_seed),
    )
