"""Surrogate regressors behind a single batch-prediction contract.

Three built-in kinds (ordinary least squares, k nearest neighbours, and a
bagged CART regression forest) plus an external-process predictor that
speaks a line-oriented CSV protocol on stdin/stdout. Every fitted model is
immutable after ``fit`` and reports a holdout mean absolute error so run
reports carry a fit-quality signal.
"""

from __future__ import annotations

import shlex
import subprocess
import threading
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dataset import Dataset, ScalingSpec
from .rng import derive_rng

KINDS = ("linear", "knn", "random_forest", "external")

_MIN_ROWS_BUILTIN = 10


class ExternalModelError(RuntimeError):
    """The external predictor command failed or violated the protocol."""


@dataclass(frozen=True)
class PredictorSpec:
    """Configuration of one surrogate model.

    ``rf_mtry=None`` means ceil(k/3) features per split, resolved at fit
    time. ``external_command`` is required (and only used) for the
    external kind.
    """

    kind: str
    knn_k: int = 5
    rf_trees: int = 10
    rf_min_leaf: int = 5
    rf_mtry: Optional[int] = None
    external_command: str = ""
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}, expected one of {KINDS}")
        for name in ("knn_k", "rf_trees", "rf_min_leaf"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.rf_mtry is not None and int(self.rf_mtry) < 1:
            raise ValueError("rf_mtry must be a positive integer")
        if not 0.0 < self.holdout_fraction <= 0.5:
            raise ValueError("holdout_fraction must lie in (0, 0.5]")
        if self.kind == "external" and not self.external_command.strip():
            raise ValueError("external kind requires a non-empty command")


@dataclass(frozen=True)
class FittedPredictor:
    """A trained model exposing batch prediction.

    ``predict`` rejects matrices whose column count differs from
    ``k_expected``. Instances are safe to share across concurrent workers.
    """

    kind: str
    k_expected: int
    holdout_mae: float
    spec_echo: dict
    model: object = field(repr=False)

    def predict(self, m) -> np.ndarray:
        return predict(self, m)


def predict(p: FittedPredictor, m) -> np.ndarray:
    """Evaluate a fitted model on an n' x k matrix, returning n' values.

    Pure for the built-in kinds: the same matrix always yields the
    bitwise-identical vector.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("prediction input must be a 2-D matrix")
    if m.shape[1] != p.k_expected:
        raise ValueError(
            f"matrix has {m.shape[1]} columns, model expects {p.k_expected}"
        )
    if m.size and not np.isfinite(m).all():
        raise ValueError("prediction input contains non-finite values")
    if m.shape[0] == 0:
        return np.zeros(0)
    out = np.asarray(p.model.predict_matrix(m), dtype=np.float64).ravel()
    if out.shape[0] != m.shape[0]:
        raise RuntimeError(
            f"model returned {out.shape[0]} values for {m.shape[0]} rows"
        )
    return out


def fit(spec: PredictorSpec, d: Dataset) -> FittedPredictor:
    """Train a model of the requested kind on a dataset with a target.

    A seed-determined holdout of ``holdout_fraction * n`` rows is scored
    (MAE) with a model trained on the remaining rows, then the returned
    model is refit on all rows. Deterministic given ``spec.seed``.
    """
    if d.target is None:
        raise ValueError("fit requires a dataset with a target")
    n = d.n_rows
    if spec.kind != "external" and n < _MIN_ROWS_BUILTIN:
        raise ValueError(f"built-in models need at least {_MIN_ROWS_BUILTIN} rows, got {n}")

    x, y = d.features, d.target
    rng = derive_rng(spec.seed, "holdout")
    perm = rng.permutation(n)
    n_hold = max(1, int(round(spec.holdout_fraction * n)))
    hold, train = perm[:n_hold], perm[n_hold:]
    if train.shape[0] < 2:
        raise ValueError("holdout split leaves fewer than 2 training rows")

    builder = _BUILDERS[spec.kind]
    probe = builder(spec, x[train], y[train], stream="probe")
    hold_pred = np.asarray(probe.predict_matrix(x[hold]), dtype=np.float64).ravel()
    holdout_mae = float(np.mean(np.abs(hold_pred - y[hold])))

    model = builder(spec, x, y, stream="final")
    if spec.kind == "external":
        # Handshake: one-row predict proves the command obeys the protocol.
        model.predict_matrix(x[:1])

    echo = asdict(spec)
    return FittedPredictor(
        kind=spec.kind,
        k_expected=d.n_features,
        holdout_mae=holdout_mae,
        spec_echo=echo,
        model=model,
    )


# ---------------------------------------------------------------------------
# Linear regression via the normal equations


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    intercept: float

    def predict_matrix(self, m: np.ndarray) -> np.ndarray:
        return m @ self.weights + self.intercept


def fit_linear_matrix(x: np.ndarray, y: np.ndarray) -> LinearModel:
    """Least squares through the normal equations with a ridge rescue.

    If the Gram matrix is singular (collinear or constant columns, as
    happens on shrinking RFE feature sets) a 1e-8 trace-scaled ridge term
    is added and the solve is retried.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.shape[0]
    z = np.column_stack([np.ones(n), x])
    gram = z.T @ z
    rhs = z.T @ y
    coef = _solve_checked(gram, rhs)
    if coef is None:
        p = gram.shape[0]
        ridge = 1e-8 * (np.trace(gram) / p if np.trace(gram) > 0 else 1.0)
        coef = _solve_checked(gram + ridge * np.eye(p), rhs)
        if coef is None:
            raise np.linalg.LinAlgError(
                "normal equations unsolvable even with ridge rescue"
            )
    return LinearModel(weights=coef[1:].copy(), intercept=float(coef[0]))


def _solve_checked(gram, rhs):
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.isfinite(coef).all():
        return None
    # Exactly singular systems sometimes return garbage instead of raising.
    tol = 1e-6 * (np.linalg.norm(rhs) + 1.0)
    if np.linalg.norm(gram @ coef - rhs) > tol:
        return None
    return coef


def _build_linear(spec, x, y, stream):
    return fit_linear_matrix(x, y)


# ---------------------------------------------------------------------------
# k nearest neighbours on internally min-max scaled features


@dataclass(frozen=True)
class KnnModel:
    train_scaled: np.ndarray
    train_y: np.ndarray
    k: int
    scaler: ScalingSpec

    def predict_matrix(self, m: np.ndarray) -> np.ndarray:
        q = self.scaler.transform(m)
        t = self.train_scaled
        k_eff = min(self.k, t.shape[0])
        out = np.empty(q.shape[0])
        t_sq = np.einsum("ij,ij->i", t, t)
        chunk = max(1, int(2**22 / max(1, t.shape[0])))
        for lo in range(0, q.shape[0], chunk):
            qc = q[lo : lo + chunk]
            d2 = np.einsum("ij,ij->i", qc, qc)[:, None] - 2.0 * (qc @ t.T) + t_sq
            order = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
            out[lo : lo + chunk] = self.train_y[order].mean(axis=1)
        return out


def fit_knn_matrix(x: np.ndarray, y: np.ndarray, k: int) -> KnnModel:
    scaler = ScalingSpec.from_matrix(x)
    return KnnModel(
        train_scaled=scaler.transform(x),
        train_y=np.array(y, dtype=np.float64, copy=True),
        k=int(k),
        scaler=scaler,
    )


def _build_knn(spec, x, y, stream):
    return fit_knn_matrix(x, y, spec.knn_k)


# ---------------------------------------------------------------------------
# CART regression forest


@dataclass(frozen=True)
class Tree:
    """Array-encoded binary regression tree (feature < 0 marks a leaf)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict_matrix(self, m: np.ndarray) -> np.ndarray:
        node = np.zeros(m.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            live = f >= 0
            if not live.any():
                break
            rows = np.nonzero(live)[0]
            go_left = m[rows, f[live]] <= self.threshold[node[live]]
            node[rows] = np.where(
                go_left, self.left[node[live]], self.right[node[live]]
            )
        return self.value[node]


@dataclass(frozen=True)
class ForestModel:
    trees: tuple
    importance_raw: np.ndarray  # summed SSE reduction per feature, all trees

    def predict_matrix(self, m: np.ndarray) -> np.ndarray:
        acc = np.zeros(m.shape[0])
        for t in self.trees:
            acc += t.predict_matrix(m)
        return acc / len(self.trees)


def _best_split(x_node, y_node, feats):
    """Exhaustive variance-reduction split search over candidate features.

    Thresholds are midpoints between consecutive distinct sorted values.
    Returns (feature, threshold, children_sse) or None when no candidate
    column admits a split. Ties resolve to the lowest feature index and
    then the smallest threshold position, so the search is deterministic.
    """
    m = y_node.shape[0]
    cols = x_node[:, feats]
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    ys = y_node[order]
    c1 = np.cumsum(ys, axis=0)
    c2 = np.cumsum(ys * ys, axis=0)
    counts = np.arange(1, m, dtype=np.float64)[:, None]
    sse_left = c2[:-1] - c1[:-1] ** 2 / counts
    sse_right = (c2[-1] - c2[:-1]) - (c1[-1] - c1[:-1]) ** 2 / (m - counts)
    total = sse_left + sse_right
    total[xs[1:] <= xs[:-1]] = np.inf
    pos = total.argmin(axis=0)
    per_col = total[pos, np.arange(len(feats))]
    col = int(per_col.argmin())
    if not np.isfinite(per_col[col]):
        return None
    j = int(pos[col])
    lo, hi = xs[j, col], xs[j + 1, col]
    thr = lo + (hi - lo) / 2.0
    if thr >= hi:  # midpoint rounded up to the right value
        thr = lo
    return int(feats[col]), float(thr), float(per_col[col])


def _grow_tree(x, y, min_leaf, mtry, rng, importance):
    k = x.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(x.shape[0]))]
    while stack:
        node, idx = stack.pop()
        y_node = y[idx]
        value[node] = float(y_node.mean())
        if idx.shape[0] <= min_leaf or y_node.min() == y_node.max():
            continue
        feats = np.sort(rng.choice(k, size=min(mtry, k), replace=False))
        found = _best_split(x[idx], y_node, feats)
        if found is None:
            continue
        f, thr, children_sse = found
        parent_sse = float(np.sum((y_node - y_node.mean()) ** 2))
        gain = parent_sse - children_sse
        if gain <= 0.0:
            continue
        importance[f] += gain
        mask = x[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        node_l, node_r = new_node(), new_node()
        left[node], right[node] = node_l, node_r
        stack.append((node_r, idx[~mask]))
        stack.append((node_l, idx[mask]))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


def fit_forest_matrix(
    x: np.ndarray,
    y: np.ndarray,
    n_trees: int = 10,
    min_leaf: int = 5,
    mtry: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> ForestModel:
    """Bagged CART regression forest.

    Each tree is grown on a bootstrap resample with ``mtry`` features
    sampled per split (default ceil(k/3)), variance-reduction splits, no
    depth limit, and leaves of at most ``min_leaf`` samples or zero
    target variance. Randomness is consumed only here, never in predict.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, k = x.shape
    if rng is None:
        rng = derive_rng(0, "forest")
    if mtry is None:
        mtry = max(1, -(-k // 3))
    importance = np.zeros(k)
    trees = []
    for _ in range(n_trees):
        boot = rng.integers(0, n, size=n)
        trees.append(_grow_tree(x[boot], y[boot], int(min_leaf), int(mtry), rng, importance))
    return ForestModel(trees=tuple(trees), importance_raw=importance)


def _build_forest(spec, x, y, stream):
    rng = derive_rng(spec.seed, "forest", stream)
    return fit_forest_matrix(
        x, y, n_trees=spec.rf_trees, min_leaf=spec.rf_min_leaf, mtry=spec.rf_mtry, rng=rng
    )


# ---------------------------------------------------------------------------
# External-process predictor
#
# Protocol (bit-exact): the command is launched once per call; stdin gets a
# mode line ("#fit" or "#predict") followed by header-less CSV, one row per
# line, values in shortest round-trip decimal form. "#fit" payload rows
# carry the target appended as the last column and any stdout is ignored.
# "#predict" must produce exactly one prediction line per payload row.
# Exit code must be 0 in both modes.


class ExternalModel:
    def __init__(self, command: str):
        self.command = command
        self.argv = shlex.split(command)
        if not self.argv:
            raise ValueError("external command is empty")
        self._lock = threading.Lock()

    def _run(self, mode: str, matrix: np.ndarray) -> str:
        lines = [mode]
        for row in matrix:
            lines.append(",".join(repr(float(v)) for v in row))
        payload = "\n".join(lines) + "\n"
        with self._lock:  # one subprocess at a time, callable from any worker
            try:
                proc = subprocess.run(
                    self.argv,
                    input=payload,
                    capture_output=True,
                    text=True,
                    check=False,
                )
            except FileNotFoundError:
                raise ExternalModelError(
                    f"external command not found: {self.argv[0]!r}"
                ) from None
        if proc.returncode != 0:
            raise ExternalModelError(
                f"external command exited with {proc.returncode}: "
                f"{proc.stderr.strip()[:500]}"
            )
        return proc.stdout

    def fit_rows(self, x: np.ndarray, y: np.ndarray) -> None:
        self._run("#fit", np.column_stack([x, y]))

    def predict_matrix(self, m: np.ndarray) -> np.ndarray:
        out = self._run("#predict", m)
        lines = [ln for ln in out.splitlines() if ln.strip()]
        if len(lines) != m.shape[0]:
            raise ExternalModelError(
                f"external command wrote {len(lines)} prediction lines for "
                f"{m.shape[0]} rows"
            )
        try:
            values = np.asarray([float(ln) for ln in lines], dtype=np.float64)
        except ValueError as exc:
            raise ExternalModelError(f"malformed prediction line: {exc}") from None
        if values.size and not np.isfinite(values).all():
            raise ExternalModelError("external command returned non-finite values")
        return values


def _build_external(spec, x, y, stream):
    model = ExternalModel(spec.external_command)
    model.fit_rows(x, y)
    return model


_BUILDERS = {
    "linear": _build_linear,
    "knn": _build_knn,
    "random_forest": _build_forest,
    "external": _build_external,
}
