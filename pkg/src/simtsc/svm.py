"""Soft-margin Gaussian-kernel SVM trained by SMO, with grid-searched hyperparameters.

The kernel is ``exp(-|u - v|^2 / scale^2)``.  Features are standardized
with training statistics before the kernel is applied, and the stored
support vectors are the standardized rows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist, pdist

from .io import atomic_write_text, check_magic

DEFAULT_C = (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
DEFAULT_SCALE_FACTORS = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0)
KKT_TOL = 1e-3
MAX_PASSES = 10_000
TAU = 1e-12

MAGIC = "simtsc-svm"
VERSION = 1


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def invert(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.std + self.mean


def standardize_fit(X) -> Standardizer:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("standardization needs at least two rows")
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Standardizer(X.mean(axis=0), std)


def standardize_apply(standardizer: Standardizer, X) -> np.ndarray:
    return standardizer.apply(X)


def gaussian_kernel(u, v, scale: float) -> float:
    if scale <= 0:
        raise ValueError("kernel scale must be positive")
    d = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    return float(np.exp(-np.dot(d, d) / scale ** 2))


def kernel_matrix(A, B, scale: float) -> np.ndarray:
    sq = cdist(np.atleast_2d(A), np.atleast_2d(B), "sqeuclidean")
    return np.exp(-sq / scale ** 2)


@njit(cache=True)
def _smo(K, y, C, tol, max_iter, trace):
    """Dual coordinate ascent on the maximal violating pair.

    Minimises 0.5 a'Qa - e'a with Q_ij = y_i y_j K_ij, 0 <= a <= C, y'a = 0.
    Returns (alpha, bias, iterations, converged, objective trace).
    """
    n = y.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)
    obj = np.empty(max_iter + 1 if trace else 1)
    obj[0] = 0.0
    it = 0
    converged = False
    while it < max_iter:
        i = -1
        j = -1
        m_up = -np.inf
        m_low = np.inf
        for t in range(n):
            v = -y[t] * grad[t]
            up = (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0)
            low = (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C)
            if up and v > m_up:
                m_up = v
                i = t
            if low and v < m_low:
                m_low = v
                j = t
        if i < 0 or j < 0 or m_up - m_low <= tol:
            converged = True
            break
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if eta <= 0.0:
            eta = TAU
        lam = (m_up - m_low) / eta
        lim_i = C - alpha[i] if y[i] > 0 else alpha[i]
        lim_j = alpha[j] if y[j] > 0 else C - alpha[j]
        hit_i = lim_i <= lam
        hit_j = lim_j <= lam
        if hit_i or hit_j:
            lam = min(lim_i, lim_j)
            hit_i = lim_i <= lam
            hit_j = lim_j <= lam
        alpha[i] += y[i] * lam
        alpha[j] -= y[j] * lam
        # land exactly on the box when a bound is active
        if hit_i:
            alpha[i] = C if y[i] > 0 else 0.0
        if hit_j:
            alpha[j] = 0.0 if y[j] > 0 else C
        for t in range(n):
            grad[t] += y[t] * lam * (K[t, i] - K[t, j])
        it += 1
        if trace:
            s = 0.0
            for t in range(n):
                s += alpha[t] * (grad[t] - 1.0)
            obj[it] = -0.5 * s
    # bias from the free vectors, else the middle of the feasible interval
    total = 0.0
    count = 0
    m_up = -np.inf
    m_low = np.inf
    for t in range(n):
        v = -y[t] * grad[t]
        if 0.0 < alpha[t] < C:
            total += v
            count += 1
        up = (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0)
        low = (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C)
        if up and v > m_up:
            m_up = v
        if low and v < m_low:
            m_low = v
    if count > 0:
        b = total / count
    elif np.isfinite(m_up) and np.isfinite(m_low):
        b = 0.5 * (m_up + m_low)
    elif np.isfinite(m_up):
        b = m_up
    else:
        b = m_low
    return alpha, b, it, converged, obj[: it + 1 if trace else 1]


@dataclass
class TrainedSvm:
    support_vectors: np.ndarray
    dual_coeffs: np.ndarray
    bias: float
    kernel_scale: float
    box_constraint: float
    standardizer: Standardizer
    n_train: int
    support_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    converged: bool = True
    iterations: int = 0
    objective_trace: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_support(self) -> int:
        return len(self.dual_coeffs)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(0 if X.size == 0 else 1, -1)
        if X.shape[0] == 0:
            return np.empty(0)
        if X.shape[1] != self.support_vectors.shape[1]:
            raise ValueError(f"expected {self.support_vectors.shape[1]} features, got {X.shape[1]}")
        Z = self.standardizer.apply(X)
        return kernel_matrix(Z, self.support_vectors, self.kernel_scale) @ self.dual_coeffs + self.bias


def _as_pm1(labels) -> np.ndarray:
    y = np.asarray(labels).astype(float).ravel()
    if np.all(np.isin(y, (0.0, 1.0))):
        y = 2.0 * y - 1.0
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be in {0, 1} or {-1, +1}")
    return y


def smo_train(features, labels, C: float, scale: float, kkt_tol: float = KKT_TOL,
              max_passes: int = MAX_PASSES, trace: bool = False) -> TrainedSvm:
    """Train on standardized ``features``; labels in {-1, +1} (or {0, 1}).

    ``max_passes`` counts sweeps of ``n/2`` pair updates each, so every
    point can be touched once per pass.
    """
    X = np.asarray(features, dtype=float)
    y = _as_pm1(labels)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("features must be an (n, p) matrix matching the labels")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("both classes must be present")
    if C <= 0 or scale <= 0:
        raise ValueError("C and scale must be positive")
    std = standardize_fit(X)
    Z = std.apply(X)
    K = kernel_matrix(Z, Z, scale)
    max_iter = int(max_passes) * max(1, X.shape[0] // 2)
    alpha, b, it, ok, obj = _smo(K, y, float(C), float(kkt_tol), max_iter, trace)
    sv = alpha > 0
    return TrainedSvm(Z[sv].copy(), (alpha * y)[sv], float(b), float(scale), float(C), std,
                      X.shape[0], np.flatnonzero(sv), bool(ok), int(it), obj if trace else None)


def dual_variables(model: TrainedSvm) -> np.ndarray:
    """The full alpha vector over the training rows the model was fit on."""
    alpha = np.zeros(model.n_train)
    alpha[model.support_indices] = np.abs(model.dual_coeffs)
    return alpha


def kkt_residual(model: TrainedSvm, features, labels) -> float:
    """Largest violation of the soft-margin optimality conditions on the training set."""
    y = _as_pm1(labels)
    alpha = dual_variables(model)
    margin = y * model.decision_function(features)
    C = model.box_constraint
    viol = np.where(alpha <= 0, np.maximum(0.0, 1.0 - margin),
                    np.where(alpha >= C, np.maximum(0.0, margin - 1.0), np.abs(margin - 1.0)))
    return float(viol.max()) if viol.size else 0.0


def predict(model: TrainedSvm, features) -> tuple[np.ndarray, np.ndarray]:
    """Labels in {-1, +1} and decision values; a zero decision value gives +1."""
    f = model.decision_function(features)
    return np.where(f >= 0, 1, -1), f


def evaluate(model: TrainedSvm, test_features, test_labels) -> tuple[float, float]:
    y = _as_pm1(test_labels)
    if y.size == 0:
        raise ValueError("test set is empty")
    pred, _ = predict(model, test_features)
    return float(np.mean(pred != y)), model.n_support / model.n_train


@dataclass(frozen=True)
class HyperGrid:
    c_values: tuple = DEFAULT_C
    scale_values: tuple = DEFAULT_SCALE_FACTORS
    folds: int = 10
    relative_scale: bool = True

    def __post_init__(self):
        if not self.c_values or not self.scale_values:
            raise ValueError("grid axes must be non-empty")
        if min(self.c_values) <= 0 or min(self.scale_values) <= 0:
            raise ValueError("grid values must be positive")
        if self.folds < 2:
            raise ValueError("at least two folds are needed")

    def thinned(self, scale: float) -> "HyperGrid":
        """Keep ``ceil(scale * len)`` evenly spread values per axis, at least 3 (desk runs)."""
        if scale >= 1:
            return self

        def pick(values):
            k = min(len(values), max(3, int(np.ceil(scale * len(values)))))
            idx = np.unique(np.round(np.linspace(0, len(values) - 1, k)).astype(int))
            return tuple(values[i] for i in idx)

        return HyperGrid(pick(self.c_values), pick(self.scale_values), self.folds,
                         self.relative_scale)


def stratified_folds(labels, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold index per row; each class is spread as evenly as possible."""
    y = np.asarray(labels)
    out = np.empty(len(y), dtype=int)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        out[idx] = np.arange(len(idx)) % folds
    return out


def median_distance(features) -> float:
    Z = standardize_fit(features).apply(features)
    d = pdist(Z)
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 0 else 1.0


def cv_grid_search(features, labels, grid: HyperGrid, rng: np.random.Generator,
                   kkt_tol: float = KKT_TOL) -> tuple[float, float, float]:
    """Stratified k-fold CV over the grid; returns ``(C, scale, cv_error)``.

    Folds drop to the smaller class count when a class has fewer rows than
    ``grid.folds``.  Ties go to the smaller C, then to the larger scale.
    """
    X = np.asarray(features, dtype=float)
    y = _as_pm1(labels)
    counts = [int(np.sum(y > 0)), int(np.sum(y < 0))]
    folds = max(2, min(grid.folds, min(counts)))
    base = median_distance(X) if grid.relative_scale else 1.0
    scales = [s * base for s in grid.scale_values]
    if len(grid.c_values) * len(scales) == 1 or min(counts) < 2:
        return float(grid.c_values[0]), float(scales[0]), float("nan")
    assign = stratified_folds(y, folds, rng)
    errors = np.zeros((len(grid.c_values), len(scales)))
    for f in range(folds):
        tr, te = assign != f, assign == f
        ytr = y[tr]
        if not (np.any(ytr > 0) and np.any(ytr < 0)):
            errors += np.sum(te)
            continue
        std = standardize_fit(X[tr])
        Ztr, Zte = std.apply(X[tr]), std.apply(X[te])
        sq_tr = cdist(Ztr, Ztr, "sqeuclidean")
        sq_te = cdist(Zte, Ztr, "sqeuclidean")
        max_iter = MAX_PASSES * max(1, len(ytr) // 2)
        for si, s in enumerate(scales):
            K = np.exp(-sq_tr / s ** 2)
            Kte = np.exp(-sq_te / s ** 2)
            for ci, C in enumerate(grid.c_values):
                alpha, b, _, _, _ = _smo(K, ytr, float(C), kkt_tol, max_iter, False)
                dec = Kte @ (alpha * ytr) + b
                pred = np.where(dec >= 0, 1.0, -1.0)
                errors[ci, si] += np.sum(pred != y[te])
    errors /= len(y)
    best = None
    for ci in range(len(grid.c_values)):
        for si in reversed(range(len(scales))):
            if best is None or errors[ci, si] < errors[best] - 1e-12:
                best = (ci, si)
    return float(grid.c_values[best[0]]), float(scales[best[1]]), float(errors[best])


def fit_with_cv(features, labels, grid: HyperGrid, rng: np.random.Generator) -> TrainedSvm:
    C, scale, _ = cv_grid_search(features, labels, grid, rng)
    return smo_train(features, labels, C, scale)


# -- serialization -------------------------------------------------------------

def dumps_svm(model: TrainedSvm) -> str:
    body = {
        "box_constraint": model.box_constraint,
        "kernel_scale": model.kernel_scale,
        "bias": model.bias,
        "n_train": model.n_train,
        "support_indices": model.support_indices.tolist(),
        "converged": model.converged,
        "iterations": model.iterations,
        "standardizer": {"mean": model.standardizer.mean.tolist(),
                         "std": model.standardizer.std.tolist()},
        "dual_coeffs": model.dual_coeffs.tolist(),
        "support_vectors": model.support_vectors.tolist(),
    }
    return f"# {MAGIC} v{VERSION}\n" + json.dumps(body, indent=1) + "\n"


def save_svm(model: TrainedSvm, path) -> Path:
    return atomic_write_text(path, dumps_svm(model))


def loads_svm(text: str, source="<string>") -> TrainedSvm:
    first, _, rest = text.partition("\n")
    check_magic(first, MAGIC, VERSION, source)
    try:
        d = json.loads(rest)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{source}: line {exc.lineno + 1}: {exc.msg}") from None
    p = len(d["standardizer"]["mean"])
    return TrainedSvm(
        np.array(d["support_vectors"], dtype=float).reshape(-1, p),
        np.array(d["dual_coeffs"], dtype=float),
        float(d["bias"]), float(d["kernel_scale"]), float(d["box_constraint"]),
        Standardizer(np.array(d["standardizer"]["mean"], dtype=float),
                     np.array(d["standardizer"]["std"], dtype=float)),
        int(d["n_train"]), np.array(d["support_indices"], dtype=int),
        bool(d["converged"]), int(d["iterations"]))


def load_svm(path) -> TrainedSvm:
    path = Path(path)
    return loads_svm(path.read_text(encoding="utf-8"), source=str(path))
