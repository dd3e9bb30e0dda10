"""Dense float64 linear algebra and statistics used across the package.

Matrices are 2-D ``numpy.ndarray`` of dtype float64 with one example per
row; vectors are 1-D float64 arrays.  Every routine validates finiteness of
its inputs and never mutates them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def mean_rows(m) -> np.ndarray:
    """Column means, accumulated row by row in index order.

    The explicit loop pins the summation order so repeated runs (and
    artifacts derived from them) are bitwise reproducible.
    """
    m = as_matrix(m)
    if m.shape[0] == 0:
        raise ValueError("empty batch")
    acc = np.zeros(m.shape[1], dtype=np.float64)
    for row in m:
        acc += row
    return acc / m.shape[0]


def fit_linear_map(X, Y, ridge: float = 0.0) -> np.ndarray:
    """Least-squares map ``W`` with ``W @ x_i ~ y_i`` for every row pair.

    Minimises ``sum_i ||W x_i - y_i||^2 + ridge * ||W||_F^2``.  With
    ``ridge > 0`` the regularised normal equations are solved directly.
    With ``ridge == 0`` an SVD-based solve returns the minimum-norm solution,
    which coincides with the normal-equations answer whenever ``X`` has full
    column rank.

    Args:
        X: source rows, shape (n, d).
        Y: target rows, shape (n, d).
        ridge: nonnegative Tikhonov weight.

    Returns:
        ``W`` of shape (d, d), to be applied to column vectors (``h @ W.T``
        for row batches).
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape != Y.shape:
        raise ValueError(f"dimension mismatch: X {X.shape} vs Y {Y.shape}")
    if X.shape[0] < 1:
        raise ValueError("empty batch")
    if not np.isfinite(ridge) or ridge < 0:
        raise ValueError(f"ridge must be a finite nonnegative scalar, got {ridge}")
    if ridge > 0:
        d = X.shape[1]
        gram = X.T @ X + ridge * np.eye(d)
        # (X^T X + rI) W^T = X^T Y
        return np.linalg.solve(gram, X.T @ Y).T
    sol, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return sol.T


def default_ridge(X) -> float:
    """``1e-6 * trace(X^T X) / d``: a scale-aware jitter for near-singular batches."""
    X = as_matrix(X, "X")
    return 1e-6 * float(np.sum(X * X)) / X.shape[1]


def cosine_similarity(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("degenerate vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class PCAResult:
    components: np.ndarray  # (k, d), orthonormal rows
    projections: np.ndarray  # (n, k)
    explained_variance_ratio: np.ndarray  # (k,)
    mean: np.ndarray  # (d,)


def pca(vectors: Sequence, k: int) -> PCAResult:
    """Principal components from the eigendecomposition of the covariance.

    Components come in descending eigenvalue order.  Each component's sign
    is fixed so that its largest-magnitude entry is positive (ties resolved
    by the first such entry).
    """
    data = as_matrix(np.asarray(vectors, dtype=np.float64), "vectors")
    n, d = data.shape
    if n < 2:
        raise ValueError("pca needs at least 2 vectors")
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k must be in [1, {min(n, d)}], got {k}")
    mu = mean_rows(data)
    centered = data - mu
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    comps = evecs[:, :k].T.copy()
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    total = evals.sum()
    ratio = evals[:k] / total if total > 0 else np.zeros(k)
    return PCAResult(
        components=comps,
        projections=centered @ comps.T,
        explained_variance_ratio=ratio,
        mean=mu,
    )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("zero variance")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))
