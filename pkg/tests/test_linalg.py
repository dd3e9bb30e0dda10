import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pivotsteer.linalg import cosine_similarity, fit_linear_map, mean_rows, pca, pearson

mpmath.mp.dps = 40


# -- independent oracles -------------------------------------------------------

def reverse_sum_mean(m):
    n, d = len(m), len(m[0])
    out = []
    for j in range(d):
        acc = 0.0
        for i in reversed(range(n)):
            acc += float(m[i][j])
        out.append(acc / n)
    return out


def normal_equations_mp(X, Y):
    """W from (X^T X) W^T = X^T Y, Gaussian elimination with pivoting at 40 digits."""
    Xm = mpmath.matrix(X.tolist())
    Ym = mpmath.matrix(Y.tolist())
    G = Xm.T * Xm
    B = Xm.T * Ym
    cols = [mpmath.lu_solve(G, B[:, j]) for j in range(B.cols)]
    Wt = np.array([[float(c[i]) for c in cols] for i in range(G.rows)])
    return Wt.T


def jacobi_eig(A, tol=1e-15, sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                V = V @ J
    return np.diag(A), V


def pearson_mp(x, y):
    x = [mpmath.mpf(v) for v in x]
    y = [mpmath.mpf(v) for v in y]
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = mpmath.sqrt(sum((a - mx) ** 2 for a in x))
    sy = mpmath.sqrt(sum((b - my) ** 2 for b in y))
    return float(cov / (sx * sy))


# -- mean_rows -------------------------------------------------------------------

class TestMeanRows:
    def test_midpoint(self):
        np.testing.assert_array_equal(mean_rows([[0, 0], [2, 4]]), [1, 2])

    def test_single_row(self):
        np.testing.assert_array_equal(mean_rows([[3, -1]]), [3, -1])

    def test_matches_reverse_order_oracle(self):
        m = np.random.default_rng(7).standard_normal((100, 8))
        np.testing.assert_allclose(mean_rows(m), reverse_sum_mean(m), rtol=0, atol=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty batch"):
            mean_rows(np.zeros((0, 3)))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            mean_rows([[1.0, np.nan]])

    @given(
        arrays(np.float64, (7, 3), elements=st.floats(-1e3, 1e3)),
        st.floats(-10, 10),
    )
    def test_linearity(self, m, alpha):
        np.testing.assert_allclose(mean_rows(alpha * m), alpha * mean_rows(m), rtol=1e-12, atol=1e-9)


# -- fit_linear_map ----------------------------------------------------------------

class TestFitLinearMap:
    @pytest.fixture
    def X(self):
        return np.random.default_rng(11).standard_normal((100, 8))

    def test_self_alignment(self, X):
        np.testing.assert_allclose(fit_linear_map(X, X), np.eye(8), atol=1e-9)

    def test_uniform_scaling(self, X):
        np.testing.assert_allclose(fit_linear_map(X, 2 * X), 2 * np.eye(8), atol=1e-9)

    def test_recovers_generating_map(self, X):
        A = np.random.default_rng(12).standard_normal((8, 8))
        Y = X @ A.T
        W = fit_linear_map(X, Y)
        np.testing.assert_allclose(W, A, atol=1e-6)
        np.testing.assert_allclose(W, normal_equations_mp(X, Y), atol=1e-9)

    def test_matches_extended_precision_normal_equations_noisy(self, X):
        Y = np.random.default_rng(13).standard_normal((100, 8))
        np.testing.assert_allclose(fit_linear_map(X, Y), normal_equations_mp(X, Y), atol=1e-10)

    def test_ridge_objective_stationary(self, X):
        Y = np.random.default_rng(14).standard_normal((100, 8))
        lam = 3.0
        W = fit_linear_map(X, Y, lam)
        grad = 2 * (W @ X.T - Y.T) @ X + 2 * lam * W
        np.testing.assert_allclose(grad, 0, atol=1e-9)

    def test_rank_deficient_minimum_norm(self):
        rng = np.random.default_rng(15)
        X = rng.standard_normal((30, 4))
        X[:, 3] = X[:, 0]  # duplicate column
        Y = rng.standard_normal((30, 4))
        W = fit_linear_map(X, Y)
        np.testing.assert_allclose(W, (np.linalg.pinv(X) @ Y).T, atol=1e-10)

    def test_optimality_against_perturbations(self):
        rng = np.random.default_rng(16)
        X = rng.standard_normal((60, 5))
        Y = rng.standard_normal((60, 5))
        W = fit_linear_map(X, Y)

        def resid(M):
            return float(np.sum((X @ M.T - Y) ** 2))

        base = resid(W)
        for _ in range(50):
            E = rng.standard_normal((5, 5))
            E /= np.linalg.norm(E)
            assert resid(W + 1e-3 * E) >= base - 1e-9

    @pytest.mark.parametrize("shape", [(10, 3), (9, 4)])
    def test_dimension_mismatch(self, shape):
        with pytest.raises(ValueError, match="mismatch"):
            fit_linear_map(np.ones((10, 4)), np.ones(shape))

    def test_non_finite(self):
        X = np.ones((3, 2))
        X[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            fit_linear_map(X, np.ones((3, 2)))

    def test_negative_ridge(self):
        with pytest.raises(ValueError):
            fit_linear_map(np.eye(2), np.eye(2), -1.0)


# -- cosine ----------------------------------------------------------------------

class TestCosine:
    @pytest.mark.parametrize(
        "a, b, expected",
        [((1, 2, 3), (1, 2, 3), 1.0), ((1, 0), (0, 1), 0.0), ((1, 1), (-1, -1), -1.0)],
    )
    def test_anchors(self, a, b, expected):
        assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate vector"):
            cosine_similarity((0, 0), (1, 2))

    @given(arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)),
           arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)))
    def test_range(self, a, b):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


# -- pca -------------------------------------------------------------------------

class TestPCA:
    def test_collinear(self):
        res = pca([(1, 1), (2, 2), (3, 3)], 1)
        assert res.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)

    def test_isotropic_square(self):
        res = pca([(1, 1), (1, -1), (-1, 1), (-1, -1)], 2)
        np.testing.assert_allclose(res.explained_variance_ratio, [0.5, 0.5], atol=1e-12)

    def test_matches_jacobi_oracle(self):
        data = np.random.default_rng(21).standard_normal((20, 6)) @ np.diag([5, 3, 2, 1, 0.5, 0.1])
        res = pca(data, 2)
        centered = data - data.mean(axis=0)
        evals, evecs = jacobi_eig(centered.T @ centered / 19)
        order = np.argsort(evals)[::-1][:2]
        oracle = centered @ evecs[:, order]
        for j in range(2):
            sign = np.sign(np.dot(oracle[:, j], res.projections[:, j]))
            np.testing.assert_allclose(res.projections[:, j], sign * oracle[:, j], atol=1e-8)

    def test_sign_convention(self):
        res = pca(np.random.default_rng(22).standard_normal((15, 4)), 3)
        for c in res.components:
            assert c[np.argmax(np.abs(c))] > 0

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            pca(np.eye(3), k)

    @settings(max_examples=50)
    @given(arrays(np.float64, (8, 4), elements=st.floats(-100, 100)))
    def test_orthonormal_and_ratios(self, data):
        if np.linalg.matrix_rank(data - data.mean(axis=0)) == 0:
            return
        res = pca(data, 3)
        np.testing.assert_allclose(res.components @ res.components.T, np.eye(3), atol=1e-9)
        r = res.explained_variance_ratio
        assert np.all(np.diff(r) <= 1e-12)
        assert r.sum() <= 1 + 1e-9


# -- pearson ---------------------------------------------------------------------

class TestPearson:
    def test_identity(self):
        assert pearson([1, 2, 5, 7], [1, 2, 5, 7]) == pytest.approx(1.0, abs=1e-15)

    def test_negative_linear(self):
        x = np.array([0.5, 1, 2, 9])
        assert pearson(x, -2 * x + 3) == pytest.approx(-1.0, abs=1e-15)

    def test_textbook(self):
        assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(
            pearson_mp([1, 2, 3, 4], [1, 3, 2, 4]), abs=1e-12)
        # by hand: sum of cross deviations 4, squared deviations 5 each -> 0.8
        assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="zero variance"):
            pearson([1, 1, 1], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            pearson([1, 2, 3], [1, 2])

    @given(
        arrays(np.float64, 10, elements=st.floats(-100, 100)),
        arrays(np.float64, 10, elements=st.floats(-100, 100)),
        st.floats(0.01, 100) | st.floats(-100, -0.01),
        st.floats(-100, 100),
    )
    def test_affine_invariance(self, x, y, a, b):
        if np.std(x) < 1e-3 or np.std(y) < 1e-3:
            return
        assert pearson(a * x + b, y) == pytest.approx(np.sign(a) * pearson(x, y), abs=1e-12)
