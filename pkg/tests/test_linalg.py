from __future__ import annotations

import numpy as np
import pytest

from bsc.linalg import (
    LinalgError,
    NotPositiveDefiniteError,
    SingularTriangularError,
    cholesky_factor,
    frobenius_norm,
    singular_values,
    svd_tail_norm,
    triangular_solve,
    truncated_svd,
)
from conftest import rel_err


def eigh_singular_values(a: np.ndarray) -> np.ndarray:
    """Independent spectrum oracle: eigendecomposition of the Gram matrix."""
    evals = np.linalg.eigh(a.T @ a)[0]
    return np.sqrt(np.clip(evals, 0.0, None))[::-1]


def test_truncated_svd_diagonal_case():
    a = np.diag([3.0, 2.0, 1.0])
    res = truncated_svd(a, 2)
    assert np.allclose(res.singular_values, [3.0, 2.0], atol=1e-12)
    assert np.allclose(res.reconstruct(), np.diag([3.0, 2.0, 0.0]), atol=1e-12)


def test_truncated_svd_exact_rank_one():
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([1.0, 0.0])
    a = np.outer(u, v)
    res = truncated_svd(a, 1)
    assert np.allclose(res.singular_values, [2.0], atol=1e-12)
    assert frobenius_norm(a - res.reconstruct()) < 1e-12


def test_truncated_svd_residual_matches_gram_eigen_oracle():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 7))
    res = truncated_svd(a, 3)
    residual = frobenius_norm(a - res.reconstruct())
    sv_oracle = eigh_singular_values(a)
    expected = float(np.sqrt(np.sum(sv_oracle[3:] ** 2)))
    assert rel_err(residual, expected) < 1e-9


def test_truncated_svd_orthogonality():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((8, 6))
    res = truncated_svd(a, 4)
    assert np.abs(res.u.T @ res.u - np.eye(4)).max() < 1e-10
    assert np.abs(res.vt @ res.vt.T - np.eye(4)).max() < 1e-10
    assert np.all(np.diff(res.singular_values) <= 0)
    assert np.all(res.singular_values >= 0)


@pytest.mark.parametrize("k", [0, 6, -1])
def test_truncated_svd_k_out_of_range(k):
    with pytest.raises(LinalgError):
        truncated_svd(np.eye(5), k)


def test_truncated_svd_rejects_non_finite():
    a = np.eye(3)
    a[1, 1] = np.nan
    with pytest.raises(LinalgError):
        truncated_svd(a, 1)


def test_eckart_young_beats_random_competitors():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = int(rng.integers(2, 9))
        n = int(rng.integers(2, 9))
        a = rng.standard_normal((m, n))
        k = int(rng.integers(1, min(m, n) + 1))
        res = truncated_svd(a, k)
        ours = frobenius_norm(a - res.reconstruct())
        sv = singular_values(a)
        assert rel_err(ours, svd_tail_norm(sv, k)) < 1e-9 or ours < 1e-12
        for _ in range(100):
            alt = rng.standard_normal((m, k)) @ rng.standard_normal((k, n))
            assert ours < frobenius_norm(a - alt)


def test_cholesky_identity():
    assert np.array_equal(cholesky_factor(np.eye(3)), np.eye(3))


def test_cholesky_worked_example():
    a = np.array([[4.0, 2.0], [2.0, 3.0]])
    lower = cholesky_factor(a)
    assert np.allclose(lower, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-12)
    assert frobenius_norm(lower @ lower.T - a) / frobenius_norm(a) < 1e-9


def test_cholesky_roundtrip_random_pd():
    rng = np.random.default_rng(6)
    for _ in range(10):
        a = rng.standard_normal((6, 4))
        gram = a.T @ a + 0.1 * np.eye(4)
        gram = 0.5 * (gram + gram.T)
        lower = cholesky_factor(gram)
        assert np.allclose(np.triu(lower, 1), 0.0)
        assert frobenius_norm(lower @ lower.T - gram) / frobenius_norm(gram) < 1e-9


def test_cholesky_rejects_asymmetric():
    with pytest.raises(LinalgError, match="symmetric"):
        cholesky_factor(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_cholesky_signals_non_positive_pivot():
    with pytest.raises(NotPositiveDefiniteError):
        cholesky_factor(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_triangular_solve_identity():
    b = np.arange(6.0).reshape(3, 2)
    assert np.allclose(triangular_solve(np.eye(3), b), b)


def test_triangular_solve_worked_example():
    t = np.array([[2.0, 0.0], [1.0, 1.0]])
    b = np.array([[2.0], [3.0]])
    z = triangular_solve(t, b, side="left", tri="lower")
    assert np.allclose(z, [[1.0], [2.0]], atol=1e-12)
    assert np.allclose(t @ z, b, atol=1e-12)


def test_triangular_solve_right_side_residual():
    rng = np.random.default_rng(7)
    t = np.triu(rng.standard_normal((8, 8))) + 4.0 * np.eye(8)
    b = rng.standard_normal((5, 8))
    z = triangular_solve(t, b, side="right", tri="upper")
    assert frobenius_norm(z @ t - b) / frobenius_norm(b) < 1e-10


def test_triangular_solve_roundtrip_invariant():
    rng = np.random.default_rng(8)
    t = np.tril(rng.standard_normal((6, 6))) + 3.0 * np.eye(6)
    z = rng.standard_normal((6, 4))
    back = triangular_solve(t, t @ z, side="left", tri="lower")
    assert frobenius_norm(back - z) / frobenius_norm(z) < 1e-9


def test_triangular_solve_rejects_near_zero_diagonal():
    t = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(SingularTriangularError):
        triangular_solve(t, np.eye(2))


def test_triangular_solve_rejects_non_triangular():
    t = np.ones((3, 3))
    with pytest.raises(LinalgError, match="triangular"):
        triangular_solve(t, np.eye(3), tri="lower")


def test_frobenius_norm_zero_matrix():
    assert frobenius_norm(np.zeros((4, 3))) == 0.0


def test_frobenius_norm_three_four_five():
    assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0


def test_frobenius_norm_equals_singular_value_energy():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((6, 9))
    sv = singular_values(a)
    assert rel_err(frobenius_norm(a), float(np.sqrt(np.sum(sv**2)))) < 1e-12


def test_tail_identity():
    rng = np.random.default_rng(10)
    for _ in range(10):
        a = rng.standard_normal((7, 5))
        sv = singular_values(a)
        for k in range(1, 6):
            res = truncated_svd(a, k)
            lhs = frobenius_norm(a - res.reconstruct()) ** 2
            rhs = float(np.sum(sv[k:] ** 2))
            if rhs > 0:
                assert rel_err(lhs, rhs) < 1e-9
            else:
                assert lhs < 1e-18
