import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from flexshift.exceptions import IllConditionedReduction, RankDeficient, SingularMatrix
from flexshift.linalg_core import (
    as_sparse,
    banded_lu_factor,
    bandwidths,
    givens_hessenberg_qr,
    hessenberg_lstsq,
    read_matrix,
    read_vector,
    small_generalized_eig,
    spmv,
    write_matrix,
    write_vector,
)


def random_banded(rng, n, bw, shift=4.0):
    A = sp.random(n, n, density=0.5, random_state=rng, dtype=float)
    A = sp.triu(sp.tril(A, bw), -bw) + 1j * sp.triu(sp.tril(sp.random(n, n, 0.5, random_state=rng), bw), -bw)
    return (A + shift * sp.eye(n)).tocsr()


class TestSpmv:
    def test_identity(self):
        x = np.array([1 + 2j, 3])
        np.testing.assert_array_equal(spmv(as_sparse(sp.eye(2)), x), x)

    def test_permutation(self):
        P = as_sparse(np.array([[0, 1], [1, 0]]))
        np.testing.assert_array_equal(spmv(P, np.array([2.0, 5.0])), [5.0, 2.0])

    def test_against_dense(self, rng):
        A = as_sparse(sp.random(5, 5, density=0.4, random_state=rng) + 1j * sp.random(5, 5, density=0.4,
                                                                                       random_state=rng))
        x = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        assert np.max(np.abs(spmv(A, x) - A.toarray() @ x)) < 1e-14

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            spmv(as_sparse(sp.eye(3)), np.ones(2))

    def test_canonical_form(self):
        A = sp.csr_matrix((np.array([1.0, 0.0, 2.0, 3.0]), np.array([1, 0, 1, 0]), np.array([0, 2, 4])),
                          shape=(2, 2))
        C = as_sparse(A)
        assert C.has_sorted_indices
        assert np.all(C.data != 0)
        assert C.dtype == np.complex128


class TestBandedLU:
    def test_diagonal(self):
        f = banded_lu_factor(sp.diags([2.0, 4.0]), bandwidth=0)
        np.testing.assert_allclose(f.solve(np.array([2.0, 4.0])), [1, 1])

    def test_tridiagonal_residual(self, rng):
        n = 50
        A = sp.diags([-np.ones(n - 1), 4 + 1j * rng.random(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()
        b = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        x = banded_lu_factor(A, 1).solve(b)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= 1e-12

    def test_pivoting_needed(self):
        # zero leading diagonal entry forces a row swap
        A = sp.csr_matrix(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 2.0]]))
        b = np.array([1.0, 2.0, 3.0])
        x = banded_lu_factor(A).solve(b)
        np.testing.assert_allclose(A @ x, b, atol=1e-14)

    def test_singular(self):
        A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
        with pytest.raises(SingularMatrix) as exc:
            banded_lu_factor(A)
        assert exc.value.pivot_index == 1

    def test_bandwidth_violation(self):
        A = sp.csr_matrix(np.array([[1.0, 0, 1.0], [0, 1.0, 0], [0, 0, 1.0]]))
        with pytest.raises(ValueError):
            banded_lu_factor(A, bandwidth=1)

    def test_bandwidths(self):
        A = sp.diags([1, 1, 1, 1], [-2, 0, 1, 3], shape=(6, 6))
        assert bandwidths(A) == (2, 3)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(2, 40), bw=st.integers(0, 5), seed=st.integers(0, 2**31 - 1))
    def test_solve_identity_property(self, n, bw, seed):
        """Applying the factorization to A reproduces the identity."""
        rng = np.random.default_rng(seed)
        A = random_banded(rng, n, bw, shift=3.0 * (bw + 1))
        f = banded_lu_factor(A, bandwidth=bw)
        X = f.solve(A.toarray())
        cond = np.linalg.cond(A.toarray())
        assert np.max(np.abs(X - np.eye(n))) <= 1e3 * np.finfo(float).eps * cond * n


class TestHessenberg:
    def test_qr_triangular_and_orthogonal(self, rng):
        m = 6
        H = np.triu(rng.standard_normal((m + 1, m)) + 1j * rng.standard_normal((m + 1, m)), -1)
        g0 = np.zeros(m + 1, complex)
        g0[0] = 1.0
        R, g, rot = givens_hessenberg_qr(H, g0)
        assert len(rot) == m
        assert np.allclose(np.tril(R, -1), 0)
        # rotations preserve norm of the right-hand side
        assert np.isclose(np.linalg.norm(g), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(m=st.integers(1, 25), seed=st.integers(0, 2**31 - 1))
    def test_lstsq_matches_numpy(self, m, seed):
        rng = np.random.default_rng(seed)
        H = np.triu(rng.standard_normal((m + 1, m)) + 1j * rng.standard_normal((m + 1, m)), -1)
        H[np.arange(1, m + 1), np.arange(m)] = 0.5 + rng.random(m)
        rhs = np.zeros(m + 1, complex)
        rhs[0] = 2.0
        y, res = hessenberg_lstsq(H, rhs)
        y_ref = np.linalg.lstsq(H, rhs, rcond=None)[0]
        assert np.linalg.norm(y - y_ref) <= 1e-9 * max(1.0, np.linalg.norm(y_ref))
        assert np.isclose(res, np.linalg.norm(rhs - H @ y), rtol=1e-8, atol=1e-14)

    def test_rank_deficient(self):
        H = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
        with pytest.raises(RankDeficient):
            hessenberg_lstsq(H, np.array([1.0, 0, 0]))


class TestGeneralizedEig:
    def test_diagonal_pencil(self):
        A = np.diag([6.0, 2.0, 3.0])
        B = np.diag([3.0, 1.0, 1.0])
        theta, F = small_generalized_eig(A, B)
        np.testing.assert_allclose(theta, [2.0, 2.0, 3.0])
        np.testing.assert_allclose(np.linalg.norm(F, axis=0), 1.0)

    def test_pencil_residual(self, rng):
        A = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
        B = rng.standard_normal((8, 8)) + 4 * np.eye(8)
        theta, F = small_generalized_eig(A, B)
        assert np.max(np.abs(A @ F - B @ F * theta)) < 1e-10 * np.linalg.norm(A)

    def test_ill_conditioned(self):
        with pytest.raises(IllConditionedReduction):
            small_generalized_eig(np.eye(2), np.diag([1.0, 1e-16]))


def test_matrix_market_roundtrip(tmp_path, rng):
    A = as_sparse(sp.random(7, 7, density=0.3, random_state=rng) * (1 + 2j) + sp.eye(7))
    x = rng.standard_normal(7) + 1j * rng.standard_normal(7)
    write_matrix(tmp_path / "A.mtx", A)
    write_vector(tmp_path / "x.mtx", x)
    assert abs(read_matrix(tmp_path / "A.mtx") - A).max() < 1e-14
    assert np.max(np.abs(read_vector(tmp_path / "x.mtx") - x)) < 1e-14
