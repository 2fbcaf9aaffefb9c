"""Complex sparse and small dense kernels shared by the solvers.

Sparse matrices are ``scipy.sparse.csr_matrix`` objects in canonical form
(sorted column indices, no duplicates, no stored zeros, complex128).  Small
dense matrices are plain ``numpy`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.linalg import lapack

from .exceptions import IllConditionedReduction, RankDeficient, SingularMatrix

__all__ = [
    "as_sparse",
    "spmv",
    "bandwidths",
    "BandedFactorization",
    "banded_lu_factor",
    "givens_hessenberg_qr",
    "hessenberg_lstsq",
    "small_generalized_eig",
    "read_matrix",
    "write_matrix",
    "read_vector",
    "write_vector",
]

_RANK_RTOL = 1e-14
_EIG_COND_LIMIT = 1e14


def as_sparse(A) -> sp.csr_matrix:
    """Return `A` as a canonical complex CSR matrix (a copy)."""
    A = sp.csr_matrix(A, dtype=np.complex128, copy=True)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def spmv(A: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product ``A @ x``.

    Each row is accumulated in ascending column order, so results are
    reproducible for a given matrix.
    """
    x = np.asarray(x)
    if x.ndim != 1 or A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, x has shape {x.shape}")
    return A @ x


def bandwidths(A) -> tuple[int, int]:
    """Lower and upper bandwidth of a sparse matrix."""
    A = sp.coo_matrix(A)
    if A.nnz == 0:
        return 0, 0
    d = A.col.astype(np.int64) - A.row.astype(np.int64)
    return int(max(0, -d.min())), int(max(0, d.max()))


@dataclass(frozen=True)
class BandedFactorization:
    """LU factors with partial pivoting of a banded matrix (LAPACK ``gbtrf`` layout)."""

    n: int
    lower: int
    upper: int
    lu: np.ndarray
    piv: np.ndarray

    @property
    def bandwidth(self) -> int:
        return max(self.lower, self.upper)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.complex128)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.n}")
        x, info = lapack.zgbtrs(self.lu, self.lower, self.upper, b, self.piv)
        if info != 0:
            raise RuntimeError(f"zgbtrs failed with info={info}")
        return x


def banded_lu_factor(A, bandwidth: int | None = None) -> BandedFactorization:
    """Factorize a banded sparse matrix with partial pivoting.

    Parameters
    ----------
    A : sparse matrix, square
    bandwidth : int, optional
        Declared half-bandwidth.  Every entry must satisfy ``|i - j| <= bandwidth``.
        When omitted, the actual lower and upper bandwidths are used.

    Raises
    ------
    SingularMatrix
        If an exactly zero pivot is met; ``pivot_index`` is zero-based.
    """
    A = sp.coo_matrix(A)
    n, ncols = A.shape
    if n != ncols:
        raise ValueError("banded LU requires a square matrix")
    kl, ku = bandwidths(A)
    if bandwidth is not None:
        if kl > bandwidth or ku > bandwidth:
            raise ValueError(
                f"entries outside declared bandwidth {bandwidth} (lower={kl}, upper={ku})"
            )
        kl = ku = int(bandwidth)
    ab = np.zeros((2 * kl + ku + 1, n), dtype=np.complex128)
    np.add.at(ab, (kl + ku + A.row - A.col, A.col), A.data.astype(np.complex128))
    lu, piv, info = lapack.zgbtrf(ab, kl, ku, overwrite_ab=1)
    if info > 0:
        raise SingularMatrix(info - 1)
    if info < 0:
        raise ValueError(f"zgbtrf: illegal argument {-info}")
    return BandedFactorization(n=n, lower=kl, upper=ku, lu=lu, piv=piv)


def _givens(a: complex, b: complex) -> tuple[float, complex]:
    # Rotation [[c, s], [-conj(s), c]] mapping (a, b) to (r, 0).
    if b == 0:
        return 1.0, 0.0
    if a == 0:
        return 0.0, 1.0
    r = np.hypot(abs(a), abs(b))
    return abs(a) / r, (a / abs(a)) * np.conj(b) / r


def givens_hessenberg_qr(H: np.ndarray, rhs: np.ndarray):
    """Triangularize an (m+1) x m upper Hessenberg matrix with Givens rotations.

    Returns ``(R, g, rotations)`` where ``R`` is m x m upper triangular, ``g`` is
    the rotated right-hand side of length m+1 and ``rotations`` is the list of
    ``(c, s)`` pairs applied, one per column.
    """
    R = np.array(H, dtype=np.complex128)
    g = np.array(rhs, dtype=np.complex128)
    mp1, m = R.shape
    if mp1 != m + 1 or g.shape != (mp1,):
        raise ValueError(f"expected (m+1) x m Hessenberg and length m+1 rhs, got {R.shape}, {g.shape}")
    rotations = []
    for k in range(m):
        c, s = _givens(R[k, k], R[k + 1, k])
        rk = R[k, k:].copy()
        R[k, k:] = c * rk + s * R[k + 1, k:]
        R[k + 1, k:] = -np.conj(s) * rk + c * R[k + 1, k:]
        R[k + 1, k] = 0.0
        gk = g[k]
        g[k] = c * gk + s * g[k + 1]
        g[k + 1] = -np.conj(s) * gk + c * g[k + 1]
        rotations.append((c, s))
    return R[:m], g, rotations


def _back_substitute(R: np.ndarray, g: np.ndarray) -> np.ndarray:
    m = R.shape[0]
    y = np.zeros(m, dtype=np.complex128)
    for i in range(m - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y


def hessenberg_lstsq(H: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve ``min ||rhs - H y||_2`` for an (m+1) x m Hessenberg matrix.

    Returns the minimizer and the attained residual norm.

    Raises
    ------
    RankDeficient
        If a diagonal entry of the triangular factor is negligible.
    """
    H = np.asarray(H)
    m = H.shape[1]
    if m == 0:
        return np.zeros(0, dtype=np.complex128), float(np.linalg.norm(rhs))
    R, g, _ = givens_hessenberg_qr(H, rhs)
    scale = np.linalg.norm(H)
    diag = np.abs(np.diag(R))
    if scale == 0 or diag.min() <= _RANK_RTOL * scale:
        raise RankDeficient(f"Hessenberg matrix is rank deficient (min |R_kk| = {diag.min():.3e})")
    return _back_substitute(R, g[:m]), float(abs(g[m]))


def small_generalized_eig(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of the pencil ``A f = theta B f`` through ``B^{-1} A``.

    The reduced matrix is handed to LAPACK's Hessenberg QR iteration.  Eigenvalues
    are sorted by real part, then imaginary part; eigenvector columns have unit
    2-norm.
    """
    A = np.asarray(A, dtype=np.complex128)
    B = np.asarray(B, dtype=np.complex128)
    if A.shape != B.shape or A.shape[0] != A.shape[1]:
        raise ValueError("A and B must be square and of equal size")
    cond = np.linalg.cond(B)
    if not np.isfinite(cond) or cond > _EIG_COND_LIMIT:
        raise IllConditionedReduction(cond)
    theta, F = np.linalg.eig(np.linalg.solve(B, A))
    order = np.lexsort((theta.imag, theta.real))
    theta, F = theta[order], F[:, order]
    F = F / np.linalg.norm(F, axis=0)
    return theta, F


def read_matrix(path) -> sp.csr_matrix:
    """Read a Matrix Market coordinate file."""
    return as_sparse(scipy.io.mmread(str(path)))


def write_matrix(path, A) -> None:
    """Write a sparse matrix as Matrix Market coordinate (complex general)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A, dtype=np.complex128), field="complex", symmetry="general")


def read_vector(path) -> np.ndarray:
    """Read a single-column Matrix Market array (or coordinate) file as a vector."""
    data = scipy.io.mmread(str(path))
    if sp.issparse(data):
        data = data.toarray()
    data = np.asarray(data)
    if data.ndim == 2 and data.shape[1] != 1:
        raise ValueError(f"expected a single column, got shape {data.shape}")
    return data.reshape(-1).astype(np.complex128)


def write_vector(path, x) -> None:
    """Write a vector as a single-column Matrix Market array."""
    x = np.asarray(x, dtype=np.complex128).reshape(-1, 1)
    scipy.io.mmwrite(str(path), x, field="complex")
