import numpy as np
import pytest
import scipy.sparse as sp

from flexshift.shifted_krylov import PreconditionerSchedule, ShiftedFamily, default_tau_schedule


def grid_laplacian(nx, ny, rng, contrast=1.0):
    """5-point operator with random positive edge weights (symmetric positive definite)."""
    n = nx * ny
    idx = np.arange(n).reshape(ny, nx)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    c = np.exp(contrast * rng.standard_normal(len(a)))
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([c, c, -c, -c])
    K = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return (K + sp.diags(0.1 + rng.random(n))).tocsr()


def random_family(rng, n=None, n_f=5, omega=(0.1, 5.0), real_part=False):
    """Random SPD-stiffness / diagonal-mass family with imaginary shifts."""
    if n is None:
        nx = int(rng.integers(3, 9))
        ny = int(rng.integers(3, 9))
    else:
        nx = int(np.sqrt(n))
        ny = n // nx
    K = grid_laplacian(nx, ny, rng)
    M = sp.diags(0.5 + rng.random(K.shape[0])).tocsr()
    b = rng.standard_normal(K.shape[0]) + 1j * rng.standard_normal(K.shape[0])
    shifts = 1j * rng.uniform(*omega, n_f)
    if real_part:
        shifts = shifts + rng.uniform(0, 1, n_f)
    return ShiftedFamily(K, M, b, shifts)


def schedule_for(family, m, n_p=3, **kw):
    w = np.abs(family.shifts.imag)
    if np.isclose(w.min(), w.max()):
        return PreconditionerSchedule.constant(1j * w.min(), m, **kw)
    return default_tau_schedule((w.min(), w.max()), min(n_p, m), m, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
