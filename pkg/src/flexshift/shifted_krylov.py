"""Flexible FOM/GMRES for families of shifted systems ``(K + sigma_j M) x_j = b``.

A single search space is built by flexible Arnoldi with preconditioners
``K + tau_k M`` that may change from one iteration to the next.  Every shift is
then solved from a small projected problem:

    (K + sigma M) Z_m = V_{m+1} ([I; 0] + Hbar_m (sigma I - T_m))

so the number of operator applications does not depend on how many shifts
are requested.
"""

from __future__ import annotations

import time
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import ConfigError, FomSingular, RankDeficient, Unsupported
from .inexact_precond import InexactPreconditioner, true_residual_bound
from .linalg_core import as_sparse, banded_lu_factor, hessenberg_lstsq, spmv

__all__ = [
    "ShiftedFamily",
    "PreconditionerSchedule",
    "KrylovBasis",
    "ShiftSolution",
    "OperatorCounts",
    "ConvergenceReport",
    "SolverConfig",
    "DirectPreconditioner",
    "make_preconditioner",
    "default_tau_schedule",
    "schedule_from_config",
    "flexible_arnoldi_extend",
    "assemble_shifted_hessenberg",
    "solve_subproblem_fom",
    "solve_subproblem_gmres",
    "restart_fom_collinear",
    "run_shifted_solver",
    "direct_solve_shifts",
    "single_tau_gmres",
]

_BREAKDOWN_RTOL = 1e-13
_SINGULAR_RTOL = 1e-14


@dataclass
class ShiftedFamily:
    """Matrices ``K``, ``M``, right-hand side ``b`` and the shifts ``sigma_j``."""

    K: sp.csr_matrix
    M: sp.csr_matrix
    b: np.ndarray
    shifts: np.ndarray

    def __post_init__(self):
        self.K = as_sparse(self.K)
        self.M = as_sparse(self.M)
        self.b = np.asarray(self.b, dtype=np.complex128).reshape(-1)
        self.shifts = np.atleast_1d(np.asarray(self.shifts, dtype=np.complex128))
        n = self.K.shape[0]
        if self.K.shape != (n, n) or self.M.shape != (n, n) or self.b.shape != (n,):
            raise ValueError(
                f"incompatible family: K {self.K.shape}, M {self.M.shape}, b {self.b.shape}"
            )

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def operator(self, sigma: complex) -> sp.csr_matrix:
        return (self.K + sigma * self.M).tocsr()

    def with_shifts(self, shifts) -> "ShiftedFamily":
        return ShiftedFamily(self.K, self.M, self.b, shifts)

    def residual(self, sigma: complex, x: np.ndarray, rhs: np.ndarray | None = None) -> np.ndarray:
        rhs = self.b if rhs is None else rhs
        return rhs - spmv(self.K, x) - sigma * spmv(self.M, x)


@dataclass(frozen=True)
class PreconditionerSchedule:
    """Distinct preconditioner shifts and how many consecutive iterations use each.

    The first ``block_sizes[0]`` Arnoldi steps use ``distinct_taus[0]``, the
    next ``block_sizes[1]`` use ``distinct_taus[1]``, and so on.  Past ``m``
    the sequence repeats.
    """

    distinct_taus: tuple
    block_sizes: tuple
    backend: str = "direct"
    inner_tol: float = 1e-12
    inner_max_iter: int = 20000

    def __post_init__(self):
        taus = tuple(complex(t) for t in self.distinct_taus)
        blocks = tuple(int(b) for b in self.block_sizes)
        object.__setattr__(self, "distinct_taus", taus)
        object.__setattr__(self, "block_sizes", blocks)
        if len(taus) == 0 or len(taus) != len(blocks):
            raise ValueError("need one block size per distinct tau")
        if len(set(taus)) != len(taus):
            raise ValueError("distinct_taus contains repeated values")
        if any(b <= 0 for b in blocks):
            raise ValueError("block sizes must be positive")
        if self.backend not in ("direct", "inexact"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "inexact" and not self.inner_tol > 0:
            raise ValueError("inexact backend needs inner_tol > 0")

    @classmethod
    def constant(cls, tau: complex, m: int, **kwargs) -> "PreconditionerSchedule":
        return cls((tau,), (m,), **kwargs)

    @property
    def m(self) -> int:
        return sum(self.block_sizes)

    @property
    def n_p(self) -> int:
        return len(self.distinct_taus)

    @property
    def sequence(self) -> np.ndarray:
        return np.repeat(np.array(self.distinct_taus, dtype=np.complex128), self.block_sizes)

    def tau(self, k: int) -> complex:
        """Preconditioner shift for zero-based Arnoldi step ``k``."""
        k %= self.m
        for tau, size in zip(self.distinct_taus, self.block_sizes):
            if k < size:
                return tau
            k -= size
        raise AssertionError("unreachable")


def default_tau_schedule(shift_range, n_p: int, m: int, **kwargs) -> PreconditionerSchedule:
    """Purely imaginary preconditioner shifts, log-spaced over ``[w_min, w_max]``.

    Blocks run from the smallest ``|tau|`` to the largest; when ``n_p`` does
    not divide ``m`` the remainder goes to the earliest blocks.
    """
    w_min, w_max = (float(w) for w in shift_range)
    if not 0 < w_min < w_max:
        raise ValueError("need 0 < w_min < w_max")
    if n_p < 1 or n_p > m:
        raise ValueError(f"n_p={n_p} must be between 1 and m={m}")
    mags = np.array([w_min]) if n_p == 1 else np.geomspace(w_min, w_max, n_p)
    base, rem = divmod(m, n_p)
    blocks = [base + (1 if i < rem else 0) for i in range(n_p)]
    return PreconditionerSchedule(tuple(1j * mags), tuple(blocks), **kwargs)


@dataclass
class OperatorCounts:
    """Work counters; these are what the solver promises about cost."""

    m_applications: int = 0
    precond_solves: int = 0
    factorizations: int = 0
    inner_iterations: int = 0
    inner_matvecs: int = 0
    certificate_matvecs: int = 0
    test_matvecs: int = 0

    def snapshot(self) -> "OperatorCounts":
        return replace(self)

    def since(self, start: "OperatorCounts") -> "OperatorCounts":
        return OperatorCounts(
            **{f.name: getattr(self, f.name) - getattr(start, f.name) for f in fields(self)}
        )

    @property
    def operator_applications(self) -> int:
        return self.m_applications + self.precond_solves

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["operator_applications"] = self.operator_applications
        return d


class DirectPreconditioner:
    """Banded LU of ``K + tau M``; one factorization per distinct tau, cached."""

    exact = True

    def __init__(self, K, M, counts: OperatorCounts | None = None):
        self.K = as_sparse(K)
        self.M = as_sparse(M)
        self.counts = counts if counts is not None else OperatorCounts()
        self._factors = {}

    def factor(self, tau: complex):
        tau = complex(tau)
        if tau not in self._factors:
            self._factors[tau] = banded_lu_factor(self.K + tau * self.M)
            self.counts.factorizations += 1
        return self._factors[tau]

    def prepare(self, taus, threads: int = 1) -> None:
        todo = [complex(t) for t in dict.fromkeys(taus) if complex(t) not in self._factors]
        if threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda t: banded_lu_factor(self.K + t * self.M), todo))
            for t, f in zip(todo, results):
                self._factors[t] = f
                self.counts.factorizations += 1
        else:
            for t in todo:
                self.factor(t)

    def apply(self, tau: complex, v: np.ndarray) -> np.ndarray:
        self.counts.precond_solves += 1
        return self.factor(tau).solve(v)


def make_preconditioner(family: ShiftedFamily, schedule: PreconditionerSchedule,
                        counts: OperatorCounts | None = None):
    if schedule.backend == "direct":
        return DirectPreconditioner(family.K, family.M, counts)
    return InexactPreconditioner(
        family.K, family.M, schedule.inner_tol, max_iter=schedule.inner_max_iter, counts=counts
    )


class KrylovBasis:
    """Storage for V (orthonormal), Z (preconditioned), Hbar and the tau diagonal.

    Only the first ``k`` columns are meaningful; ``V`` has ``k + 1`` valid columns.
    When ``store_residuals`` is set, the inner-solve residuals
    ``p_k = v_k - (K + tau_k M) z_k`` are kept in ``P`` (one extra product each).
    """

    def __init__(self, start: np.ndarray, max_m: int, store_residuals: bool = False):
        start = np.asarray(start, dtype=np.complex128)
        n = start.shape[0]
        self.n = n
        self.max_m = int(max_m)
        self.beta = float(np.linalg.norm(start))
        self.V = np.zeros((n, max_m + 1), dtype=np.complex128)
        self.Z = np.zeros((n, max_m), dtype=np.complex128)
        self.H = np.zeros((max_m + 1, max_m), dtype=np.complex128)
        self.taus = np.zeros(max_m, dtype=np.complex128)
        self.P = np.zeros((n, max_m), dtype=np.complex128) if store_residuals else None
        self.k = 0
        self.breakdown = self.beta == 0
        self.exact = True
        if self.beta > 0:
            self.V[:, 0] = start / self.beta

    @property
    def Vm(self) -> np.ndarray:
        return self.V[:, : self.k]

    @property
    def Vm1(self) -> np.ndarray:
        return self.V[:, : self.k + 1]

    @property
    def Zm(self) -> np.ndarray:
        return self.Z[:, : self.k]

    @property
    def Hbar(self) -> np.ndarray:
        return self.H[: self.k + 1, : self.k]

    @property
    def T(self) -> np.ndarray:
        return self.taus[: self.k]

    @property
    def Pm(self) -> np.ndarray | None:
        return None if self.P is None else self.P[:, : self.k]

    def shifted_hessenberg(self, sigma: complex) -> np.ndarray:
        m = self.k
        Hs = self.H[: m + 1, :m] * (sigma - self.taus[:m])[None, :]
        Hs[np.arange(m), np.arange(m)] += 1.0
        return Hs


def flexible_arnoldi_extend(family: ShiftedFamily, schedule: PreconditionerSchedule,
                            basis: KrylovBasis, steps: int = 1, preconditioner=None,
                            *, reorthogonalize: bool = True) -> KrylovBasis:
    """Add up to `steps` columns to `basis` with modified Gram-Schmidt.

    Column k solves ``(K + tau_k M) z_k = v_k``, sets ``w = M z_k`` and
    orthogonalizes ``w`` against ``v_1 .. v_k``.  A second classical
    Gram-Schmidt pass runs when the norm of ``w`` drops below ``1/sqrt(2)`` of
    its starting value (skipped when ``reorthogonalize`` is false).

    When ``h_{k+1,k}`` vanishes the basis is flagged with ``breakdown`` and
    extension stops: the search space then holds exact solutions.
    """
    if preconditioner is None:
        preconditioner = make_preconditioner(family, schedule)
    counts = preconditioner.counts
    basis.exact = basis.exact and getattr(preconditioner, "exact", True)
    for _ in range(steps):
        if basis.breakdown:
            break
        k = basis.k
        if k >= basis.max_m:
            raise ValueError(f"basis is full ({basis.max_m} columns)")
        tau = schedule.tau(k)
        v = basis.V[:, k]
        z = preconditioner.apply(tau, v)
        if basis.P is not None:
            basis.P[:, k] = v - spmv(family.K, z) - tau * spmv(family.M, z)
            counts.test_matvecs += 2
        w = spmv(family.M, z)
        counts.m_applications += 1
        w_norm0 = np.linalg.norm(w)
        h = np.zeros(k + 2, dtype=np.complex128)
        for i in range(k + 1):
            h[i] = np.vdot(basis.V[:, i], w)
            w -= h[i] * basis.V[:, i]
        if reorthogonalize and np.linalg.norm(w) < w_norm0 / np.sqrt(2.0):
            Vk = basis.V[:, : k + 1]
            c = Vk.conj().T @ w
            w -= Vk @ c
            h[: k + 1] += c
        h_next = np.linalg.norm(w)
        basis.Z[:, k] = z
        basis.taus[k] = tau
        if h_next <= _BREAKDOWN_RTOL * w_norm0:
            basis.H[: k + 1, k] = h[: k + 1]
            basis.breakdown = True
        else:
            h[k + 1] = h_next
            basis.H[: k + 2, k] = h
            basis.V[:, k + 1] = w / h_next
        basis.k = k + 1
    return basis


def assemble_shifted_hessenberg(basis: KrylovBasis, sigma: complex) -> np.ndarray:
    """``[I; 0] + Hbar (sigma I - T)`` for the current basis size."""
    return basis.shifted_hessenberg(sigma)


@dataclass
class ShiftSolution:
    """Approximate solution for one shift.

    ``residual_history`` holds ``(iteration, residual_estimate)`` pairs where the
    estimate is absolute (divide by ``||b||`` for the relative value).
    """

    sigma: complex
    y: np.ndarray
    x: np.ndarray
    method: str
    residual_history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    true_residual: float | None = None
    error: str | None = None
    index: int = 0

    @property
    def residual_estimate(self) -> float:
        return self.residual_history[-1][1] if self.residual_history else float("inf")


def _fom_coefficients(Hs: np.ndarray, rhs: complex) -> tuple[np.ndarray, float]:
    m = Hs.shape[1]
    e1 = np.zeros(m, dtype=np.complex128)
    e1[0] = rhs
    if rhs == 0:
        return e1, 0.0
    Hm = Hs[:m]
    with warnings.catch_warnings():
        # an exactly zero pivot is reported below as FomSingular
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(Hm, check_finite=False)
    if np.abs(np.diag(lu)).min() <= _SINGULAR_RTOL * max(np.linalg.norm(Hm), 1e-300):
        raise FomSingular("H_m(sigma; T_m) is singular")
    y = sla.lu_solve((lu, piv), e1, check_finite=False)
    return y, float(abs(Hs[m, m - 1] * y[m - 1]))


def _gmres_coefficients(Hs: np.ndarray, rhs: complex) -> tuple[np.ndarray, float]:
    m = Hs.shape[1]
    g = np.zeros(m + 1, dtype=np.complex128)
    g[0] = rhs
    if rhs == 0:
        return g[:m], 0.0
    return hessenberg_lstsq(Hs, g)


def _coefficients(method: str, Hs: np.ndarray, rhs: complex):
    if method == "fom":
        return _fom_coefficients(Hs, rhs)
    if method == "gmres":
        return _gmres_coefficients(Hs, rhs)
    raise ValueError(f"unknown method {method!r}")


def solve_subproblem_fom(basis: KrylovBasis, sigma: complex, rhs: complex | None = None) -> ShiftSolution:
    """Galerkin solution ``H_m(sigma; T_m) y = rhs e_1`` and ``x = Z y``.

    The residual estimate is ``|h_{m+1,m} (sigma - tau_m) e_m^* y|``.
    """
    rhs = basis.beta if rhs is None else rhs
    y, est = _fom_coefficients(basis.shifted_hessenberg(sigma), rhs)
    return ShiftSolution(sigma, y, basis.Zm @ y, "fom", [(basis.k, est)], iterations=basis.k)


def solve_subproblem_gmres(basis: KrylovBasis, sigma: complex, rhs: complex | None = None) -> ShiftSolution:
    """Minimum-residual solution over span(Z) and ``x = Z y``."""
    rhs = basis.beta if rhs is None else rhs
    try:
        y, est = _gmres_coefficients(basis.shifted_hessenberg(sigma), rhs)
    except RankDeficient as exc:
        raise RankDeficient(f"shift {sigma}: {exc}") from exc
    return ShiftSolution(sigma, y, basis.Zm @ y, "gmres", [(basis.k, est)], iterations=basis.k)


def restart_fom_collinear(solutions, basis: KrylovBasis):
    """New start vector and per-shift scalars for a collinear FOM restart.

    Every FOM residual is a multiple of ``v_{m+1}``:
    ``r_j = -h_{m+1,m} (sigma_j - tau_m) (e_m^* y_j) v_{m+1}``.  The next cycle
    starts from ``v_{m+1}`` and solves shift j with right-hand side
    ``beta_j' e_1``.
    """
    m = basis.k
    h = basis.H[m, m - 1]
    tau_m = basis.taus[m - 1]
    scalings = []
    for sol in solutions:
        if sol.method != "fom":
            raise Unsupported("collinear restarting is only available for FOM")
        scalings.append(-h * (sol.sigma - tau_m) * sol.y[m - 1])
    return basis.V[:, m].copy(), np.array(scalings, dtype=np.complex128)


@dataclass
class ConvergenceReport:
    """Outcome of a shifted solve: counters, iteration totals and the convergence log."""

    method: str
    backend: str
    counts: OperatorCounts
    iterations: int
    cycles: int
    converged: bool
    breakdown: bool
    wall_time: float
    log: list = field(default_factory=list)
    inner_records: list = field(default_factory=list)


@dataclass
class SolverConfig:
    """Solver settings; mirrors the JSON solver configuration."""

    method: str = "fom"
    tol: float = 1e-10
    max_m: int = 40
    n_p: int = 5
    tau_mode: str = "log"
    taus: tuple = ()
    backend: str = "direct"
    inner_tol: float = 1e-12
    inner_max_iter: int = 20000
    restart: bool = True
    max_restarts: int = 10
    check_every: int = 1
    reorthogonalize: bool = True
    test_mode_store_P: bool = False
    inner_solver: str = "bicgstab"
    baseline_restart: int = 30
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown solver config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.taus = tuple(cfg.taus)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.method not in ("fom", "gmres"):
            raise ConfigError(f"method must be 'fom' or 'gmres', got {self.method!r}")
        if self.backend not in ("direct", "inexact"):
            raise ConfigError(f"backend must be 'direct' or 'inexact', got {self.backend!r}")
        if self.tau_mode not in ("log", "explicit"):
            raise ConfigError(f"tau_mode must be 'log' or 'explicit', got {self.tau_mode!r}")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.inner_solver != "bicgstab":
            raise ConfigError("only the 'bicgstab' inner solver is available")
        if self.tau_mode == "explicit" and not self.taus:
            raise ConfigError("tau_mode 'explicit' needs a non-empty taus list")

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["taus"] = list(d["taus"])
        return d


def schedule_from_config(config: SolverConfig, shift_range) -> PreconditionerSchedule:
    """Build the preconditioner schedule described by `config`.

    Explicit ``taus`` are preconditioner frequencies; they are used as ``i * tau``.
    """
    extra = dict(backend=config.backend, inner_tol=config.inner_tol,
                 inner_max_iter=config.inner_max_iter)
    if config.tau_mode == "log":
        return default_tau_schedule(shift_range, config.n_p, config.max_m, **extra)
    taus = [1j * float(t) for t in config.taus]
    n_p = len(taus)
    if n_p > config.max_m:
        raise ConfigError("more explicit taus than max_m")
    base, rem = divmod(config.max_m, n_p)
    blocks = [base + (1 if i < rem else 0) for i in range(n_p)]
    return PreconditionerSchedule(tuple(taus), tuple(blocks), **extra)


def _certify(family: ShiftedFamily, sol: ShiftSolution, counts: OperatorCounts) -> None:
    sol.true_residual = float(np.linalg.norm(family.residual(sol.sigma, sol.x)))
    counts.certificate_matvecs += 2


def run_shifted_solver(family: ShiftedFamily, schedule: PreconditionerSchedule, method: str = "fom",
                       tol: float = 1e-10, max_m: int | None = None, max_restarts: int = 0, *,
                       restart: bool = True, check_every: int = 1, reorthogonalize: bool = True,
                       store_residuals: bool = False, threads: int = 1, preconditioner=None,
                       certify: bool = True, on_basis=None):
    """Solve every shift of `family` from one flexible basis.

    The basis grows one column at a time.  After each column (or every
    `check_every` columns) the unconverged shifts solve their projected
    problem; a shift is converged once ``estimate / ||b|| <= tol``.  With the
    inexact backend the estimate is the certified bound
    ``eps ||y||_1 + ||beta e_1 - Hbar(sigma; T) y||``.

    If shifts remain unconverged after `max_m` columns and restarts are left:

    * direct backend, FOM, ``restart=True``: collinear restart from ``v_{m+1}``;
    * otherwise: the basis is discarded and each unconverged shift restarts from
      its current iterate with the true residual as right-hand side.

    Parameters
    ----------
    on_basis : callable, optional
        Called as ``on_basis(basis, active_indices, solutions)`` after each
        subproblem sweep.  Test code uses it to inspect intermediate bases.

    Returns
    -------
    solutions : list of ShiftSolution, in shift order
    report : ConvergenceReport
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if method not in ("fom", "gmres"):
        raise ValueError(f"unknown method {method!r}")
    t0 = time.perf_counter()
    max_m = int(max_m or schedule.m)
    check_every = max(1, int(check_every))
    precond = preconditioner if preconditioner is not None else make_preconditioner(family, schedule)
    counts = precond.counts
    start_counts = counts.snapshot()
    n_records0 = len(getattr(precond, "records", []))
    eps = schedule.inner_tol if not getattr(precond, "exact", True) else 0.0

    n = family.n
    bnorm = float(np.linalg.norm(family.b))
    sols = [ShiftSolution(complex(s), np.zeros(0, np.complex128), np.zeros(n, np.complex128), method,
                          index=j) for j, s in enumerate(family.shifts)]
    log = []
    total_iters = 0
    cycles = 0
    any_breakdown = False

    if bnorm == 0:
        for s in sols:
            s.converged = True
            s.residual_history.append((0, 0.0))
            s.true_residual = 0.0
        return sols, ConvergenceReport(method, schedule.backend, counts.since(start_counts), 0, 0,
                                       True, False, time.perf_counter() - t0, log)

    if hasattr(precond, "prepare"):
        precond.prepare(schedule.distinct_taus, threads=threads)

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    pending = deque([(family.b, {j: bnorm for j in range(len(sols))}, 0)])
    try:
        while pending:
            start, rhs, cyc = pending.popleft()
            cycles = max(cycles, cyc + 1)
            basis = KrylovBasis(start, max_m, store_residuals=store_residuals)
            active = list(rhs)
            latest = {}

            def evaluate(j, basis=basis, rhs=rhs):
                try:
                    y, est = _coefficients(method, basis.shifted_hessenberg(sols[j].sigma), rhs[j])
                except (FomSingular, RankDeficient) as exc:
                    return j, None, float("inf"), str(exc)
                if eps > 0:
                    est = true_residual_bound(est, y, eps)
                return j, y, est, None

            while active:
                flexible_arnoldi_extend(family, schedule, basis, 1, precond,
                                        reorthogonalize=reorthogonalize)
                total_iters += 1
                for j in active:
                    sols[j].iterations += 1
                full = basis.k >= max_m or basis.breakdown
                if basis.k % check_every and not full:
                    continue
                results = list(pool.map(evaluate, active)) if pool else [evaluate(j) for j in active]
                still = []
                for j, y, est, err in results:
                    sol = sols[j]
                    sol.residual_history.append((sols[j].iterations, est))
                    sol.error = err
                    ok = y is not None and est / bnorm <= tol
                    log.append((total_iters, j, sol.sigma.imag, est, ok))
                    if y is not None:
                        latest[j] = y
                    if ok:
                        sol.y = y
                        sol.x = sol.x + basis.Zm @ y
                        sol.converged = True
                        if certify:
                            _certify(family, sol, counts)
                    else:
                        still.append(j)
                active = still
                if on_basis is not None:
                    on_basis(basis, list(active), sols)
                if full:
                    break

            any_breakdown = any_breakdown or basis.breakdown
            if not active:
                continue
            for j in active:
                if j in latest:
                    sols[j].y = latest[j]
                    sols[j].x = sols[j].x + basis.Zm @ latest[j]
            if cyc >= max_restarts or basis.breakdown:
                continue
            live = [j for j in active if j in latest]
            if method == "fom" and restart and getattr(precond, "exact", True):
                v_next, scal = restart_fom_collinear([sols[j] for j in live], basis)
                pending.append((v_next, dict(zip(live, scal)), cyc + 1))
            else:
                for j in live:
                    r = family.residual(sols[j].sigma, sols[j].x)
                    counts.certificate_matvecs += 2
                    pending.append((r, {j: float(np.linalg.norm(r))}, cyc + 1))
    finally:
        if pool is not None:
            pool.shutdown()

    records = list(getattr(precond, "records", []))[n_records0:]
    report = ConvergenceReport(
        method=method,
        backend=schedule.backend,
        counts=counts.since(start_counts),
        iterations=total_iters,
        cycles=cycles,
        converged=all(s.converged for s in sols),
        breakdown=any_breakdown,
        wall_time=time.perf_counter() - t0,
        log=log,
        inner_records=records,
    )
    return sols, report


def direct_solve_shifts(family: ShiftedFamily, counts: OperatorCounts | None = None) -> np.ndarray:
    """Baseline: factorize and solve every shifted system independently.

    Returns an ``(n_f, n)`` array of solutions.
    """
    counts = counts if counts is not None else OperatorCounts()
    out = np.empty((len(family.shifts), family.n), dtype=np.complex128)
    for j, sigma in enumerate(family.shifts):
        out[j] = banded_lu_factor(family.operator(sigma)).solve(family.b)
        counts.factorizations += 1
        counts.precond_solves += 1
    return out


def single_tau_gmres(family: ShiftedFamily, tau: complex, restart: int = 30, tol: float = 1e-10,
                     max_cycles: int = 50, **kwargs):
    """Baseline: right-preconditioned restarted GMRES(`restart`) with one ``K + tau M``.

    Each shift restarts independently from its own residual, which is exactly
    restarted GMRES applied shift by shift.
    """
    schedule = PreconditionerSchedule.constant(tau, restart)
    return run_shifted_solver(family, schedule, "gmres", tol, restart, max_cycles - 1,
                              restart=False, **kwargs)
