"""Adjoint sensitivities and quasi-linear geostatistical inversion of log-conductivity.

Measurements are the cosine and sine coefficients ``(Re Phi, -Im Phi)`` at each
sensor and frequency.  Differentiating ``A(s) Phi = q`` with the complex-symmetric
``A = K(s) + i w M`` gives, for a sensor at node ``i``,

    d Phi_i / d s_j = Psi^T (dA / d s_j) Phi,    A Psi = -e_i,

and ``dA / ds_j`` only touches the faces adjacent to node ``j``.  One forward
family plus one adjoint family per sensor thus covers every frequency.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .exceptions import FlexShiftError, SaddleSingular
from .oht_model import (
    AquiferModel,
    Grid,
    KernelSpec,
    NotConverged,
    PhasorSystem,
    discretize,
    forward_solve,
    kernel_matrix,
    measure,
    solver_schedule,
)
from .shifted_krylov import OperatorCounts, SolverConfig, make_preconditioner

__all__ = [
    "CovarianceOperator",
    "GeostatModel",
    "GaussNewtonState",
    "JacobianMatrix",
    "GNConfig",
    "InversionResult",
    "adjoint_solve",
    "sensitivity_rows",
    "forward_measurements",
    "assemble_jacobian",
    "covariance_assemble",
    "objective",
    "gauss_newton_step",
    "invert",
    "l2_errors",
]

DENSE_LIMIT = 15000


class CovarianceOperator:
    """Matrix-free ``Q`` for a stationary kernel, applied in row blocks.

    Only ``block * N`` kernel entries exist at any time, so the operator
    scales to grids where the dense matrix would not fit in memory.  The
    diagonal carries the same jitter as :func:`covariance_assemble`.
    """

    def __init__(self, points: np.ndarray, kernel: KernelSpec, jitter: float = 1e-10, block: int = 1024):
        self.points = np.asarray(points, dtype=float)
        self.kernel = kernel
        self.jitter = jitter * kernel.variance
        self.block = int(block)

    @property
    def shape(self) -> tuple[int, int]:
        n = len(self.points)
        return n, n

    def __matmul__(self, B):
        B = np.asarray(B, dtype=float)
        vec = B.ndim == 1
        B2 = B[:, None] if vec else B
        out = np.empty((len(self.points), B2.shape[1]))
        for lo in range(0, len(self.points), self.block):
            hi = min(lo + self.block, len(self.points))
            out[lo:hi] = kernel_matrix(self.kernel, self.points[lo:hi], self.points) @ B2
        out += self.jitter * B2
        return out[:, 0] if vec else out

    def toarray(self) -> np.ndarray:
        return self @ np.eye(len(self.points))


def covariance_assemble(grid: Grid, kernel: KernelSpec, jitter: float = 1e-10,
                        limit: int = DENSE_LIMIT) -> np.ndarray:
    """Dense ``Q_ij = kernel(|x_i - x_j|)`` with ``jitter * kernel(0)`` on the diagonal."""
    N = grid.n_nodes
    if N > limit:
        raise MemoryError(f"dense covariance for {N} nodes exceeds the limit of {limit}")
    P = grid.coords()
    Q = kernel_matrix(kernel, P, P)
    Q[np.diag_indices(N)] += jitter * kernel.variance
    return Q


@dataclass
class GeostatModel:
    """Prior ``s ~ N(X beta, Q)`` and data ``y = h(s) + v`` with ``v ~ N(0, R)``.

    `Q` may be a dense array or any object supporting ``Q @ B``.
    """

    Q: object
    X: np.ndarray
    R: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.X.shape[0] == 1 and self.X.shape[1] != 1:
            self.X = self.X.T
        self.R = np.asarray(self.R, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.R.shape != (len(self.y), len(self.y)):
            raise ValueError("R must be N_y x N_y")
        if self.Q.shape[0] != self.X.shape[0]:
            raise ValueError("Q and X disagree on the number of unknowns")

    @classmethod
    def with_noise(cls, Q, y, eta: float, X=None) -> "GeostatModel":
        N = Q.shape[0]
        X = np.ones((N, 1)) if X is None else X
        return cls(Q, X, eta ** 2 * np.eye(len(y)), y)


@dataclass
class JacobianMatrix:
    """Dense sensitivities plus bookkeeping from the assembly."""

    J: np.ndarray
    h: np.ndarray
    family_solves: int
    timings: dict
    counts: OperatorCounts


@dataclass
class GaussNewtonState:
    """Iterate ``s = X drift + Q w`` with ``w = J^T xi`` from the last step."""

    s: np.ndarray
    xi: np.ndarray
    drift: np.ndarray
    w: np.ndarray
    objective: float = np.inf
    step: int = 0


def adjoint_solve(system: PhasorSystem, sensor: int, config: SolverConfig | None = None,
                  frequencies=None, preconditioner=None, shift_range=None):
    """Solve ``(K + i w M) Psi = -e_sensor`` for all frequencies with one basis."""
    rhs = -system.point_load(sensor)
    return forward_solve(system, config, rhs=rhs, frequencies=frequencies,
                         preconditioner=preconditioner, shift_range=shift_range)


def _conductance_derivatives(model: AquiferModel, edges):
    a, b, w = edges
    K = model.conductivity
    Ka, Kb = K[a], K[b]
    denom = (Ka + Kb) ** 2
    # d c / d s_a = K_a * d c / d K_a
    return w * 2 * Ka * Kb ** 2 / denom, w * 2 * Kb * Ka ** 2 / denom


def sensitivity_rows(phi: np.ndarray, psi: np.ndarray, system: PhasorSystem,
                     dc=None) -> np.ndarray:
    """Cosine and sine sensitivity rows (shape ``(2, N)``) for one sensor and frequency.

    `phi` and `psi` are full-grid fields (zero on Dirichlet nodes).  The storage
    term does not depend on ``s`` and contributes nothing.
    """
    a, b, _ = system.edges
    da, db = _conductance_derivatives(system.model, system.edges) if dc is None else dc
    prod = (phi[a] - phi[b]) * (psi[a] - psi[b])
    N = system.model.grid.n_nodes
    g = np.bincount(a, weights=(da * prod).real, minlength=N) + 1j * np.bincount(
        a, weights=(da * prod).imag, minlength=N)
    g += np.bincount(b, weights=(db * prod).real, minlength=N) + 1j * np.bincount(
        b, weights=(db * prod).imag, minlength=N)
    return np.vstack([g.real, -g.imag])


def forward_measurements(model: AquiferModel, frequencies, config: SolverConfig | None = None,
                         preconditioner=None):
    """Data vector ``h(s)`` and the full-grid forward fields."""
    system = discretize(model, frequencies)
    res = forward_solve(system, config, preconditioner=preconditioner)
    return measure(res.fields, model.sensors, system.frequencies).vector(), res.fields, system


def assemble_jacobian(model: AquiferModel, frequencies, config: SolverConfig | None = None,
                      threads: int = 1) -> JacobianMatrix:
    """Measurements and their Jacobian with one forward and ``n_y`` adjoint family solves.

    All families share one cached set of preconditioner factorizations.
    Row order matches :meth:`MeasurementSet.vector`: frequency, sensor, (cos, sin).
    """
    config = config or SolverConfig()
    system = discretize(model, frequencies)
    freqs = system.frequencies
    schedule = solver_schedule(config, freqs)
    counts = OperatorCounts()
    precond = make_preconditioner(system.family(), schedule, counts)
    timings = dict(forward=0.0, adjoint=0.0, inner_product=0.0)

    t = time.perf_counter()
    fwd = forward_solve(system, config, preconditioner=precond)
    timings["forward"] += time.perf_counter() - t
    families = 1
    n_f, sensors = len(freqs), model.sensors
    h = measure(fwd.fields, sensors, freqs).vector()

    J = np.empty((2 * n_f * len(sensors), model.grid.n_nodes))
    dc = _conductance_derivatives(model, system.edges)
    for i, node in enumerate(sensors):
        t = time.perf_counter()
        adj = adjoint_solve(system, node, config, preconditioner=precond)
        timings["adjoint"] += time.perf_counter() - t
        families += 1
        t = time.perf_counter()
        for f in range(n_f):
            r = 2 * (f * len(sensors) + i)
            J[r:r + 2] = sensitivity_rows(fwd.fields[f], adj.fields[f], system, dc)
        timings["inner_product"] += time.perf_counter() - t
    return JacobianMatrix(J, h, families, timings, counts)


def objective(geo: GeostatModel, h: np.ndarray, s: np.ndarray, drift: np.ndarray, w: np.ndarray) -> float:
    """``(y - h)^T R^{-1} (y - h) / 2 + w^T (s - X drift) / 2`` with ``s - X drift = Q w``."""
    r = geo.y - h
    misfit = r @ np.linalg.solve(geo.R, r)
    prior = w @ (s - geo.X @ drift)
    return 0.5 * float(misfit + prior)


def gauss_newton_step(state: GaussNewtonState, J: np.ndarray, h: np.ndarray, geo: GeostatModel,
                      QJt: np.ndarray | None = None) -> tuple[GaussNewtonState, dict]:
    """One quasi-linear update from the saddle system

        [J Q J^T + R   J X] [xi  ]   [y - h(s) + J s]
        [(J X)^T       0  ] [beta] = [0             ]

    followed by ``s_new = X beta + Q J^T xi``.

    Returns the full-step state (objective not evaluated) and solve diagnostics.

    Raises
    ------
    SaddleSingular
        If the LU factorization meets a zero pivot or produces non-finite values.
    """
    QJt = geo.Q @ J.T if QJt is None else QJt
    JX = J @ geo.X
    n_y, p = JX.shape
    A = np.zeros((n_y + p, n_y + p))
    A[:n_y, :n_y] = J @ QJt + geo.R
    A[:n_y, n_y:] = JX
    A[n_y:, :n_y] = JX.T
    rhs = np.concatenate([geo.y - h + J @ state.s, np.zeros(p)])
    try:
        with np.errstate(all="raise"), warnings.catch_warnings():
            # a zero pivot is reported below as SaddleSingular
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(A, check_finite=True)
            sol = sla.lu_solve(lu, rhs)
    except (FloatingPointError, ValueError, sla.LinAlgError, np.linalg.LinAlgError) as exc:
        raise SaddleSingular(f"saddle system is singular: {exc}") from None
    if np.any(np.diag(lu[0]) == 0) or not np.all(np.isfinite(sol)):
        raise SaddleSingular("saddle system is singular (zero pivot)")
    xi, drift = sol[:n_y], sol[n_y:]
    w = J.T @ xi
    s_new = geo.X @ drift + QJt @ xi
    rel_res = float(np.linalg.norm(A @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300))
    return GaussNewtonState(s_new, xi, drift, w, np.inf, state.step + 1), dict(saddle_residual=rel_res)


@dataclass
class GNConfig:
    max_iter: int = 20
    step_tol: float = 1e-6
    line_search: bool = False
    ls_factor: float = 0.5
    ls_max_halvings: int = 8
    max_failures: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "GNConfig":
        from .exceptions import ConfigError

        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown gauss-newton keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class InversionResult:
    s: np.ndarray
    state: GaussNewtonState
    history: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    timings: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)


def _evaluate(model, s, freqs, config):
    """Forward data at `s`, or None when the trial field is unusable (overflow or no convergence)."""
    if not np.all(np.isfinite(s)) or np.max(np.abs(s)) > 700:
        return None
    try:
        with np.errstate(all="ignore"):
            h, _, _ = forward_measurements(model.with_log_conductivity(s), freqs, config)
    except (NotConverged, FlexShiftError):
        return None
    return h if np.all(np.isfinite(h)) else None


def invert(model: AquiferModel, frequencies, geo: GeostatModel, s0: np.ndarray,
           solver_config: SolverConfig | None = None, gn: GNConfig | None = None,
           callback=None) -> InversionResult:
    """Quasi-linear Gauss-Newton iterations from the prior-mean start ``s0`` (a drift-space field).

    The iteration stops on relative step ``||s_new - s|| / ||s|| < gn.step_tol``
    or after ``gn.max_iter`` steps.  With the line search enabled, the step is
    halved (in drift and ``w`` coordinates, so the prior term stays exact) until
    the objective does not increase; after ``gn.max_failures`` consecutive
    failures the best iterate is returned with ``diverged=True``.
    """
    gn = gn or GNConfig()
    solver_config = solver_config or SolverConfig()
    freqs = np.asarray(frequencies, dtype=float)
    s0 = np.asarray(s0, dtype=float)
    drift0, *_ = np.linalg.lstsq(geo.X, s0, rcond=None)
    state = GaussNewtonState(s0.copy(), np.zeros(len(geo.y)), drift0, np.zeros(len(s0)))
    timings = dict(forward=0.0, adjoint=0.0, inner_product=0.0, saddle=0.0, covariance=0.0)
    counts = OperatorCounts()
    history = []
    best = state
    failures = 0
    converged = diverged = False

    jac = None
    for it in range(gn.max_iter):
        jac = assemble_jacobian(model.with_log_conductivity(state.s), freqs, solver_config)
        for k in ("forward", "adjoint", "inner_product"):
            timings[k] += jac.timings[k]
        counts = _add_counts(counts, jac.counts)
        if it == 0:
            state.objective = objective(geo, jac.h, state.s, state.drift, state.w)
            best = state
            history.append(dict(step=0, objective=state.objective, step_size=1.0, rel_step=np.nan))
        t = time.perf_counter()
        QJt = geo.Q @ jac.J.T
        timings["covariance"] += time.perf_counter() - t
        t = time.perf_counter()
        full, info = gauss_newton_step(state, jac.J, jac.h, geo, QJt)
        timings["saddle"] += time.perf_counter() - t

        step, accepted = 1.0, None
        for _ in range(gn.ls_max_halvings + 1 if gn.line_search else 1):
            drift = state.drift + step * (full.drift - state.drift)
            w = state.w + step * (full.w - state.w)
            s = state.s + step * (full.s - state.s)
            t = time.perf_counter()
            h = _evaluate(model, s, freqs, solver_config)
            timings["forward"] += time.perf_counter() - t
            obj = np.inf if h is None else objective(geo, h, s, drift, w)
            cand = GaussNewtonState(s, full.xi, drift, w, obj, state.step + 1)
            if (not gn.line_search and h is not None) or obj <= state.objective:
                accepted = cand
                break
            step *= gn.ls_factor
        if accepted is None:
            failures += 1
            accepted = cand
            if failures >= gn.max_failures:
                diverged = True
        else:
            failures = 0
        rel = float(np.linalg.norm(accepted.s - state.s) / max(np.linalg.norm(state.s), 1e-300))
        history.append(dict(step=accepted.step, objective=accepted.objective, step_size=step,
                            rel_step=rel, saddle_residual=info["saddle_residual"]))
        state = accepted
        if state.objective < best.objective:
            best = state
        if callback is not None:
            callback(state, history[-1])
        if diverged:
            break
        if rel < gn.step_tol:
            converged = True
            break
    final = best if diverged else state
    return InversionResult(final.s, final, history, converged, diverged, timings, counts.as_dict())


def _add_counts(a: OperatorCounts, b: OperatorCounts) -> OperatorCounts:
    return OperatorCounts(**{k: getattr(a, k) + getattr(b, k) for k in a.__dataclass_fields__})


def l2_errors(grid: Grid, s_est: np.ndarray, s_true: np.ndarray, box=None) -> dict:
    """Relative, area-weighted L2 errors over the domain and inside an axis-aligned box.

    ``box = (xmin, xmax, ymin, ymax)``.
    """
    w = grid.cell_areas()
    d = s_est - s_true

    def rel(mask):
        return float(np.sqrt(np.sum(w[mask] * d[mask] ** 2) / np.sum(w[mask] * s_true[mask] ** 2)))

    out = dict(total_l2=rel(np.ones(grid.n_nodes, dtype=bool)))
    if box is not None:
        x, y = grid.x, grid.y
        xmin, xmax, ymin, ymax = box
        eps = 1e-9 * max(grid.Lx, grid.Ly)
        mask = (x >= xmin - eps) & (x <= xmax + eps) & (y >= ymin - eps) & (y <= ymax + eps)
        out["box_l2"] = rel(mask)
    return out
