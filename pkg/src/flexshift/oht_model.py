"""Two-dimensional oscillatory groundwater model on a regular grid.

The phasor equation

    -div(K grad Phi) + i w S_s Phi = Q_0 delta(x - x_s)

is discretized with node-centred finite volumes: a 5-point stencil with
harmonic averaging of the conductivity across faces and a lumped (diagonal)
storage term.  Dirichlet nodes are eliminated, so the unknowns are the free
nodes only and every frequency gives ``(K + i w M) Phi = q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.distance import cdist

from .exceptions import FlexShiftError
from .shifted_krylov import (
    PreconditionerSchedule,
    ShiftedFamily,
    SolverConfig,
    run_shifted_solver,
    schedule_from_config,
)

__all__ = [
    "SIDES",
    "Grid",
    "AquiferModel",
    "PhasorSystem",
    "MeasurementSet",
    "ForwardResult",
    "OracleResult",
    "KernelSpec",
    "kernel_matrix",
    "NotConverged",
    "discretize",
    "forward_solve",
    "measure",
    "time_domain_oracle",
    "synth_gaussian_field",
    "franke",
    "franke_field",
]

SIDES = ("left", "right", "bottom", "top")

# Extrema of Franke's function on the unit square, rounded outward.
FRANKE_MIN = 0.00111528
FRANKE_MAX = 1.22003258


class NotConverged(FlexShiftError):
    """Some frequencies did not reach the solver tolerance."""

    def __init__(self, indices, result=None):
        self.indices = list(indices)
        self.result = result
        super().__init__(f"shifted solver did not converge for frequency indices {self.indices}")


@dataclass(frozen=True)
class Grid:
    """Regular ``nx`` x ``ny`` lattice of nodes covering ``[0, Lx] x [0, Ly]``.

    Nodes are numbered ``j * nx + i`` (x runs fastest).
    """

    nx: int
    ny: int
    Lx: float = 500.0
    Ly: float = 500.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3 nodes per side, got {self.nx} x {self.ny}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("domain lengths must be positive")

    @classmethod
    def square(cls, n: int, L: float = 500.0) -> "Grid":
        return cls(n, n, L, L)

    @property
    def hx(self) -> float:
        return self.Lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.Ly / (self.ny - 1)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def x(self) -> np.ndarray:
        return np.tile(np.linspace(0.0, self.Lx, self.nx), self.ny)

    @property
    def y(self) -> np.ndarray:
        return np.repeat(np.linspace(0.0, self.Ly, self.ny), self.nx)

    def coords(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def normalized_coords(self) -> np.ndarray:
        return np.column_stack([self.x / self.Lx, self.y / self.Ly])

    def node(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise ValueError(f"node ({i}, {j}) outside {self.nx} x {self.ny} grid")
        return j * self.nx + i

    def nearest_node(self, x: float, y: float) -> int:
        if not (0 <= x <= self.Lx and 0 <= y <= self.Ly):
            raise ValueError(f"point ({x}, {y}) outside the domain")
        return self.node(int(round(x / self.hx)), int(round(y / self.hy)))

    def side_nodes(self, side: str) -> np.ndarray:
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        if side == "left":
            return j * self.nx
        if side == "right":
            return j * self.nx + self.nx - 1
        if side == "bottom":
            return i
        if side == "top":
            return (self.ny - 1) * self.nx + i
        raise ValueError(f"unknown side {side!r}")

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.side_nodes(s) for s in SIDES]))

    def cell_widths(self) -> tuple[np.ndarray, np.ndarray]:
        """Dual-cell widths per node in x and y (halved on the boundary)."""
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return np.tile(wx, self.ny), np.repeat(wy, self.nx)

    def cell_areas(self) -> np.ndarray:
        wx, wy = self.cell_widths()
        return wx * wy

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest-neighbour edges ``(a, b, w)`` with ``w`` = face length / node distance."""
        nx, ny = self.nx, self.ny
        wx, wy = self.cell_widths()
        idx = np.arange(self.n_nodes).reshape(ny, nx)
        ha, hb = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        va, vb = idx[:-1, :].ravel(), idx[1:, :].ravel()
        a = np.concatenate([ha, va])
        b = np.concatenate([hb, vb])
        w = np.concatenate([wy[ha] / self.hx, wx[va] / self.hy])
        return a, b, w


@dataclass
class AquiferModel:
    """Grid, log-conductivity and log-storage fields, sources and sensors.

    ``sources`` is a list of ``(node, Q0)`` pairs; ``sensors`` a list of nodes.
    Sides not listed in ``dirichlet_sides`` carry a no-flow condition.
    """

    grid: Grid
    log_conductivity: np.ndarray
    log_storage: np.ndarray | float
    sources: list = field(default_factory=list)
    sensors: list = field(default_factory=list)
    dirichlet_sides: tuple = SIDES

    def __post_init__(self):
        N = self.grid.n_nodes
        self.log_conductivity = np.asarray(self.log_conductivity, dtype=float).reshape(-1)
        if self.log_conductivity.shape != (N,):
            raise ValueError(f"log_conductivity must have {N} entries")
        self.log_storage = np.broadcast_to(np.asarray(self.log_storage, dtype=float), (N,)).copy()
        self.dirichlet_sides = tuple(self.dirichlet_sides)
        if not set(self.dirichlet_sides) <= set(SIDES):
            raise ValueError(f"dirichlet_sides must be a subset of {SIDES}")
        self.sources = [(int(n), float(q)) for n, q in self.sources]
        self.sensors = [int(n) for n in self.sensors]
        dirichlet = set(self.dirichlet_nodes().tolist())
        for node, _ in self.sources:
            if not 0 <= node < N or node in dirichlet:
                raise ValueError(f"source node {node} is not a free node")
        for node in self.sensors:
            if not 0 <= node < N or node in dirichlet:
                raise ValueError(f"sensor node {node} is not a free node")

    @property
    def conductivity(self) -> np.ndarray:
        return np.exp(self.log_conductivity)

    @property
    def storage(self) -> np.ndarray:
        return np.exp(self.log_storage)

    def dirichlet_nodes(self) -> np.ndarray:
        if not self.dirichlet_sides:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate([self.grid.side_nodes(s) for s in self.dirichlet_sides]))

    def free_nodes(self) -> np.ndarray:
        mask = np.ones(self.grid.n_nodes, dtype=bool)
        mask[self.dirichlet_nodes()] = False
        return np.flatnonzero(mask)

    def with_log_conductivity(self, s: np.ndarray) -> "AquiferModel":
        return replace(self, log_conductivity=np.array(s, dtype=float))


def harmonic_conductance(Ka, Kb, w):
    """Face conductance ``w * 2 Ka Kb / (Ka + Kb)``."""
    return w * 2.0 * Ka * Kb / (Ka + Kb)


@dataclass
class PhasorSystem:
    """Discrete operators on the free nodes: ``(K + i w M) Phi = q``."""

    K: sp.csr_matrix
    M: sp.csr_matrix
    q: np.ndarray
    frequencies: np.ndarray
    free: np.ndarray
    model: AquiferModel
    edges: tuple

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def shifts(self) -> np.ndarray:
        return 1j * np.asarray(self.frequencies, dtype=float)

    def unknown_index(self, node: int) -> int:
        pos = np.searchsorted(self.free, node)
        if pos >= len(self.free) or self.free[pos] != node:
            raise ValueError(f"node {node} is not a free node")
        return int(pos)

    def point_load(self, node: int, amplitude: float = 1.0) -> np.ndarray:
        q = np.zeros(self.n, dtype=np.complex128)
        q[self.unknown_index(node)] = amplitude
        return q

    def distributed_load(self, values: np.ndarray) -> np.ndarray:
        """Integrated load vector for a source density given at every node."""
        values = np.asarray(values).reshape(-1)
        return (values * self.model.grid.cell_areas())[self.free].astype(np.complex128)

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Scatter free-node values (last axis) onto the full grid, zero on Dirichlet nodes."""
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (self.model.grid.n_nodes,), dtype=x.dtype)
        out[..., self.free] = x
        return out

    def family(self, rhs: np.ndarray | None = None, frequencies=None) -> ShiftedFamily:
        freqs = self.frequencies if frequencies is None else np.atleast_1d(frequencies)
        return ShiftedFamily(self.K, self.M, self.q if rhs is None else rhs, 1j * np.asarray(freqs))


def discretize(model: AquiferModel, frequencies=()) -> PhasorSystem:
    """Finite-volume stiffness, lumped mass and point-source load for `model`."""
    grid = model.grid
    N = grid.n_nodes
    a, b, w = grid.edges()
    Kn = model.conductivity
    c = harmonic_conductance(Kn[a], Kn[b], w)
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([c, c, -c, -c])
    K_full = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
    free = model.free_nodes()
    K = K_full[free][:, free].tocsr()
    K.sum_duplicates()
    K.sort_indices()
    M = sp.diags((model.storage * grid.cell_areas())[free]).tocsr()
    system = PhasorSystem(K, M, np.zeros(len(free), dtype=np.complex128),
                          np.asarray(frequencies, dtype=float).reshape(-1), free, model, (a, b, w))
    for node, q0 in model.sources:
        system.q[system.unknown_index(node)] += q0
    return system


@dataclass
class ForwardResult:
    """Full-grid phasor fields, one row per frequency, plus solver output."""

    fields: np.ndarray
    frequencies: np.ndarray
    solutions: list
    report: object


def solver_schedule(config: SolverConfig, frequencies, shift_range=None) -> PreconditionerSchedule:
    """Schedule for a set of frequencies; a single frequency gets its own tau."""
    freqs = np.asarray(frequencies, dtype=float)
    lo, hi = (float(freqs.min()), float(freqs.max())) if shift_range is None else shift_range
    if config.tau_mode == "log" and np.isclose(lo, hi):
        return PreconditionerSchedule.constant(1j * lo, config.max_m, backend=config.backend,
                                               inner_tol=config.inner_tol,
                                               inner_max_iter=config.inner_max_iter)
    return schedule_from_config(config, (lo, hi))


def forward_solve(system: PhasorSystem, config: SolverConfig | None = None, rhs=None,
                  frequencies=None, preconditioner=None, shift_range=None,
                  raise_on_failure: bool = True) -> ForwardResult:
    """Solve ``(K + i w M) Phi = q`` for every frequency with one shifted solve."""
    config = config or SolverConfig()
    freqs = system.frequencies if frequencies is None else np.atleast_1d(frequencies)
    family = system.family(rhs, freqs)
    schedule = solver_schedule(config, freqs, shift_range)
    sols, report = run_shifted_solver(
        family, schedule, config.method, config.tol, config.max_m, config.max_restarts,
        restart=config.restart, check_every=config.check_every,
        reorthogonalize=config.reorthogonalize, store_residuals=config.test_mode_store_P,
        threads=config.threads, preconditioner=preconditioner,
    )
    fields_ = system.expand(np.array([s.x for s in sols]))
    result = ForwardResult(fields_, np.asarray(freqs, dtype=float), sols, report)
    bad = [s.index for s in sols if not s.converged]
    if bad and raise_on_failure:
        raise NotConverged(bad, result)
    return result


@dataclass
class MeasurementSet:
    """Cosine and sine coefficients of the head at each sensor and frequency.

    ``cos`` and ``sin`` have shape ``(n_f, n_y)``.  The flat data vector orders
    entries as frequency, then sensor, then (cos, sin).
    """

    frequencies: np.ndarray
    sensors: list
    cos: np.ndarray
    sin: np.ndarray

    @property
    def count(self) -> int:
        return 2 * self.cos.size

    def vector(self) -> np.ndarray:
        return np.stack([self.cos, self.sin], axis=-1).reshape(-1)

    def rows(self):
        for f, w in enumerate(self.frequencies):
            for i, node in enumerate(self.sensors):
                yield node, float(w), float(self.cos[f, i]), float(self.sin[f, i])


def measure(fields_: np.ndarray, sensors, frequencies=None) -> MeasurementSet:
    """Oscillation coefficients at the sensors from full-grid phasor fields.

    With ``phi = Re(Phi e^{iwt}) = Re(Phi) cos(wt) - Im(Phi) sin(wt)`` the
    coefficients are ``(Re Phi, -Im Phi)``.
    """
    fields_ = np.atleast_2d(fields_)
    sensors = [int(s) for s in sensors]
    N = fields_.shape[1]
    for s in sensors:
        if not 0 <= s < N:
            raise ValueError(f"sensor node {s} outside the grid")
    vals = fields_[:, sensors]
    freqs = np.arange(len(fields_), dtype=float) if frequencies is None else np.asarray(frequencies)
    return MeasurementSet(freqs, sensors, vals.real.copy(), -vals.imag.copy())


@dataclass
class OracleResult:
    times: np.ndarray
    trace: np.ndarray
    cos: np.ndarray
    sin: np.ndarray


def time_domain_oracle(model: AquiferModel, omega: float, periods: int = 8,
                       steps_per_period: int = 80) -> OracleResult:
    """Integrate the transient equation from rest and fit the final period.

    Second-order backward differences (first step backward Euler) are used with
    the same spatial operators as the phasor model, so the fitted coefficients
    converge to the phasor coefficients as transients decay and ``dt -> 0``.
    The fit includes a constant and a linear term so that slowly decaying
    transients do not leak into the oscillatory coefficients.

    Returns the final-period trace at the sensors and the fitted cos/sin
    coefficients per sensor.
    """
    if steps_per_period < 40:
        raise ValueError("steps_per_period must be at least 40")
    if periods < 1:
        raise ValueError("periods must be at least 1")
    system = discretize(model)
    K = system.K.real.tocsc()
    m = system.M.diagonal().real
    q = system.q.real
    sensors = [system.unknown_index(s) for s in model.sensors]
    dt = 2 * np.pi / omega / steps_per_period
    n_steps = periods * steps_per_period
    be = spla.splu((K + sp.diags(m / dt)).tocsc())
    bdf2 = spla.splu((K + sp.diags(1.5 * m / dt)).tocsc())
    phi_prev = np.zeros(system.n)
    phi = be.solve(q * np.cos(omega * dt))
    trace = [phi[sensors]]
    for n in range(2, n_steps + 1):
        t = n * dt
        rhs = q * np.cos(omega * t) + m * (2.0 * phi - 0.5 * phi_prev) / dt
        phi_prev, phi = phi, bdf2.solve(rhs)
        trace.append(phi[sensors])
    times = dt * np.arange(1, n_steps + 1)
    trace = np.array(trace)
    last = slice(n_steps - steps_per_period, n_steps)
    t_last = times[last]
    tc = t_last - t_last.mean()
    A = np.column_stack([np.ones_like(t_last), tc, np.cos(omega * t_last), np.sin(omega * t_last)])
    coef, *_ = np.linalg.lstsq(A, trace[last], rcond=None)
    return OracleResult(t_last, trace[last], coef[2], coef[3])


@dataclass(frozen=True)
class KernelSpec:
    """Exponential covariance ``variance * exp(-decay * r / length)``."""

    variance: float = 1.0
    decay: float = 4.0
    length: float = 500.0

    def __call__(self, r):
        return self.variance * np.exp(-self.decay * np.asarray(r) / self.length)

    def as_dict(self) -> dict:
        return dict(variance=self.variance, decay=self.decay, length=self.length)


def kernel_matrix(kernel: KernelSpec, P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """``kernel(|p_i - q_j|)`` for all point pairs, built in place to limit memory."""
    C = cdist(P, Q)
    C *= -kernel.decay / kernel.length
    np.exp(C, out=C)
    C *= kernel.variance
    return C


def synth_gaussian_field(grid: Grid, kernel: KernelSpec, seed: int, mean: float = 0.0,
                         max_nodes: int = 15000) -> np.ndarray:
    """Draw ``s ~ N(mean, Q)`` on the grid nodes via dense Cholesky of ``Q``.

    Jitter starting at ``1e-10 * variance`` is added to the diagonal and raised
    tenfold until the factorization succeeds (up to ``1e-4 * variance``).
    """
    N = grid.n_nodes
    if N > max_nodes:
        raise ValueError(f"{N} nodes exceed the dense covariance limit of {max_nodes}")
    P = grid.coords()
    jitter = 1e-10 * kernel.variance
    diag = np.arange(N)
    while True:
        Q = kernel_matrix(kernel, P, P)
        Q[diag, diag] += jitter
        try:
            L = sla.cholesky(Q, lower=True, overwrite_a=True, check_finite=False)
            break
        except np.linalg.LinAlgError:
            jitter *= 10
            if jitter > 1e-4 * kernel.variance:
                raise
    rng = np.random.default_rng(seed)
    return mean + L @ rng.standard_normal(N)


def franke(x, y):
    """Franke's bivariate test function on the unit square."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (0.75 * np.exp(-((9 * x - 2) ** 2 + (9 * y - 2) ** 2) / 4)
            + 0.75 * np.exp(-((9 * x + 1) ** 2) / 49 - (9 * y + 1) / 10)
            + 0.5 * np.exp(-((9 * x - 7) ** 2 + (9 * y - 3) ** 2) / 4)
            - 0.2 * np.exp(-((9 * x - 4) ** 2) - (9 * y - 7) ** 2))


def franke_field(grid: Grid, vmin: float, vmax: float) -> np.ndarray:
    """Franke's function on normalized grid coordinates, mapped affinely to ``[vmin, vmax]``."""
    xy = grid.normalized_coords()
    f = franke(xy[:, 0], xy[:, 1])
    return vmin + (vmax - vmin) * (f - FRANKE_MIN) / (FRANKE_MAX - FRANKE_MIN)
