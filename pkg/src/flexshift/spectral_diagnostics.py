"""Post-hoc spectral diagnostics for a flexible shifted basis.

Ritz pairs come from the projected pencil ``H_m(sigma; T) f = theta H_m f``.
Since ``M Z_m = V_{m+1} Hbar_m`` and ``(K + sigma M) Z_m = V_{m+1} Hbar_m(sigma; T)``,
the vector ``u = V_{m+1} Hbar_m f`` satisfies

    (K + sigma M) M^{-1} u - theta u = h_{m+1,m} (sigma - tau_m - theta) (e_m^T f) v_{m+1},

which gives the eigen-residual in closed form and leads to an a-priori style
bound on the FOM residual in terms of Ritz data.  A second bound relates the
FOM and GMRES residuals through a rank-one update of the projected problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import FomSingular, IllConditionedReduction, RankDeficient
from .linalg_core import hessenberg_lstsq, small_generalized_eig, spmv

__all__ = [
    "RitzReport",
    "GapBoundReport",
    "ritz_pairs",
    "ritz_residuals_direct",
    "petrov_galerkin_residuals",
    "fom_residual_bound",
    "fom_gmres_gap",
    "sherman_morrison_gmres",
    "diagnose",
]

_DEGENERATE = 1e3 * np.finfo(float).eps


@dataclass
class RitzReport:
    """Ritz data for one shift.

    ``rho`` is the eigen-residual of the unnormalized vectors
    ``V_{m+1} Hbar_m f_k``; ``ritz_vectors`` holds the normalized vectors and
    ``u_norms`` the norms divided out.
    """

    sigma: complex
    tau_m: complex
    ritz_values: np.ndarray
    F: np.ndarray
    ritz_vectors: np.ndarray
    u_norms: np.ndarray
    rho: np.ndarray
    s: np.ndarray
    rho_direct: np.ndarray | None = None
    perturbed: bool = False

    def as_dict(self) -> dict:
        d = dict(
            sigma=[self.sigma.real, self.sigma.imag],
            theta=[[t.real, t.imag] for t in self.ritz_values],
            rho=self.rho.tolist(),
            s=[[v.real, v.imag] for v in self.s],
            perturbed=self.perturbed,
        )
        if self.rho_direct is not None:
            d["rho_direct"] = self.rho_direct.tolist()
        return d


@dataclass
class GapBoundReport:
    sigma: complex
    eta: complex
    alpha: float
    fom_residual_norm: float
    gmres_residual_norm: float
    bound: float
    measured_gap: float
    y_fom: np.ndarray = field(repr=False)
    y_gmres: np.ndarray = field(repr=False)
    roundoff: float = 0.0

    @property
    def holds(self) -> bool:
        """Bound check with an allowance for rounding in the measured gap."""
        return self.measured_gap <= self.bound + self.roundoff

    def as_dict(self) -> dict:
        return dict(
            sigma=[self.sigma.real, self.sigma.imag], eta=[self.eta.real, self.eta.imag],
            alpha=self.alpha, fom_residual_norm=self.fom_residual_norm,
            gmres_residual_norm=self.gmres_residual_norm, bound=self.bound,
            measured_gap=self.measured_gap, roundoff=self.roundoff, holds=self.holds,
        )


def _diagonal_mass(M) -> np.ndarray | None:
    M = sp.csr_matrix(M)
    off = M - sp.diags(M.diagonal())
    if off.count_nonzero():
        return None
    return np.asarray(M.diagonal())


def ritz_pairs(basis, sigma: complex, family=None) -> RitzReport:
    """Ritz pairs of ``(K + sigma M) M^{-1}`` extracted from the flexible basis.

    When `family` is given and its mass matrix is diagonal, the eigen-residuals
    are also evaluated directly as ``||(K + sigma M) M^{-1} u_k - theta_k u_k||``.

    Raises
    ------
    IllConditionedReduction
        If ``H_m`` is numerically singular.
    """
    m = basis.k
    Hbar = basis.Hbar
    Hm = Hbar[:m]
    Hs = basis.shifted_hessenberg(sigma)[:m]
    theta, F = small_generalized_eig(Hs, Hm)
    U = basis.Vm1 @ (Hbar @ F)
    u_norms = np.linalg.norm(U, axis=0)
    tau_m = complex(basis.taus[m - 1])
    h = Hbar[m, m - 1]
    vnorm = np.linalg.norm(basis.V[:, m])
    rho = np.abs(h * (tau_m + theta - sigma)) * np.abs(F[m - 1]) * vnorm
    e1 = np.zeros(m, dtype=np.complex128)
    e1[0] = basis.beta
    s = np.linalg.solve(F, np.linalg.solve(Hm, e1))
    report = RitzReport(complex(sigma), tau_m, theta, F, U / np.where(u_norms > 0, u_norms, 1.0),
                        u_norms, rho, s, perturbed=not basis.exact)
    if family is not None:
        report.rho_direct = ritz_residuals_direct(family, report)
    return report


def _apply_shifted_over_mass(family, sigma, mdiag, u):
    w = u / mdiag
    return spmv(family.K, w) + sigma * spmv(family.M, w)


def ritz_residuals_direct(family, report: RitzReport) -> np.ndarray | None:
    """Direct eigen-residuals for the unnormalized Ritz vectors; None if M is not diagonal."""
    mdiag = _diagonal_mass(family.M)
    if mdiag is None:
        return None
    out = np.empty(len(report.ritz_values))
    for k, theta in enumerate(report.ritz_values):
        u = report.ritz_vectors[:, k]
        r = _apply_shifted_over_mass(family, report.sigma, mdiag, u) - theta * u
        out[k] = np.linalg.norm(r) * report.u_norms[k]
    return out


def petrov_galerkin_residuals(family, basis, report: RitzReport) -> np.ndarray | None:
    """``||V_m^* ((K + sigma M) M^{-1} u_k - theta_k u_k)||`` for each normalized Ritz vector."""
    mdiag = _diagonal_mass(family.M)
    if mdiag is None:
        return None
    Vm = basis.Vm
    out = np.empty(len(report.ritz_values))
    for k, theta in enumerate(report.ritz_values):
        u = report.ritz_vectors[:, k]
        r = _apply_shifted_over_mass(family, report.sigma, mdiag, u) - theta * u
        out[k] = np.linalg.norm(Vm.conj().T @ r)
    return out


def fom_residual_bound(report: RitzReport, sigma: complex | None = None,
                       tau_m: complex | None = None) -> tuple[float, bool]:
    """Upper bound ``sum_k rho_k |(sigma - tau_m) / (theta_k + tau_m - sigma)| |s_k| / |theta_k|``.

    Returns ``(bound, degenerate)``; a denominator below ``1e3 * eps`` makes
    its term infinite and sets the flag.
    """
    sigma = report.sigma if sigma is None else complex(sigma)
    tau_m = report.tau_m if tau_m is None else complex(tau_m)
    if sigma == tau_m:
        return 0.0, False
    denom = np.abs(report.ritz_values + tau_m - sigma) * np.abs(report.ritz_values)
    degenerate = bool(np.any(denom < _DEGENERATE))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = report.rho * abs(sigma - tau_m) * np.abs(report.s) / denom
    terms = np.where(denom < _DEGENERATE, np.inf, terms)
    return float(np.sum(terms)), degenerate


def sherman_morrison_gmres(Hm: np.ndarray, eta: complex, y_fom: np.ndarray) -> np.ndarray:
    """GMRES coordinates from FOM coordinates through a rank-one correction.

    The GMRES normal equations read ``(H_m + u e_m^T) y = beta e_1`` with
    ``u = |eta|^2 H_m^{-*} e_m``, whose solution follows from ``y_fom``.
    """
    m = Hm.shape[0]
    e_m = np.zeros(m, dtype=np.complex128)
    e_m[-1] = 1.0
    w = np.linalg.solve(Hm.conj().T, e_m)
    u = abs(eta) ** 2 * w
    alpha2 = abs(eta) ** 2 * np.vdot(w, w).real
    return y_fom - np.linalg.solve(Hm, u) * y_fom[-1] / (1.0 + alpha2)


def fom_gmres_gap(basis, sigma: complex) -> GapBoundReport:
    """FOM/GMRES residual gap for one shift and its bound ``alpha (1 + alpha) / (1 + alpha^2) ||r_fom||``.

    Raises
    ------
    FomSingular
        If ``H_m(sigma; T)`` is singular.
    """
    m = basis.k
    Hs = basis.shifted_hessenberg(sigma)
    Hm = Hs[:m]
    eta = complex(Hs[m, m - 1])
    e1 = np.zeros(m, dtype=np.complex128)
    e1[0] = basis.beta
    try:
        cond = np.linalg.cond(Hm)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError
        y_fom = np.linalg.solve(Hm, e1)
        e_m = np.zeros(m, dtype=np.complex128)
        e_m[-1] = 1.0
        w = np.linalg.solve(Hm.conj().T, e_m)
    except np.linalg.LinAlgError:
        raise FomSingular(f"H_m(sigma; T) is singular for sigma = {sigma}") from None
    alpha = abs(eta) * float(np.linalg.norm(w))
    g = np.zeros(m + 1, dtype=np.complex128)
    g[0] = basis.beta
    try:
        y_gm, gm_res = hessenberg_lstsq(Hs, g)
    except RankDeficient:
        raise FomSingular(f"projected least-squares problem is rank deficient for sigma = {sigma}") from None
    vnorm = float(np.linalg.norm(basis.V[:, m]))
    fom_res = abs(eta * y_fom[-1]) * vnorm
    gap = float(np.linalg.norm(basis.Vm1 @ (Hs @ (y_gm - y_fom))))
    bound = alpha * (1 + alpha) / (1 + alpha ** 2) * fom_res
    # the gap is a difference of two computed residuals, each accurate to O(eps ||Hs|| ||y||)
    roundoff = 1e3 * np.finfo(float).eps * np.linalg.norm(Hs, 2) * max(
        np.linalg.norm(y_fom), np.linalg.norm(y_gm))
    return GapBoundReport(complex(sigma), eta, alpha, float(fom_res), float(gm_res), float(bound),
                          gap, y_fom, y_gm, float(roundoff))


def diagnose(family, basis, shifts=None) -> list[dict]:
    """Ritz data and both bounds for each shift, as JSON-ready dictionaries.

    The FOM residual is evaluated directly (``||b - (K + sigma M) Z y||``) and
    compared with the Ritz bound; per-shift failures are reported, not raised.
    """
    shifts = family.shifts if shifts is None else np.atleast_1d(shifts)
    rhs = basis.beta * basis.V[:, 0]
    out = []
    for sigma in shifts:
        entry: dict = dict(sigma=[float(np.real(sigma)), float(np.imag(sigma))])
        try:
            gap = fom_gmres_gap(basis, sigma)
        except FomSingular as exc:
            entry["error"] = str(exc)
            out.append(entry)
            continue
        entry["gap"] = gap.as_dict()
        r_fom = float(np.linalg.norm(family.residual(sigma, basis.Zm @ gap.y_fom, rhs)))
        entry["fom_residual_direct"] = r_fom
        try:
            rep = ritz_pairs(basis, sigma, family)
        except IllConditionedReduction as exc:
            entry["ritz_error"] = str(exc)
            out.append(entry)
            continue
        bound, degenerate = fom_residual_bound(rep)
        entry["ritz"] = rep.as_dict()
        entry["fom_bound"] = bound
        entry["fom_bound_degenerate"] = degenerate
        entry["fom_bound_holds"] = bool(degenerate or r_fom <= bound * (1 + 1e-8) + 1e-14 * basis.beta)
        out.append(entry)
    return out
