"""Flexible Krylov solvers for shifted systems and oscillatory hydraulic tomography."""

__version__ = "0.1.0"

from .exceptions import (
    ConfigError,
    FlexShiftError,
    FomSingular,
    IllConditionedReduction,
    InnerStagnation,
    RankDeficient,
    SaddleSingular,
    SingularMatrix,
    Unsupported,
)
from .shifted_krylov import (
    KrylovBasis,
    OperatorCounts,
    PreconditionerSchedule,
    ShiftedFamily,
    SolverConfig,
    default_tau_schedule,
    flexible_arnoldi_extend,
    run_shifted_solver,
)
from .oht_model import AquiferModel, Grid, discretize, forward_solve, measure

__all__ = [
    "ConfigError",
    "FlexShiftError",
    "FomSingular",
    "IllConditionedReduction",
    "InnerStagnation",
    "RankDeficient",
    "SaddleSingular",
    "SingularMatrix",
    "Unsupported",
    "KrylovBasis",
    "OperatorCounts",
    "PreconditionerSchedule",
    "ShiftedFamily",
    "SolverConfig",
    "default_tau_schedule",
    "flexible_arnoldi_extend",
    "run_shifted_solver",
    "AquiferModel",
    "Grid",
    "discretize",
    "forward_solve",
    "measure",
]
