"""Exception types raised by flexshift."""


class FlexShiftError(Exception):
    """Base class for all library errors."""


class SingularMatrix(FlexShiftError):
    """A zero pivot was met during a banded LU factorization."""

    def __init__(self, pivot_index, message=None):
        self.pivot_index = int(pivot_index)
        super().__init__(message or f"exactly singular pivot in column {self.pivot_index}")


class RankDeficient(FlexShiftError):
    """Least-squares matrix lost full column rank."""


class IllConditionedReduction(FlexShiftError):
    """Reduction of a generalized eigenproblem to standard form is unsafe."""

    def __init__(self, condition):
        self.condition = float(condition)
        super().__init__(f"B is numerically singular (condition estimate {self.condition:.3e})")


class FomSingular(FlexShiftError):
    """Square FOM subproblem H_m(sigma; T_m) is singular for one shift."""


class Unsupported(FlexShiftError):
    """Requested operation is outside what the library implements."""


class InnerStagnation(FlexShiftError):
    """Inner iterative solve stopped making progress.

    The best iterate found so far is kept on ``best_iterate``.
    """

    def __init__(self, best_iterate, residual, iterations):
        self.best_iterate = best_iterate
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(
            f"inner solver stagnated after {iterations} iterations (residual {residual:.3e})"
        )


class SaddleSingular(FlexShiftError):
    """Geostatistical saddle-point system could not be factorized."""


class ConfigError(FlexShiftError):
    """Invalid run configuration."""
