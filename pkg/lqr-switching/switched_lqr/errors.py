"""Exceptions raised by the switched LQR toolkit"""


class SwitchedLQRError(Exception):
    """Base class for every error raised by this package"""


class DimensionError(SwitchedLQRError, ValueError):
    """Array shapes don't agree"""


class ValidityError(SwitchedLQRError, ValueError):
    """Non-finite or otherwise unusable input values"""


class DefinitenessError(SwitchedLQRError, ValueError):
    """A matrix that must be symmetric positive (semi)definite isn't"""


class InstabilityError(SwitchedLQRError):
    """A matrix that must be Schur stable has spectral radius >= 1"""

    def __init__(self, message: str, spectral_radius: float):
        super().__init__(message)
        self.spectral_radius = spectral_radius


class NotStabilizingError(InstabilityError):
    """A feedback gain doesn't stabilize the plant"""


class InfeasibleRhoError(SwitchedLQRError, ValueError):
    """Requested contraction rate can't be certified for the closed loop"""


class SolverError(SwitchedLQRError):
    """A matrix equation (Riccati or Stein) couldn't be solved"""


class ConvergenceError(SolverError):
    """An iteration ran out of steps before meeting its tolerance"""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class StabilizabilityError(SolverError):
    """(A, B) isn't stabilizable, so there is no stabilizing Riccati solution"""


class RankDeficiencyError(SwitchedLQRError):
    """Least squares regressors don't determine the estimate"""


class CertificateError(SwitchedLQRError):
    """A Lyapunov certificate fails its margin check"""

    def __init__(self, message: str, margin: float):
        super().__init__(message)
        self.margin = margin


class PreconditionError(SwitchedLQRError):
    """The hypotheses of a bound aren't met, so it isn't evaluated"""


class MatrixFormatError(SwitchedLQRError, ValueError):
    """Malformed matrix text file"""


class DomainError(SwitchedLQRError, ValueError):
    """A scalar parameter is outside the range a formula is defined on"""
