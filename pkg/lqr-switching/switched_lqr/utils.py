"""Utility functions"""

import numpy as np
from scipy import linalg

from switched_lqr.errors import (
    DefinitenessError,
    DimensionError,
    DomainError,
    ValidityError,
)


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Convert to a 2d float array, promoting scalars and vectors"""
    M = np.array(M, dtype=float, ndmin=2)
    if M.ndim != 2:
        raise DimensionError(f"{name} must be two dimensional, got shape {M.shape}")
    return M


def check_finite(M: np.ndarray, name: str = "matrix"):
    """Check the array has no nan or inf entries"""
    if not np.all(np.isfinite(M)):
        raise ValidityError(f"{name} has non-finite entries")


def check_square(M: np.ndarray, name: str = "matrix"):
    """Check the array is a square matrix"""
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")


def check_shape(M: np.ndarray, shape: tuple[int, ...], name: str = "matrix"):
    """Check the array has exactly the given shape"""
    if M.shape != tuple(shape):
        raise DimensionError(f"{name} has shape {M.shape}, expected {tuple(shape)}")


def check_symmetric(M: np.ndarray, name: str = "matrix", rtol: float = 1e-10):
    """Check the matrix is symmetric up to a relative tolerance"""
    check_square(M, name)
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    if np.abs(M - M.T).max(initial=0.0) > rtol * scale:
        raise DefinitenessError(f"{name} must be symmetric")


def check_positive_definite(M: np.ndarray, name: str = "matrix"):
    """Check the matrix is symmetric positive definite"""
    check_symmetric(M, name)
    try:
        linalg.cholesky(M, lower=True)
    except linalg.LinAlgError as e:
        raise DefinitenessError(f"{name} must be positive definite") from e


def check_positive_semidefinite(M: np.ndarray, name: str = "matrix", rtol=1e-10):
    """Check the matrix is symmetric positive semidefinite"""
    check_symmetric(M, name)
    eigs = linalg.eigvalsh(M)
    scale = max(1.0, float(np.abs(eigs).max(initial=0.0)))
    if eigs.min(initial=0.0) < -rtol * scale:
        raise DefinitenessError(
            f"{name} must be positive semidefinite, smallest eigenvalue {eigs.min()}"
        )


def check_rho(rho: float, name: str = "rho"):
    """Check a contraction rate lies strictly between 0 and 1"""
    if not 0.0 < rho < 1.0:
        raise DomainError(f"{name} must lie in (0, 1), got {rho}")


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Symmetric part of a square matrix"""
    return 0.5 * (M + M.T)


def spectral_norm(M: np.ndarray) -> float:
    """Induced 2-norm, i.e. the largest singular value"""
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def format_float(value: float) -> str:
    """Serialize a float with 17 significant digits"""
    return f"{value:.17g}"
