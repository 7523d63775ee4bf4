"""Dense numerical primitives for discrete-time LQR

Plant x_{k+1} = A x_k + B u_k + w_k with w_k ~ N(0, W), stage cost
x^T Q x + u^T R u, Stein (discrete Lyapunov) equations, the Riccati
equation and the weighted norms used by the switching analysis.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal

import numpy as np
from scipy import linalg

from switched_lqr.errors import (
    ConvergenceError,
    DefinitenessError,
    InstabilityError,
    StabilizabilityError,
)
from switched_lqr.utils import (
    as_matrix,
    check_finite,
    check_positive_definite,
    check_positive_semidefinite,
    check_shape,
    check_square,
    check_symmetric,
    spectral_norm,
    symmetrize,
)


logger = logging.getLogger(__name__)

RANK_RTOL = 1e-8


class Unbounded(Enum):
    """Marker for an infinite LQ cost (closed loop not stable)"""

    INFINITE = "inf"

    def __str__(self):
        return self.value


INFINITE = Unbounded.INFINITE

Cost = float | Unbounded


def is_infinite(cost) -> bool:
    """True for the infinite cost marker"""
    return cost is INFINITE


def format_cost(cost: Cost) -> str:
    """Serialize a cost, writing the infinite marker as the literal 'inf'"""
    if is_infinite(cost):
        return str(INFINITE)
    return f"{cost:.17g}"


def _freeze(M: np.ndarray) -> np.ndarray:
    M = np.array(M, dtype=float)
    M.setflags(write=False)
    return M


@dataclass(frozen=True, eq=False)
class LinearPlant:
    """Plant matrices (A, B, W)

    strict=False skips the definiteness and controllability checks,
    which is only meant for degenerate test plants (W = 0, B = 0, ...)
    """

    A: np.ndarray
    B: np.ndarray
    W: np.ndarray
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        W = as_matrix(self.W, "W")

        # dimensions
        check_square(A, "A")
        n = A.shape[0]
        if B.shape[0] != n:
            B = B.T if B.shape[1] == n and B.shape[0] == 1 else B
        check_shape(B, (n, B.shape[1]), "B")
        check_shape(W, (n, n), "W")
        for M, name in ((A, "A"), (B, "B"), (W, "W")):
            check_finite(M, name)

        if self.strict:
            check_positive_definite(W, "W")
            if not is_controllable(A, B):
                raise StabilizabilityError("(A, B) must be controllable")
        else:
            check_symmetric(W, "W")

        object.__setattr__(self, "A", _freeze(A))
        object.__setattr__(self, "B", _freeze(B))
        object.__setattr__(self, "W", _freeze(symmetrize(W)))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        """A + BK"""
        K = as_matrix(K, "K")
        check_shape(K, (self.m, self.n), "K")
        return self.A + self.B @ K


@dataclass(frozen=True, eq=False)
class LQWeights:
    """Stage cost weights (Q, R)"""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = as_matrix(self.Q, "Q")
        R = as_matrix(self.R, "R")
        check_positive_definite(Q, "Q")
        check_positive_definite(R, "R")
        object.__setattr__(self, "Q", _freeze(symmetrize(Q)))
        object.__setattr__(self, "R", _freeze(symmetrize(R)))

    def check_plant(self, plant: LinearPlant):
        """Check the weights fit the plant dimensions"""
        check_shape(self.Q, (plant.n, plant.n), "Q")
        check_shape(self.R, (plant.m, plant.m), "R")

    def feedback_weight(self, K: np.ndarray) -> np.ndarray:
        """Q + K^T R K"""
        return symmetrize(self.Q + K.T @ self.R @ K)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Stabilizing solution of the Riccati equation with its gain and cost"""

    P_star: np.ndarray
    K_star: np.ndarray
    J_star: float
    residual: float


@dataclass(frozen=True)
class RiccatiSettings:
    """Riccati solver knobs"""

    tolerance: float = 1e-12
    max_iterations: int = 1_000_000
    residual_rtol: float = 1e-9
    use_scipy: bool = True


@dataclass(frozen=True)
class SteinSettings:
    """Stein solver knobs"""

    residual_rtol: float = 1e-9
    series_rtol: float = 1e-16
    max_doublings: int = 64


DEFAULT_RICCATI = RiccatiSettings()
DEFAULT_STEIN = SteinSettings()


def spectral_radius(M) -> float:
    """Largest eigenvalue modulus of a square matrix"""
    M = as_matrix(M)
    check_square(M)
    check_finite(M)
    if M.size == 0:
        return 0.0
    return float(np.abs(linalg.eigvals(M)).max())


def _numerical_rank(M: np.ndarray) -> int:
    if M.size == 0:
        return 0
    s = linalg.svdvals(M)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """[B, AB, ..., A^(n-1) B]"""
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def is_controllable(A, B) -> bool:
    """Rank test on the controllability matrix"""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    return _numerical_rank(controllability_matrix(A, B)) == A.shape[0]


def is_stabilizable(A, B) -> bool:
    """PBH test on the eigenvalues outside the open unit disk"""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    n = A.shape[0]
    for eig in linalg.eigvals(A):
        if abs(eig) < 1.0:
            continue
        pencil = np.hstack((A - eig * np.eye(n), B.astype(complex)))
        if _numerical_rank(pencil) < n:
            return False
    return True


def _stein_residual(A: np.ndarray, X: np.ndarray, C: np.ndarray) -> float:
    return spectral_norm(X - A @ X @ A.T - C)


def _stein_doubling(A: np.ndarray, C: np.ndarray, settings: SteinSettings):
    """Squared Smith iteration: X <- X + A^(2^i) X (A^(2^i))^T"""
    X = C.copy()
    power = A.copy()
    for _ in range(settings.max_doublings):
        increment = power @ X @ power.T
        X = symmetrize(X + increment)
        power = power @ power
        if spectral_norm(increment) <= settings.series_rtol * (1 + spectral_norm(X)):
            break
    return X


def solve_stein(
    A,
    C,
    orientation: Literal["forward", "adjoint"] = "forward",
    settings: SteinSettings = DEFAULT_STEIN,
) -> np.ndarray:
    """Unique fixed point of a Stein equation for Schur stable A

    orientation="forward" solves X = A X A^T + C (sum of A^t C (A^t)^T)
    orientation="adjoint" solves X = A^T X A + C (sum of (A^t)^T C A^t)
    """
    A = as_matrix(A, "A")
    C = as_matrix(C, "C")
    check_square(A, "A")
    check_finite(A, "A")
    check_shape(C, A.shape, "C")
    check_finite(C, "C")
    check_positive_semidefinite(C, "C")
    if orientation not in ("forward", "adjoint"):
        raise ValueError(f"Unknown orientation '{orientation}'")

    radius = spectral_radius(A)
    if radius >= 1.0:
        raise InstabilityError(
            f"Stein equation needs a stable matrix, spectral radius is {radius}",
            spectral_radius=radius,
        )

    A_map = A if orientation == "forward" else A.T
    C = symmetrize(C)
    X = symmetrize(linalg.solve_discrete_lyapunov(A_map, C))

    residual = _stein_residual(A_map, X, C)
    if not np.all(np.isfinite(X)) or residual > settings.residual_rtol * (
        1 + spectral_norm(X)
    ):
        logger.warning(
            "Direct Stein solve left residual %.3e, falling back to doubling", residual
        )
        X = _stein_doubling(A_map, C, settings)
        residual = _stein_residual(A_map, X, C)
        if residual > settings.residual_rtol * (1 + spectral_norm(X)):
            raise ConvergenceError(
                f"Stein solve residual {residual:.3e} above tolerance",
                residual=residual,
                iterations=settings.max_doublings,
            )
    return X


def riccati_map(A, B, Q, R, P) -> np.ndarray:
    """Right hand side of the Riccati equation evaluated at P"""
    BtPA = B.T @ P @ A
    gram = R + B.T @ P @ B
    return symmetrize(Q + A.T @ P @ A - BtPA.T @ linalg.solve(gram, BtPA))


def riccati_residual(A, B, Q, R, P) -> float:
    """Spectral norm of the Riccati equation residual at P"""
    return spectral_norm(riccati_map(A, B, Q, R, P) - P)


def riccati_gain(A, B, R, P) -> np.ndarray:
    """K = -(R + B^T P B)^-1 B^T P A"""
    return -linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def _value_iteration(A, B, Q, R, settings: RiccatiSettings) -> tuple[np.ndarray, int]:
    """Fixed point Riccati recursion started from P = Q"""
    P = Q.copy()
    change = np.inf
    for i in range(1, settings.max_iterations + 1):
        P_next = riccati_map(A, B, Q, R, P)
        if not np.all(np.isfinite(P_next)):
            raise StabilizabilityError("Riccati recursion diverged")
        change = spectral_norm(P_next - P)
        P = P_next
        if change <= settings.tolerance * (1 + spectral_norm(P)):
            logger.debug("Riccati recursion converged after %d iterations", i)
            return P, i
    raise ConvergenceError(
        f"Riccati recursion didn't converge in {settings.max_iterations} iterations",
        residual=riccati_residual(A, B, Q, R, P),
        iterations=settings.max_iterations,
    )


def solve_riccati(
    A, B, Q, R, settings: RiccatiSettings = DEFAULT_RICCATI
) -> tuple[np.ndarray, np.ndarray, float]:
    """Stabilizing Riccati solution on raw arrays

    Returns (P, K, residual). (A, B) only needs to be stabilizable, so this
    also serves estimated models.
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    Q = as_matrix(Q, "Q")
    R = as_matrix(R, "R")
    check_square(A, "A")
    n, m = B.shape
    check_shape(A, (n, n), "A")
    check_shape(Q, (n, n), "Q")
    check_shape(R, (m, m), "R")
    for M, name in ((A, "A"), (B, "B"), (Q, "Q"), (R, "R")):
        check_finite(M, name)

    if not is_stabilizable(A, B):
        raise StabilizabilityError("(A, B) isn't stabilizable")

    P = None
    if settings.use_scipy:
        try:
            P = symmetrize(linalg.solve_discrete_are(A, B, Q, R))
        except (linalg.LinAlgError, ValueError) as e:
            logger.debug("scipy Riccati solver failed: %s", e)
            P = None

    if P is not None:
        residual = riccati_residual(A, B, Q, R, P)
        if not np.isfinite(residual) or residual > settings.residual_rtol * (
            1 + spectral_norm(P)
        ):
            logger.warning(
                "Structured Riccati solve left residual %.3e, refining", residual
            )
            P = None

    if P is None:
        P, _ = _value_iteration(A, B, Q, R, settings)

    residual = riccati_residual(A, B, Q, R, P)
    if residual > settings.residual_rtol * (1 + spectral_norm(P)):
        raise ConvergenceError(
            f"Riccati residual {residual:.3e} above tolerance",
            residual=residual,
            iterations=settings.max_iterations,
        )

    K = riccati_gain(A, B, R, P)
    radius = spectral_radius(A + B @ K)
    if radius >= 1.0:
        raise StabilizabilityError(
            f"Riccati gain isn't stabilizing, closed loop spectral radius {radius}"
        )
    return P, K, residual


def dare_solve(
    plant: LinearPlant, weights: LQWeights, settings: RiccatiSettings = DEFAULT_RICCATI
) -> RiccatiSolution:
    """Optimal LQR gain K* and cost J* = tr(W P*)"""
    weights.check_plant(plant)
    P, K, residual = solve_riccati(plant.A, plant.B, weights.Q, weights.R, settings)
    return RiccatiSolution(
        P_star=_freeze(P),
        K_star=_freeze(K),
        J_star=float(np.trace(plant.W @ P)),
        residual=residual,
    )


def linear_feedback_cost(plant: LinearPlant, weights: LQWeights, K) -> Cost:
    """Exact LQ cost of u = Kx, or INFINITE when A + BK isn't stable"""
    weights.check_plant(plant)
    K = as_matrix(K, "K")
    A_K = plant.closed_loop(K)
    if spectral_radius(A_K) >= 1.0:
        return INFINITE
    P_K = solve_stein(A_K, weights.feedback_weight(K), "adjoint")
    return float(np.trace(plant.W @ P_K))


def weighted_matrix_norm(Q, P) -> float:
    """||Q||_P = ||P^(-1/2) Q P^(-1/2)||, the largest generalized eigenvalue"""
    Q = as_matrix(Q, "Q")
    P = as_matrix(P, "P")
    check_positive_definite(P, "P")
    check_shape(Q, P.shape, "Q")
    check_symmetric(Q, "Q")
    eigs = linalg.eigh(symmetrize(Q), symmetrize(P), eigvals_only=True)
    return float(eigs[-1])


def _sqrt_pair(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    eigs, V = linalg.eigh(symmetrize(P))
    if eigs.min() <= 0.0:
        raise DefinitenessError("P must be positive definite")
    return (V * np.sqrt(eigs)) @ V.T, (V / np.sqrt(eigs)) @ V.T


def weighted_operator_norm(A, P) -> float:
    """||P^(1/2) A P^(-1/2)||, the gain of A measured in the P-norm"""
    A = as_matrix(A, "A")
    P = as_matrix(P, "P")
    check_positive_definite(P, "P")
    check_shape(A, P.shape, "A")
    root, root_inv = _sqrt_pair(P)
    return spectral_norm(root @ A @ root_inv)


def cholesky_factor(W) -> np.ndarray:
    """Lower triangular L with L L^T = W"""
    W = as_matrix(W, "W")
    check_symmetric(W, "W")
    try:
        return linalg.cholesky(symmetrize(W), lower=True)
    except linalg.LinAlgError as e:
        raise DefinitenessError("W must be positive definite") from e
