"""Lyapunov certificates and closed-form bounds for the switched controller

Notation
- A0 = A + B K0 (fallback loop), A1 = A + B K1 (primary loop)
- (P0, rho0): A0^T P0 A0 < rho0 P0
- (P, rho, t): A1^T P A1 < rho P and (A0^t)^T P A0^t < rho P
- W_tilde: stationary state covariance of the fallback loop
- kappa = ||W_tilde|| ||P|| ||P^-1||, which every tail constant depends on
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from switched_lqr.control_core import (
    LinearPlant,
    LQWeights,
    solve_stein,
    spectral_radius,
    weighted_matrix_norm,
    weighted_operator_norm,
)
from switched_lqr.errors import (
    CertificateError,
    ConvergenceError,
    DomainError,
    InfeasibleRhoError,
    NotStabilizingError,
    PreconditionError,
)
from switched_lqr.utils import (
    as_matrix,
    check_positive_definite,
    check_rho,
    spectral_norm,
    symmetrize,
)


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CertificateSettings:
    """Certificate construction and series knobs"""

    margin: float = 1e-8
    max_dwell: int = 10_000
    series_tolerance: float = 1e-12
    max_series_terms: int = 100_000


DEFAULT_CERTIFICATE = CertificateSettings()


@dataclass(frozen=True, eq=False)
class FallbackCertificate:
    """(P0, rho0) with (A + B K0)^T P0 (A + B K0) < rho0 P0"""

    P0: np.ndarray
    rho0: float

    def __post_init__(self):
        P0 = as_matrix(self.P0, "P0")
        check_positive_definite(P0, "P0")
        check_rho(self.rho0, "rho0")
        object.__setattr__(self, "P0", symmetrize(P0))


@dataclass(frozen=True, eq=False)
class CommonLyapunovCertificate:
    """(P, rho, t_min) shared by A + B K1 and (A + B K0)^t for t = t_min"""

    P: np.ndarray
    rho: float
    t_min: int

    def __post_init__(self):
        P = as_matrix(self.P, "P")
        check_positive_definite(P, "P")
        check_rho(self.rho, "rho")
        if self.t_min < 1:
            raise DomainError(f"t_min must be positive, got {self.t_min}")
        object.__setattr__(self, "P", symmetrize(P))


@dataclass(frozen=True)
class CertificateCheck:
    """Outcome of a margin check: margin = rho - ||A^T P A||_P"""

    passed: bool
    margin: float


def contraction_margin(A_cl, P, rho: float) -> float:
    """rho minus the largest eigenvalue of P^(-1/2) A^T P A P^(-1/2)"""
    A_cl = as_matrix(A_cl, "A_cl")
    return rho - weighted_matrix_norm(symmetrize(A_cl.T @ P @ A_cl), P)


def check_certificate(
    plant: LinearPlant,
    K,
    P,
    rho: float,
    power: int = 1,
    settings: CertificateSettings = DEFAULT_CERTIFICATE,
) -> CertificateCheck:
    """Independent check of ((A + BK)^power)^T P (A + BK)^power < rho P"""
    A_cl = np.linalg.matrix_power(plant.closed_loop(K), power)
    margin = contraction_margin(A_cl, as_matrix(P, "P"), rho)
    return CertificateCheck(passed=margin >= settings.margin, margin=margin)


def check_fallback_certificate(
    plant: LinearPlant, K0, cert: FallbackCertificate
) -> CertificateCheck:
    """Check the fallback inequality for a certificate"""
    return check_certificate(plant, K0, cert.P0, cert.rho0)


def check_common_certificate(
    plant: LinearPlant, K0, K1, cert: CommonLyapunovCertificate, t: int | None = None
) -> tuple[CertificateCheck, CertificateCheck]:
    """Check both common Lyapunov inequalities, the dwell one at t (default t_min)"""
    t = cert.t_min if t is None else t
    primary = check_certificate(plant, K1, cert.P, cert.rho)
    dwell = check_certificate(plant, K0, cert.P, cert.rho, power=t)
    return primary, dwell


def default_rho(radius: float) -> float:
    """Midpoint between the squared spectral radius and 1"""
    return (1.0 + radius**2) / 2.0


def _stabilizing_radius(plant: LinearPlant, K, label: str) -> float:
    radius = spectral_radius(plant.closed_loop(K))
    if radius >= 1.0:
        raise NotStabilizingError(
            f"{label} gain isn't stabilizing, spectral radius {radius}",
            spectral_radius=radius,
        )
    return radius


def _scaled_certificate(A_cl: np.ndarray, radius: float, rho: float | None):
    """Solve (A/sqrt(rho))^T P (A/sqrt(rho)) + I = P, so A^T P A = rho (P - I)"""
    rho = default_rho(radius) if rho is None else float(rho)
    check_rho(rho)
    if rho <= radius**2:
        raise InfeasibleRhoError(
            f"rho={rho} must exceed the squared spectral radius {radius**2}"
        )
    P = solve_stein(A_cl / math.sqrt(rho), np.eye(A_cl.shape[0]), "adjoint")
    return symmetrize(P), rho


def build_fallback_certificate(
    plant: LinearPlant,
    K0,
    rho0: float | None = None,
    settings: CertificateSettings = DEFAULT_CERTIFICATE,
) -> FallbackCertificate:
    """Certificate (P0, rho0) for the fallback loop"""
    K0 = as_matrix(K0, "K0")
    A0 = plant.closed_loop(K0)
    radius = _stabilizing_radius(plant, K0, "Fallback")
    P0, rho0 = _scaled_certificate(A0, radius, rho0)

    cert = FallbackCertificate(P0=P0, rho0=rho0)
    check = check_certificate(plant, K0, P0, rho0, settings=settings)
    if not check.passed:
        raise CertificateError(
            f"Fallback certificate margin {check.margin:.3e} below {settings.margin}",
            margin=check.margin,
        )
    logger.info(
        "Fallback certificate: rho(A0)=%.6g rho0=%.6g margin=%.3e",
        radius,
        rho0,
        check.margin,
    )
    return cert


def minimal_dwell_time(
    plant: LinearPlant,
    K0,
    P,
    rho: float,
    settings: CertificateSettings = DEFAULT_CERTIFICATE,
) -> int:
    """Smallest t with (A0^t)^T P A0^t < rho P"""
    A0 = plant.closed_loop(K0)
    P = as_matrix(P, "P")
    power = A0.copy()
    for t in range(1, settings.max_dwell + 1):
        if contraction_margin(power, P, rho) >= settings.margin:
            logger.debug("Dwell time search stopped at t=%d", t)
            return t
        power = power @ A0
    raise ConvergenceError(
        f"No dwell time up to {settings.max_dwell} satisfies the certificate",
        residual=-contraction_margin(power, P, rho),
        iterations=settings.max_dwell,
    )


def build_common_certificate(
    plant: LinearPlant,
    K0,
    K1,
    rho: float | None = None,
    settings: CertificateSettings = DEFAULT_CERTIFICATE,
) -> CommonLyapunovCertificate:
    """Common certificate (P, rho, t_min) for A + B K1 and (A + B K0)^t"""
    K0 = as_matrix(K0, "K0")
    K1 = as_matrix(K1, "K1")
    _stabilizing_radius(plant, K0, "Fallback")
    radius1 = _stabilizing_radius(plant, K1, "Primary")
    P, rho = _scaled_certificate(plant.closed_loop(K1), radius1, rho)

    primary = check_certificate(plant, K1, P, rho, settings=settings)
    if not primary.passed:
        raise CertificateError(
            f"Primary certificate margin {primary.margin:.3e} below {settings.margin}",
            margin=primary.margin,
        )
    t_min = minimal_dwell_time(plant, K0, P, rho, settings)
    logger.info("Common certificate: rho=%.6g t_min=%d", rho, t_min)
    return CommonLyapunovCertificate(P=P, rho=rho, t_min=t_min)


def process_gramian(plant: LinearPlant, K0) -> np.ndarray:
    """W_tilde = sum over tau of A0^tau W (A0^tau)^T"""
    return solve_stein(plant.closed_loop(as_matrix(K0, "K0")), plant.W, "forward")


def _kappa(W_tilde: np.ndarray, P: np.ndarray) -> float:
    """||W_tilde|| ||P|| ||P^-1||"""
    P = as_matrix(P, "P")
    check_positive_definite(P, "P")
    P_inv_norm = 1.0 / float(linalg.eigvalsh(P)[0])
    return spectral_norm(as_matrix(W_tilde, "W_tilde")) * spectral_norm(P) * P_inv_norm


def threshold_floor(W_tilde, P, rho: float) -> float:
    """M0 = sqrt(3 kappa) / (1 - rho^(1/4))"""
    check_rho(rho)
    return math.sqrt(3 * _kappa(W_tilde, P)) / (1 - rho ** (1 / 4))


def second_moment_bound(M: float, script_A: float, P0, rho0: float, W) -> float:
    """Bound on E x^T P0 x: (M^2 A^2 ||P0|| + tr(W P0)) / (1 - rho0)"""
    if not 0 < M < math.inf:
        raise DomainError(f"Threshold M must be positive and finite, got {M}")
    check_rho(rho0, "rho0")
    P0 = as_matrix(P0, "P0")
    W = as_matrix(W, "W")
    return (M**2 * script_A**2 * spectral_norm(P0) + float(np.trace(W @ P0))) / (
        1 - rho0
    )


def gain_spread(plant: LinearPlant, K0, K1) -> float:
    """max(||A + B K0||, ||A + B K1||)"""
    return max(
        spectral_norm(plant.closed_loop(K0)), spectral_norm(plant.closed_loop(K1))
    )


def bounded_cost_bound(
    plant: LinearPlant,
    weights: LQWeights,
    K0,
    K1,
    M: float,
    cert: FallbackCertificate,
) -> float:
    """Upper bound on the switched cost, valid for any primary gain K1"""
    weights.check_plant(plant)
    K0 = as_matrix(K0, "K0")
    K1 = as_matrix(K1, "K1")
    check = check_fallback_certificate(plant, K0, cert)
    if not check.passed:
        raise CertificateError(
            f"Fallback certificate fails with margin {check.margin:.3e}",
            margin=check.margin,
        )

    script_A = gain_spread(plant, K0, K1)
    Q01 = symmetrize(weights.Q + K0.T @ weights.R @ K0 + K1.T @ weights.R @ K1)
    return second_moment_bound(M, script_A, cert.P0, cert.rho0, plant.W) * (
        weighted_matrix_norm(Q01, cert.P0)
    )


def _fourth_moment_terms(n: int, P, rho: float, P0, W_tilde) -> tuple[float, float]:
    """(script_Q, script_Q ||P0||_P^2 + (n^2 + 2n) ||P0||_{W_tilde^-1}^2)"""
    check_rho(rho)
    P = as_matrix(P, "P")
    P0 = as_matrix(P0, "P0")
    W_tilde = as_matrix(W_tilde, "W_tilde")
    check_positive_definite(W_tilde, "W_tilde")
    W_inv = symmetrize(linalg.inv(W_tilde))
    dim = n**2 + 2 * n

    script_Q = (
        6 * rho * float(np.trace(W_tilde @ P)) ** 2
        + (1 - rho) * dim * weighted_matrix_norm(P, W_inv) ** 2
    ) / ((1 - rho) * (1 - rho**2))
    inner = (
        script_Q * weighted_matrix_norm(P0, P) ** 2
        + dim * weighted_matrix_norm(P0, W_inv) ** 2
    )
    return script_Q, inner


def fourth_moment_bound(n: int, P, rho: float, P0, W_tilde) -> tuple[float, float]:
    """(script_Q, bound on E ||x_k||_P0^4) for the switched loop"""
    script_Q, inner = _fourth_moment_terms(n, P, rho, P0, W_tilde)
    return script_Q, 8 * inner


def tail_factor(M: float, n: int, P, rho: float, W_tilde) -> float:
    """E(M), the per-dwell-step fallback probability factor"""
    check_rho(rho)
    if M < 0:
        raise DomainError(f"Threshold M must be nonnegative, got {M}")
    return (
        2 ** (n / 2 + 1)
        / (rho ** (-1 / 2) - 1)
        * math.exp(-((1 - rho ** (1 / 4)) ** 2) * M**2 / (4 * _kappa(W_tilde, P)))
    )


def tail_bound(M: float, t: int, n: int, P, rho: float, W_tilde) -> float:
    """t E(M), bounding P(u_k != K1 x_k); may exceed 1"""
    if t < 1:
        raise DomainError(f"Dwell time t must be positive, got {t}")
    return t * tail_factor(M, n, P, rho, W_tilde)


def decay_constant(rho: float, P, W_tilde) -> float:
    """c = (1 - rho^(1/4))^2 / (16 kappa), the exponent rate of the gap"""
    check_rho(rho)
    return (1 - rho ** (1 / 4)) ** 2 / (16 * _kappa(W_tilde, P))


def lyapunov_series_sum(
    A1, Q1, settings: CertificateSettings = DEFAULT_CERTIFICATE
) -> float:
    """Upper bound on sum over s >= 0 of ||A1^s||_Q1

    Terms are summed until one drops below the tolerance. The rest is bounded
    with q = ||A1^s0||_Q1 < 1: every later power is a window power times
    (A1^s0)^j, so the remainder is at most (window sum) / (1 - q).
    """
    A1 = as_matrix(A1, "A1")
    total = 0.0
    power = np.eye(A1.shape[0])
    s0 = None
    q = None
    for s in range(settings.max_series_terms):
        term = weighted_operator_norm(power, Q1)
        total += term
        if s0 is None and s > 0 and term < 1.0:
            s0, q = s, term
        if s0 is not None and term < settings.series_tolerance:
            break
        power = power @ A1
    else:
        raise ConvergenceError(
            "Series of weighted powers didn't reach its tolerance",
            residual=term,
            iterations=settings.max_series_terms,
        )

    window = 0.0
    for _ in range(s0):
        power = power @ A1
        window += weighted_operator_norm(power, Q1)
    return total + window / (1 - q)


@dataclass(frozen=True, eq=False)
class SwitchAnalysis:
    """Every intermediate constant of the gap bound"""

    M: float
    t: int
    W_tilde: np.ndarray
    M0: float
    script_A: float
    Q01: np.ndarray
    Q1: np.ndarray
    A1: np.ndarray
    Delta1: np.ndarray
    Delta2: np.ndarray
    script_Q: float
    fourth_moment: float
    tail: float
    G: float
    C1: float
    C2: float
    C2_weighted: float
    C3: float
    C4: float
    series_sum: float
    decay_c: float
    bound: float
    bound_weighted: float


def _gap_formula(C1, C2, C3, G) -> float:
    return 2 * C1 * C2 * G + (C2**2 + C3) * G**2


def gap_bound(
    plant: LinearPlant,
    weights: LQWeights,
    K0,
    K1,
    M: float,
    cert0: FallbackCertificate,
    cert: CommonLyapunovCertificate,
    t: int | None = None,
    settings: CertificateSettings = DEFAULT_CERTIFICATE,
) -> tuple[float, SwitchAnalysis]:
    """Bound on J(K1, M, t) - J(K1) with all its constants

    t defaults to the certificate's t_min. Refuses with PreconditionError
    when M < M0 or the dwell inequality doesn't hold at t.
    """
    weights.check_plant(plant)
    K0 = as_matrix(K0, "K0")
    K1 = as_matrix(K1, "K1")
    t = cert.t_min if t is None else int(t)
    n = plant.n
    Q, R = weights.Q, weights.R
    P0, rho0 = cert0.P0, cert0.rho0
    P, rho = cert.P, cert.rho

    # hypotheses
    check0 = check_certificate(plant, K0, P0, rho0, settings=settings)
    if not check0.passed:
        raise CertificateError(
            f"Fallback certificate fails with margin {check0.margin:.3e}",
            margin=check0.margin,
        )
    primary, dwell = check_common_certificate(plant, K0, K1, cert, t)
    if not primary.passed:
        raise CertificateError(
            f"Common certificate fails for K1 with margin {primary.margin:.3e}",
            margin=primary.margin,
        )
    if t < cert.t_min or dwell.margin < settings.margin:
        raise PreconditionError(
            f"Dwell time t={t} doesn't satisfy the certificate (t_min={cert.t_min})"
        )

    W_tilde = process_gramian(plant, K0)
    M0 = threshold_floor(W_tilde, P, rho)
    if M < M0:
        raise PreconditionError(f"Threshold M={M} is below M0={M0}")

    # moment and tail constants
    script_Q, inner = _fourth_moment_terms(n, P, rho, P0, W_tilde)
    tail = tail_bound(M, t, n, P, rho, W_tilde)
    C4 = 2 ** (3 / 4) * inner ** (1 / 4)
    G = C4 * tail ** (1 / 4)

    # gap constants
    A1 = plant.closed_loop(K1)
    Q1 = weights.feedback_weight(K1)
    Q01 = symmetrize(Q + K0.T @ R @ K0 + K1.T @ R @ K1)
    Delta1 = plant.B @ (K0 - K1)
    Delta2 = symmetrize(K0.T @ R @ K0 - K1.T @ R @ K1)

    C1 = math.sqrt(
        float(np.trace(plant.W @ P)) * weighted_matrix_norm(Q1, P) / (1 - rho)
    )
    series_sum = lyapunov_series_sum(A1, Q1, settings)
    Q1_P0 = weighted_matrix_norm(Q1, P0)
    C2 = spectral_norm(Delta1) * Q1_P0 * series_sum
    C2_weighted = weighted_operator_norm(Delta1, Q1) * Q1_P0 * series_sum
    C3 = spectral_norm(Delta2) / float(linalg.eigvalsh(P0)[0])

    bound = _gap_formula(C1, C2, C3, G)
    analysis = SwitchAnalysis(
        M=float(M),
        t=t,
        W_tilde=W_tilde,
        M0=M0,
        script_A=gain_spread(plant, K0, K1),
        Q01=Q01,
        Q1=Q1,
        A1=A1,
        Delta1=Delta1,
        Delta2=Delta2,
        script_Q=script_Q,
        fourth_moment=8 * inner,
        tail=tail,
        G=G,
        C1=C1,
        C2=C2,
        C2_weighted=C2_weighted,
        C3=C3,
        C4=C4,
        series_sum=series_sum,
        decay_c=decay_constant(rho, P, W_tilde),
        bound=bound,
        bound_weighted=_gap_formula(C1, C2_weighted, C3, G),
    )
    return bound, analysis


def certification_report(
    plant: LinearPlant,
    weights: LQWeights,
    K0,
    K1,
    rho0: float | None = None,
    rho: float | None = None,
    M: float | None = None,
    t: int | None = None,
) -> dict[str, object]:
    """Ordered key/value report of certificates, margins and requested bounds

    Sections that don't apply (K1 not stabilizing, M below M0, ...) are
    reported as 'inapplicable: <reason>' instead of raising
    """
    K0 = as_matrix(K0, "K0")
    K1 = as_matrix(K1, "K1")
    report: dict[str, object] = {
        "spectral_radius_A0": spectral_radius(plant.closed_loop(K0)),
        "spectral_radius_A1": spectral_radius(plant.closed_loop(K1)),
        "script_A": gain_spread(plant, K0, K1),
    }

    # fallback certificate and the any-K1 cost bound
    cert0 = build_fallback_certificate(plant, K0, rho0)
    report["rho0"] = cert0.rho0
    report["margin_fallback"] = check_fallback_certificate(plant, K0, cert0).margin
    report["norm_P0"] = spectral_norm(cert0.P0)
    if M is not None:
        report["M"] = M
        report["second_moment_bound"] = second_moment_bound(
            M, report["script_A"], cert0.P0, cert0.rho0, plant.W
        )
        report["bounded_cost_bound"] = bounded_cost_bound(
            plant, weights, K0, K1, M, cert0
        )

    W_tilde = process_gramian(plant, K0)
    report["norm_W_tilde"] = spectral_norm(W_tilde)

    # common certificate and everything that depends on it
    try:
        cert = build_common_certificate(plant, K0, K1, rho)
    except NotStabilizingError as e:
        report["common_certificate"] = f"inapplicable: {e}"
        return report

    primary, dwell = check_common_certificate(plant, K0, K1, cert)
    report["rho"] = cert.rho
    report["t_min"] = cert.t_min
    report["margin_primary"] = primary.margin
    report["margin_dwell"] = dwell.margin
    report["M0"] = threshold_floor(W_tilde, cert.P, cert.rho)
    script_Q, moment = fourth_moment_bound(plant.n, cert.P, cert.rho, cert0.P0, W_tilde)
    report["script_Q"] = script_Q
    report["fourth_moment_bound"] = moment
    report["decay_c"] = decay_constant(cert.rho, cert.P, W_tilde)

    if M is None:
        return report
    t = cert.t_min if t is None else t
    report["t"] = t
    report["tail_bound"] = tail_bound(M, t, plant.n, cert.P, cert.rho, W_tilde)
    try:
        bound, analysis = gap_bound(plant, weights, K0, K1, M, cert0, cert, t)
    except PreconditionError as e:
        report["gap_bound"] = f"inapplicable: {e}"
        return report
    report["C1"] = analysis.C1
    report["C2"] = analysis.C2
    report["C2_weighted"] = analysis.C2_weighted
    report["C3"] = analysis.C3
    report["C4"] = analysis.C4
    report["G"] = analysis.G
    report["gap_bound"] = bound
    report["gap_bound_weighted"] = analysis.bound_weighted
    return report
