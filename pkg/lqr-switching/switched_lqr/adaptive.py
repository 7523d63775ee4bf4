"""Certainty equivalent learning loop wrapped by the switched controller

The learner fits (A, B) by least squares on every transition seen so far,
recomputes the Riccati gain at steps k = 1, 2, 4, 8, ... and uses it as the
primary gain. Exploration k^(-1/4) zeta_k is added on top of whatever the
switching logic decides. M_k and t_k grow logarithmically unless fixed.
"""

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg, stats
from tqdm.auto import tqdm

from switched_lqr.certificates import FallbackCertificate, bounded_cost_bound
from switched_lqr.control_core import (
    Cost,
    LinearPlant,
    LQWeights,
    is_infinite,
    linear_feedback_cost,
    solve_riccati,
    spectral_radius,
)
from switched_lqr.errors import (
    DomainError,
    RankDeficiencyError,
    SolverError,
    ValidityError,
)
from switched_lqr.montecarlo import (
    EXPLORATION_NOISE,
    RngStream,
    TrajectoryRecord,
    paired_compare,
    rollout,
)
from switched_lqr.switching import (
    ControlDecision,
    Controller,
    Mode,
    SwitchConfig,
    SwitchedPolicy,
    SwitchState,
    linear_policy,
    switch_step,
)
from switched_lqr.utils import as_matrix


logger = logging.getLogger(__name__)

# Gram matrices worse conditioned than this are solved by lstsq
MAX_GRAM_CONDITION = 1e12


def schedule(
    k: int, M_min: float = 1.0, t_floor: int = 1, log_base: float = math.e
) -> tuple[float, int]:
    """(M_k, t_k) = (max(log(k+1), M_min), max(floor(log(k+1)), t_floor))"""
    if k < 0:
        raise DomainError(f"Step must be nonnegative, got {k}")
    level = math.log(k + 1, log_base)
    return max(level, M_min), max(math.floor(level), t_floor)


def is_update_step(k: int) -> bool:
    """k is a positive power of two (or 1)"""
    return k > 0 and k & (k - 1) == 0


@dataclass(frozen=True, eq=False)
class AdaptiveConfig:
    """Learning loop knobs

    fixed_M / fixed_t replace the logarithmic schedule when set
    """

    K0: np.ndarray
    exploration_exponent: float = -0.25
    exploration_scale: float = 1.0
    ridge: float = 1e-6
    M_min: float = 1.0
    t_floor: int = 1
    log_base: float = math.e
    fixed_M: float | None = None
    fixed_t: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "K0", as_matrix(self.K0, "K0"))
        if self.ridge < 0:
            raise DomainError(f"Ridge must be nonnegative, got {self.ridge}")
        if self.M_min <= 0 or self.t_floor < 1:
            raise DomainError("Schedule floors must be positive")

    def hyperparameters(self, k: int) -> tuple[float, int]:
        """(M_k, t_k) in force at step k"""
        M_k, t_k = schedule(k, self.M_min, self.t_floor, self.log_base)
        if self.fixed_M is not None:
            M_k = self.fixed_M
        if self.fixed_t is not None:
            t_k = self.fixed_t
        return M_k, t_k

    def exploration_level(self, k: int) -> float:
        """Scale of the probing noise at step k (k=0 uses the k=1 scale)"""
        return self.exploration_scale * max(k, 1) ** self.exploration_exponent


class RecursiveLeastSquares:
    """Running Gram sums for the regression x_{k+1} = [A B] [x_k; u_k]"""

    def __init__(self, n: int, m: int, ridge: float = 0.0):
        self.n = n
        self.m = m
        self.ridge = ridge
        self.gram = np.zeros((n + m, n + m))
        self.cross = np.zeros((n, n + m))
        self.count = 0

    def update(self, x, u, x_next):
        z = np.concatenate((np.asarray(x, dtype=float), np.asarray(u, dtype=float)))
        self.gram += np.outer(z, z)
        self.cross += np.outer(np.asarray(x_next, dtype=float), z)
        self.count += 1

    def estimate(self) -> tuple[np.ndarray, np.ndarray]:
        """Ridge regularized least squares (A_hat, B_hat)"""
        d = self.n + self.m
        gram = self.gram + self.ridge * np.eye(d)
        if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(self.cross))):
            raise ValidityError("Regression sums overflowed")
        if self.ridge == 0 and np.linalg.matrix_rank(gram) < d:
            raise RankDeficiencyError(
                f"Regressor Gram matrix is singular after {self.count} samples"
            )
        if np.linalg.cond(gram) > MAX_GRAM_CONDITION:
            logger.debug(
                "Ill-conditioned Gram matrix after %d samples, using lstsq", self.count
            )
            theta = linalg.lstsq(gram, self.cross.T)[0].T
            return theta[:, : self.n], theta[:, self.n :]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            try:
                theta = linalg.solve(gram, self.cross.T, assume_a="pos").T
            except linalg.LinAlgError as e:
                raise RankDeficiencyError("Regressor Gram matrix is singular") from e
        return theta[:, : self.n], theta[:, self.n :]


def least_squares_fit(history, ridge: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """(A_hat, B_hat) from a sequence of (x_k, u_k, x_{k+1}) transitions"""
    history = list(history)
    if not history:
        raise DomainError("Least squares needs at least one transition")
    x, u, _ = history[0]
    rls = RecursiveLeastSquares(len(np.atleast_1d(x)), len(np.atleast_1d(u)), ridge)
    for x, u, x_next in history:
        rls.update(np.atleast_1d(x), np.atleast_1d(u), np.atleast_1d(x_next))
    return rls.estimate()


def certainty_equivalent_gain(A_hat, B_hat, weights: LQWeights) -> np.ndarray | None:
    """Riccati gain of the estimated model, or None when it can't be computed"""
    try:
        _, K, _ = solve_riccati(A_hat, B_hat, weights.Q, weights.R)
    except (SolverError, ValidityError) as e:
        logger.warning("Certainty equivalent gain unavailable: %s", e)
        return None
    return K


@dataclass(frozen=True, eq=False)
class GainUpdate:
    """Gain recomputation at step k; K_hat is the gain in force afterwards"""

    k: int
    A_hat: np.ndarray | None
    B_hat: np.ndarray | None
    K_hat: np.ndarray
    stabilizing: bool
    accepted: bool


class CertaintyEquivalentController(Controller):
    """Learning controller: least squares, Riccati gain, switching, probing

    Holds the regression data, so each instance drives a single trajectory
    """

    is_pure = False

    def __init__(
        self,
        plant: LinearPlant,
        weights: LQWeights,
        config: AdaptiveConfig,
        horizon: int,
        rng: RngStream,
        switching_enabled: bool = True,
    ):
        self.plant = plant
        self.weights = weights
        self.config = config
        self.switching_enabled = switching_enabled
        self.gain = config.K0.copy()
        self.rls = RecursiveLeastSquares(plant.n, plant.m, config.ridge)
        self.updates: list[GainUpdate] = []

        # per-step logs
        self.zeta = rng.channel(EXPLORATION_NOISE).standard_normal((horizon, plant.m))
        self.probes = np.zeros((horizon, plant.m))
        self.thresholds = np.zeros(horizon)
        self.dwell_times = np.zeros(horizon, dtype=int)

        self._switch_config = None

    def initial_state(self) -> SwitchState:
        return SwitchState()

    def _update_gain(self, k: int):
        A_hat = B_hat = None
        K = None
        try:
            A_hat, B_hat = self.rls.estimate()
            K = certainty_equivalent_gain(A_hat, B_hat, self.weights)
        except (RankDeficiencyError, ValidityError) as e:
            logger.warning("Step %d: no estimate, %s", k, e)

        accepted = K is not None
        if accepted:
            self.gain = K
            self._switch_config = None
        stabilizing = spectral_radius(self.plant.closed_loop(self.gain)) < 1.0
        self.updates.append(
            GainUpdate(
                k=k,
                A_hat=A_hat,
                B_hat=B_hat,
                K_hat=self.gain.copy(),
                stabilizing=stabilizing,
                accepted=accepted,
            )
        )
        logger.info(
            "Step %d: gain %s, stabilizing=%s",
            k,
            "updated" if accepted else "kept",
            stabilizing,
        )

    def _config_for(self, M_k: float, t_k: int) -> SwitchConfig:
        config = self._switch_config
        if config is None or config.M != M_k or config.t != t_k:
            config = SwitchConfig(K0=self.config.K0, K1=self.gain, M=M_k, t=t_k)
            self._switch_config = config
        return config

    def step(self, k: int, x: np.ndarray, state: SwitchState) -> ControlDecision:
        if is_update_step(k):
            self._update_gain(k)

        M_k, t_k = self.config.hyperparameters(k)
        self.thresholds[k] = M_k
        self.dwell_times[k] = t_k

        if self.switching_enabled:
            decision = switch_step(x, state, self._config_for(M_k, t_k))
        else:
            decision = ControlDecision(
                u=self.gain @ x, mode=Mode.PRIMARY, triggered=False, next_state=state
            )

        probe = self.config.exploration_level(k) * self.zeta[k]
        self.probes[k] = probe
        return dataclasses.replace(decision, u=decision.u + probe)

    def observe(self, k: int, x: np.ndarray, u: np.ndarray, x_next: np.ndarray):
        self.rls.update(x, u, x_next)


@dataclass(eq=False)
class AdaptiveRecord:
    """Per-step and per-update log of one learning run"""

    config: AdaptiveConfig
    seed: int
    switching_enabled: bool
    trajectory: TrajectoryRecord
    thresholds: np.ndarray
    dwell_times: np.ndarray
    probes: np.ndarray
    zeta: np.ndarray
    updates: list[GainUpdate]

    @property
    def update_steps(self) -> list[int]:
        return [update.k for update in self.updates]

    @property
    def diverged(self) -> bool:
        return self.trajectory.diverged

    @property
    def final_estimates(self) -> tuple[np.ndarray | None, np.ndarray | None]:
        for update in reversed(self.updates):
            if update.A_hat is not None:
                return update.A_hat, update.B_hat
        return None, None

    def gains(self) -> list[np.ndarray]:
        """Every primary gain used during the run, K0 first"""
        return [self.config.K0] + [update.K_hat for update in self.updates]

    def gain_at(self, k: int) -> np.ndarray:
        """Primary gain in force at step k"""
        gain = self.config.K0
        for update in self.updates:
            if update.k > k:
                break
            gain = update.K_hat
        return gain


def adaptive_run(
    plant: LinearPlant,
    weights: LQWeights,
    config: AdaptiveConfig,
    horizon: int,
    seed: int,
    switching_enabled: bool = True,
    fixed_M: float | None = None,
    fixed_t: int | None = None,
) -> AdaptiveRecord:
    """One learning run; runs with equal seeds share w_k and zeta_k"""
    if horizon < 1:
        raise DomainError(f"Horizon must be positive, got {horizon}")
    if fixed_M is not None or fixed_t is not None:
        config = dataclasses.replace(
            config,
            fixed_M=config.fixed_M if fixed_M is None else fixed_M,
            fixed_t=config.fixed_t if fixed_t is None else fixed_t,
        )

    rng = RngStream(seed, 0)
    controller = CertaintyEquivalentController(
        plant, weights, config, horizon, rng, switching_enabled
    )
    trajectory = rollout(plant, weights, controller, horizon, rng)
    steps = trajectory.horizon
    record = AdaptiveRecord(
        config=config,
        seed=seed,
        switching_enabled=switching_enabled,
        trajectory=trajectory,
        thresholds=controller.thresholds[:steps],
        dwell_times=controller.dwell_times[:steps],
        probes=controller.probes[:steps],
        zeta=controller.zeta[:steps],
        updates=controller.updates,
    )
    logger.info(
        "Adaptive run seed=%d switching=%s: %d steps, %d triggers, diverged=%s",
        seed,
        switching_enabled,
        steps,
        trajectory.trigger_count,
        trajectory.diverged,
    )
    return record


class GapPoint(NamedTuple):
    """Switched versus linear cost of the gain in force after an update

    J_switched and stderr are the Monte Carlo switched cost, J_linear the
    exact stationary cost of the gain. gap is the paired Monte Carlo
    difference between the switched and the plain linear loop on the same
    noise, None when the gain is not stabilizing or either run diverged.
    """

    k: int
    M: float
    t: int
    J_switched: Cost
    stderr: Cost
    J_linear: Cost
    gap: float | None
    gap_stderr: float | None
    stabilizing: bool


def gap_curve(
    plant: LinearPlant,
    weights: LQWeights,
    record: AdaptiveRecord,
    eval_horizon: int = 100,
    eval_n_traj: int = 1000,
    seed: int = 0,
    threads: int = 1,
    progress: bool = False,
) -> list[GapPoint]:
    """Evaluate each updated gain frozen, switched and unswitched on shared noise"""
    points = []
    for update in tqdm(record.updates, desc="gap curve", disable=not progress):
        M_k, t_k = record.config.hyperparameters(update.k)
        J_linear = linear_feedback_cost(plant, weights, update.K_hat)
        policy = SwitchedPolicy(
            SwitchConfig(K0=record.config.K0, K1=update.K_hat, M=M_k, t=t_k)
        )
        comparison = paired_compare(
            plant,
            weights,
            policy,
            linear_policy(update.K_hat),
            eval_horizon,
            eval_n_traj,
            seed,
            threads,
        )
        switched, linear = comparison.first, comparison.second
        gap = gap_stderr = None
        if not (is_infinite(J_linear) or switched.diverged or linear.diverged):
            gap = comparison.mean_difference
            gap_stderr = comparison.stderr_difference
        points.append(
            GapPoint(
                k=update.k,
                M=M_k,
                t=t_k,
                J_switched=switched.mean,
                stderr=switched.stderr,
                J_linear=J_linear,
                gap=gap,
                gap_stderr=gap_stderr,
                stabilizing=update.stabilizing,
            )
        )
    return points


def decay_slope(points: list[GapPoint], last: int = 5) -> float:
    """Theil-Sen slope of log(gap) against log(k) over the final `last` updates

    Every one of those updates must carry a positive gap.
    """
    if last < 2:
        raise DomainError(f"A slope needs at least two points, got last={last}")
    if len(points) < last:
        raise DomainError(f"Need {last} updates to fit a slope, got {len(points)}")
    tail = points[-last:]
    missing = [p.k for p in tail if p.gap is None or not p.gap > 0]
    if missing:
        raise DomainError(f"Gap is missing or non-positive at k = {missing}")
    log_k = np.log([p.k for p in tail])
    log_gap = np.log([p.gap for p in tail])
    return float(stats.theilslopes(log_gap, log_k).slope)


def safety_cost_bound(
    plant: LinearPlant,
    weights: LQWeights,
    record: AdaptiveRecord,
    cert0: FallbackCertificate,
    M: float | None = None,
) -> float:
    """Bounded-cost guarantee evaluated at the worst gain of the run

    M defaults to the largest threshold used during the run
    """
    M = float(record.thresholds.max()) if M is None else M
    return max(
        bounded_cost_bound(plant, weights, record.config.K0, gain, M, cert0)
        for gain in record.gains()
    )
