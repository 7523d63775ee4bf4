"""Seeded simulation of the plant under any controller and LQ cost estimation

Noise for trajectory i comes from a Philox stream keyed by
(seed, stream_id=i, channel), and is drawn for the whole horizon up front so
step k always sees the same w_k, whatever the controller does. Trajectories
are independent, so they can run on any number of threads; results are
reduced in trajectory index order.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg

from switched_lqr.control_core import (
    INFINITE,
    Cost,
    LinearPlant,
    LQWeights,
    cholesky_factor,
    is_infinite,
)
from switched_lqr.errors import DefinitenessError, DomainError
from switched_lqr.switching import Controller, Mode


logger = logging.getLogger(__name__)

PROCESS_NOISE = 0
EXPLORATION_NOISE = 1
DIVERGENCE_LIMIT = 1e300
SEED_LIMIT = 2**64


class RngStream:
    """Counter-based Philox stream keyed by (seed, stream_id, channel)

    The same key always reproduces the same draws; distinct stream ids or
    channels give independent streams
    """

    def __init__(self, seed: int, stream_id: int = 0, channel: int = PROCESS_NOISE):
        for value, name in ((seed, "seed"), (stream_id, "stream_id")):
            if not 0 <= value < SEED_LIMIT:
                raise DomainError(f"{name} must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.channel_id = int(channel)
        self._generator = None

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, channel={self.channel_id})"

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            sequence = np.random.SeedSequence(
                self.seed, spawn_key=(self.stream_id, self.channel_id)
            )
            self._generator = np.random.Generator(np.random.Philox(sequence))
        return self._generator

    def channel(self, channel: int) -> "RngStream":
        """Fresh stream for another noise source of the same trajectory"""
        return RngStream(self.seed, self.stream_id, channel)

    def standard_normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)


def noise_factor(W: np.ndarray) -> np.ndarray:
    """Square root factor of the noise covariance (Cholesky, or eigen for PSD W)"""
    try:
        return cholesky_factor(W)
    except DefinitenessError:
        eigs, V = linalg.eigh(W)
        if eigs.min(initial=0.0) < -1e-12 * max(1.0, eigs.max(initial=0.0)):
            raise
        return V * np.sqrt(np.clip(eigs, 0.0, None))


def sample_noise(L: np.ndarray, rng: RngStream) -> np.ndarray:
    """One draw of L z with z standard normal"""
    return L @ rng.standard_normal(L.shape[1])


@dataclass(eq=False)
class TrajectoryRecord:
    """One simulated trajectory, truncated at divergence"""

    states: np.ndarray
    inputs: np.ndarray
    modes: list[Mode]
    stage_costs: np.ndarray
    noises: np.ndarray
    triggered: np.ndarray
    diverged: bool = False

    @property
    def horizon(self) -> int:
        return len(self.inputs)

    @property
    def trigger_count(self) -> int:
        return int(self.triggered.sum())

    @property
    def fallback_steps(self) -> int:
        return sum(mode is Mode.FALLBACK for mode in self.modes)

    @property
    def max_state_norm(self) -> float:
        return float(np.linalg.norm(self.states, axis=1).max())

    @property
    def average_cost(self) -> Cost:
        if self.diverged:
            return INFINITE
        return float(self.stage_costs.sum() / self.horizon)


def rollout(
    plant: LinearPlant,
    weights: LQWeights,
    controller: Controller,
    horizon: int,
    rng: RngStream,
    x0=None,
) -> TrajectoryRecord:
    """Simulate x_{k+1} = A x_k + B u_k + w_k from x_0 = 0 (or the x0 test hook)"""
    if horizon < 1:
        raise DomainError(f"Horizon must be positive, got {horizon}")
    weights.check_plant(plant)
    n, m = plant.n, plant.m
    A, B, Q, R = plant.A, plant.B, weights.Q, weights.R

    noises = rng.standard_normal((horizon, n)) @ noise_factor(plant.W).T
    states = np.zeros((horizon + 1, n))
    inputs = np.zeros((horizon, m))
    stage_costs = np.zeros(horizon)
    triggered = np.zeros(horizon, dtype=bool)
    modes = []

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).reshape(n)
    states[0] = x
    state = controller.initial_state()
    steps = horizon
    diverged = False

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon):
            decision = controller.step(k, x, state)
            u = decision.u
            inputs[k] = u
            stage_costs[k] = x @ Q @ x + u @ R @ u
            modes.append(decision.mode)
            triggered[k] = decision.triggered

            x_next = A @ x + B @ u + noises[k]
            controller.observe(k, x, u, x_next)
            state = decision.next_state
            states[k + 1] = x_next
            x = x_next

            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_LIMIT:
                diverged = True
                steps = k + 1
                logger.warning("Trajectory %r diverged at step %d", rng, steps)
                break

    return TrajectoryRecord(
        states=states[: steps + 1],
        inputs=inputs[:steps],
        modes=modes,
        stage_costs=stage_costs[:steps],
        noises=noises[:steps],
        triggered=triggered[:steps],
        diverged=diverged,
    )


@dataclass(eq=False)
class CostEstimate:
    """Monte Carlo estimate of the time-averaged LQ cost"""

    mean: Cost
    stderr: Cost
    horizon: int
    n_traj: int
    seed: int
    fallback_fraction: float
    diverged: bool
    per_trajectory: np.ndarray = field(repr=False)
    trigger_counts: np.ndarray = field(repr=False)
    max_state_norms: np.ndarray = field(repr=False)

    @property
    def fallback_stderr(self) -> float:
        """Binomial standard error of the fallback fraction"""
        p = self.fallback_fraction
        return math.sqrt(p * (1 - p) / (self.n_traj * self.horizon))

    @property
    def mean_trigger_count(self) -> float:
        return float(self.trigger_counts.mean())

    def as_dict(self) -> dict[str, object]:
        return {
            "mean": str(INFINITE) if is_infinite(self.mean) else self.mean,
            "stderr": str(INFINITE) if is_infinite(self.stderr) else self.stderr,
            "horizon": self.horizon,
            "n_traj": self.n_traj,
            "seed": self.seed,
            "fallback_fraction": self.fallback_fraction,
            "diverged": self.diverged,
        }


class _TrajectorySummary(NamedTuple):
    cost: float
    steps: int
    fallback_steps: int
    trigger_count: int
    max_state_norm: float
    diverged: bool


def _map_trajectories(function, n_traj: int, threads: int) -> list:
    """Run function(i) for each trajectory index, results in index order"""
    if threads <= 1:
        return [function(i) for i in range(n_traj)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(function, range(n_traj)))


def _check_pure(controller: Controller):
    if not controller.is_pure:
        raise ValueError(
            "Monte Carlo estimation needs a pure controller, run learning controllers one trajectory at a time"
        )


def estimate_cost(
    plant: LinearPlant,
    weights: LQWeights,
    controller: Controller,
    horizon: int,
    n_traj: int,
    seed: int,
    threads: int = 1,
) -> CostEstimate:
    """Average over trajectories of the time-averaged stage cost"""
    if n_traj < 2:
        raise DomainError(f"Need at least 2 trajectories, got {n_traj}")
    _check_pure(controller)

    def summarize(i: int) -> _TrajectorySummary:
        record = rollout(plant, weights, controller, horizon, RngStream(seed, i))
        return _TrajectorySummary(
            cost=math.inf if record.diverged else float(record.stage_costs.sum() / horizon),
            steps=record.horizon,
            fallback_steps=record.fallback_steps,
            trigger_count=record.trigger_count,
            max_state_norm=record.max_state_norm,
            diverged=record.diverged,
        )

    summaries = _map_trajectories(summarize, n_traj, threads)
    costs = np.array([s.cost for s in summaries])
    diverged = any(s.diverged for s in summaries)
    total_steps = sum(s.steps for s in summaries)

    if diverged:
        mean = stderr = INFINITE
    else:
        mean = float(costs.mean())
        stderr = float(costs.std(ddof=1) / math.sqrt(n_traj))

    estimate = CostEstimate(
        mean=mean,
        stderr=stderr,
        horizon=horizon,
        n_traj=n_traj,
        seed=seed,
        fallback_fraction=sum(s.fallback_steps for s in summaries) / total_steps,
        diverged=diverged,
        per_trajectory=costs,
        trigger_counts=np.array([s.trigger_count for s in summaries]),
        max_state_norms=np.array([s.max_state_norm for s in summaries]),
    )
    logger.info(
        "Cost estimate %s +- %s over %d x %d steps (seed %d, fallback %.4f)",
        mean,
        stderr,
        n_traj,
        horizon,
        seed,
        estimate.fallback_fraction,
    )
    return estimate


class PairedComparison(NamedTuple):
    """Two estimates driven by the same noise, with per-trajectory differences"""

    first: CostEstimate
    second: CostEstimate
    differences: np.ndarray

    @property
    def mean_difference(self) -> float:
        return float(self.differences.mean())

    @property
    def stderr_difference(self) -> float:
        return float(self.differences.std(ddof=1) / math.sqrt(len(self.differences)))


def paired_compare(
    plant: LinearPlant,
    weights: LQWeights,
    controller_a: Controller,
    controller_b: Controller,
    horizon: int,
    n_traj: int,
    seed: int,
    threads: int = 1,
) -> PairedComparison:
    """Estimate both costs on identical noise; differences are a minus b"""
    first = estimate_cost(plant, weights, controller_a, horizon, n_traj, seed, threads)
    second = estimate_cost(plant, weights, controller_b, horizon, n_traj, seed, threads)
    with np.errstate(invalid="ignore"):
        differences = first.per_trajectory - second.per_trajectory
    return PairedComparison(first, second, differences)


class StateMoments(NamedTuple):
    """Monte Carlo E||x_k||_P^2 and E||x_k||_P^4 at chosen steps"""

    steps: list[int]
    second: np.ndarray
    second_stderr: np.ndarray
    fourth: np.ndarray
    fourth_stderr: np.ndarray


def estimate_state_moments(
    plant: LinearPlant,
    weights: LQWeights,
    controller: Controller,
    steps: list[int],
    n_traj: int,
    seed: int,
    P,
    threads: int = 1,
) -> StateMoments:
    """Second and fourth moments of the P-norm of the state at the given steps"""
    _check_pure(controller)
    steps = sorted(int(k) for k in steps)
    P = np.asarray(P, dtype=float)

    def squared_norms(i: int) -> np.ndarray:
        record = rollout(plant, weights, controller, max(steps), RngStream(seed, i))
        if record.diverged:
            return np.full(len(steps), np.inf)
        x = record.states[steps]
        return np.einsum("ki,ij,kj->k", x, P, x)

    samples = np.array(_map_trajectories(squared_norms, n_traj, threads))
    root_n = math.sqrt(n_traj)
    return StateMoments(
        steps=steps,
        second=samples.mean(axis=0),
        second_stderr=samples.std(axis=0, ddof=1) / root_n,
        fourth=(samples**2).mean(axis=0),
        fourth_stderr=(samples**2).std(axis=0, ddof=1) / root_n,
    )
