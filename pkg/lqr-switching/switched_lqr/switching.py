"""Switched control law

The controller applies the primary gain K1, and once ||x|| >= M it falls
back to the stabilizing gain K0 for t consecutive steps. The counter xi
holds the number of fallback steps left after the current one.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum

import numpy as np

from switched_lqr.errors import DimensionError, DomainError
from switched_lqr.utils import as_matrix, check_finite


class Mode(Enum):
    """Which gain produced the input"""

    PRIMARY = "primary"
    FALLBACK = "fallback"

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class SwitchConfig:
    """Gains K0 (fallback) and K1 (primary), threshold M and dwell time t

    M = math.inf never switches, M = 0 always falls back
    """

    K0: np.ndarray
    K1: np.ndarray
    M: float
    t: int

    def __post_init__(self):
        K0 = as_matrix(self.K0, "K0")
        K1 = as_matrix(self.K1, "K1")
        if K0.shape != K1.shape:
            raise DimensionError(f"K0 has shape {K0.shape} while K1 has {K1.shape}")
        check_finite(K0, "K0")
        check_finite(K1, "K1")
        if math.isnan(self.M) or self.M < 0:
            raise DomainError(f"Threshold M must be nonnegative, got {self.M}")
        if int(self.t) != self.t or self.t < 1:
            raise DomainError(f"Dwell time t must be a positive integer, got {self.t}")
        K0.setflags(write=False)
        K1.setflags(write=False)
        object.__setattr__(self, "K0", K0)
        object.__setattr__(self, "K1", K1)
        object.__setattr__(self, "M", float(self.M))
        object.__setattr__(self, "t", int(self.t))

    @property
    def n(self) -> int:
        return self.K0.shape[1]

    @property
    def m(self) -> int:
        return self.K0.shape[0]


@dataclass(frozen=True)
class SwitchState:
    """Fallback steps left after the current one"""

    xi: int = 0

    def __post_init__(self):
        if self.xi < 0:
            raise DomainError(f"Counter xi must be nonnegative, got {self.xi}")


@dataclass(frozen=True, eq=False)
class ControlDecision:
    """Input chosen at one step

    triggered is True only on the step that starts a new fallback episode
    """

    u: np.ndarray
    mode: Mode
    triggered: bool
    next_state: SwitchState | None


def _check_state_vector(x: np.ndarray, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DimensionError(f"State has shape {x.shape}, expected ({n},)")
    check_finite(x, "x")
    return x


def switch_step(x, state: SwitchState, config: SwitchConfig) -> ControlDecision:
    """One step of the switching logic"""
    x = _check_state_vector(x, config.n)
    xi = state.xi
    if xi > config.t:
        raise DomainError(f"Counter xi={xi} exceeds dwell time t={config.t}")

    triggered = False
    if xi > 0:
        mode = Mode.FALLBACK
    elif np.linalg.norm(x) >= config.M:
        xi = config.t
        triggered = True
        mode = Mode.FALLBACK
    else:
        mode = Mode.PRIMARY

    K = config.K0 if mode is Mode.FALLBACK else config.K1
    return ControlDecision(
        u=K @ x,
        mode=mode,
        triggered=triggered,
        next_state=SwitchState(max(xi - 1, 0)),
    )


class Controller(ABC):
    """State feedback used by the simulation engine

    Pure controllers keep all their memory in the explicit state, so one
    instance can drive many trajectories at once
    """

    is_pure: bool = True

    def initial_state(self):
        """State before the first step"""
        return None

    @abstractmethod
    def step(self, k: int, x: np.ndarray, state) -> ControlDecision:
        """Choose the input at step k"""

    def observe(self, k: int, x: np.ndarray, u: np.ndarray, x_next: np.ndarray):
        """Hook called with every transition, for learning controllers"""


class LinearPolicy(Controller):
    """u = Kx, always in primary mode"""

    def __init__(self, K):
        K = as_matrix(K, "K")
        check_finite(K, "K")
        self.K = K

    def step(self, k: int, x: np.ndarray, state) -> ControlDecision:
        x = _check_state_vector(x, self.K.shape[1])
        return ControlDecision(
            u=self.K @ x, mode=Mode.PRIMARY, triggered=False, next_state=state
        )


class SwitchedPolicy(Controller):
    """The switching logic with a fixed configuration"""

    def __init__(self, config: SwitchConfig):
        self.config = config

    def initial_state(self) -> SwitchState:
        return SwitchState()

    def step(self, k: int, x: np.ndarray, state: SwitchState) -> ControlDecision:
        return switch_step(x, state, self.config)


def linear_policy(K) -> LinearPolicy:
    """Unswitched linear feedback u = Kx"""
    return LinearPolicy(K)


def switched_policy(K0, K1, M: float, t: int) -> SwitchedPolicy:
    """Switched controller from its gains and hyper-parameters"""
    return SwitchedPolicy(SwitchConfig(K0=K0, K1=K1, M=M, t=t))
