"""Reference plants and random plant generators"""

import logging
from importlib import resources

import numpy as np

from switched_lqr.control_core import (
    LinearPlant,
    LQWeights,
    is_controllable,
    spectral_radius,
)
from switched_lqr.errors import DomainError
from switched_lqr.matrix_io import parse_matrices


logger = logging.getLogger(__name__)

# K1 = [0, 0.7] puts a closed-loop pole at 1.5 on the toy plant
TOY_DESTABILIZING_GAIN = [[0.0, 0.7]]


def _packaged(name: str) -> dict[str, np.ndarray]:
    text = resources.files("switched_lqr").joinpath("data", name).read_text()
    return parse_matrices(text, source=name)


def toy_example_plant() -> LinearPlant:
    """Two-state example plant, both open-loop poles at 0.8"""
    matrices = _packaged("toy_example_plant.txt")
    return LinearPlant(matrices["A"], matrices["B"], matrices["W"])


def toy_example_weights() -> LQWeights:
    """Q = I and a cheap input, R = 1e-4"""
    matrices = _packaged("toy_example_weights.txt")
    return LQWeights(matrices["Q"], matrices["R"])


def standin_process_plant() -> LinearPlant:
    """Fixed stable 8-state / 4-input plant standing in for a process model"""
    matrices = _packaged("standin_process_plant.txt")
    return LinearPlant(matrices["A"], matrices["B"], matrices["W"])


def standin_process_weights() -> LQWeights:
    matrices = _packaged("standin_process_weights.txt")
    return LQWeights(matrices["Q"], matrices["R"])


def random_stable_matrix(
    rng: np.random.Generator, n: int, radius: float = 0.9
) -> np.ndarray:
    """Gaussian matrix rescaled to spectral radius `radius`"""
    if not 0 <= radius < 1:
        raise DomainError(f"Radius must be in [0, 1), got {radius}")
    M = rng.standard_normal((n, n))
    current = spectral_radius(M)
    if current == 0:
        return M
    return M * (radius / current)


def random_controllable_plant(
    rng: np.random.Generator,
    n: int,
    m: int,
    scale: float = 1.0,
    max_tries: int = 100,
) -> LinearPlant:
    """Plant with Gaussian (A, B) scaled by 1/sqrt(n), W = I

    A isn't necessarily stable. Draws are repeated until (A, B) is controllable.
    """
    if n < 1 or m < 1:
        raise DomainError("Plant dimensions must be positive")
    for _ in range(max_tries):
        A = scale * rng.standard_normal((n, n)) / np.sqrt(n)
        B = rng.standard_normal((n, m)) / np.sqrt(n)
        if is_controllable(A, B):
            return LinearPlant(A, B, np.eye(n))
        logger.debug("Discarding uncontrollable random plant")
    raise DomainError(f"No controllable plant found in {max_tries} draws")
