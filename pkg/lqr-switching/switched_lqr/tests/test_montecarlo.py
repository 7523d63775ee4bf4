"""montecarlo.py unit tests"""

import math
import unittest

import numpy as np

from switched_lqr.control_core import (
    INFINITE,
    LinearPlant,
    dare_solve,
    linear_feedback_cost,
    solve_stein,
)
from switched_lqr.errors import DomainError
from switched_lqr.montecarlo import (
    EXPLORATION_NOISE,
    RngStream,
    estimate_cost,
    estimate_state_moments,
    noise_factor,
    paired_compare,
    rollout,
    sample_noise,
)
from switched_lqr.plants import (
    TOY_DESTABILIZING_GAIN,
    toy_example_plant,
    toy_example_weights,
)
from switched_lqr.switching import Mode, linear_policy, switched_policy


class TestRngStream(unittest.TestCase):
    """RngStream unit tests"""

    def test_reproducible(self):
        """Same key, same draws; other ids and channels differ"""
        a = RngStream(42, 3).standard_normal(5)
        b = RngStream(42, 3).standard_normal(5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, RngStream(42, 4).standard_normal(5))
        assert not np.array_equal(a, RngStream(43, 3).standard_normal(5))
        assert not np.array_equal(
            a, RngStream(42, 3).channel(EXPLORATION_NOISE).standard_normal(5)
        )

    def test_checks(self):
        """Seeds are 64-bit unsigned"""
        with self.assertRaises(DomainError):
            RngStream(-1)
        with self.assertRaises(DomainError):
            RngStream(2**64)

    def test_sample_noise(self):
        """Sample covariance of L z matches W"""
        W = np.array([[4.0, 2.0], [2.0, 5.0]])
        L = noise_factor(W)
        rng = RngStream(0)
        samples = np.array([sample_noise(L, rng) for _ in range(20_000)])
        np.testing.assert_allclose(np.cov(samples.T), W, rtol=0.1)

    def test_semidefinite_factor(self):
        """Singular covariances still factor"""
        L = noise_factor(np.zeros((2, 2)))
        np.testing.assert_allclose(L @ L.T, np.zeros((2, 2)))


class TestRollout(unittest.TestCase):
    """rollout unit tests"""

    def setUp(self):
        self.plant = toy_example_plant()
        self.weights = toy_example_weights()
        self.K_star = dare_solve(self.plant, self.weights).K_star

    def test_stage_costs(self):
        """Stored stage costs match states and inputs"""
        policy = switched_policy(np.zeros((1, 2)), TOY_DESTABILIZING_GAIN, 5.0, 3)
        record = rollout(self.plant, self.weights, policy, 500, RngStream(1))
        Q, R = self.weights.Q, self.weights.R
        for k in range(record.horizon):
            x, u = record.states[k], record.inputs[k]
            self.assertAlmostEqual(record.stage_costs[k], x @ Q @ x + u @ R @ u, delta=1e-12 * (1 + record.stage_costs[k]))
        np.testing.assert_array_equal(record.states[0], [0.0, 0.0])
        self.assertEqual(record.trigger_count, int(record.triggered.sum()))
        self.assertEqual(len(record.modes), record.horizon)

    def test_noise_recursion(self):
        """States follow x_{k+1} = A x_k + B u_k + w_k with the stored noise"""
        policy = linear_policy(self.K_star)
        record = rollout(self.plant, self.weights, policy, 50, RngStream(7))
        for k in range(record.horizon):
            expected = (
                self.plant.A @ record.states[k]
                + self.plant.B @ record.inputs[k]
                + record.noises[k]
            )
            np.testing.assert_allclose(record.states[k + 1], expected, atol=1e-12)

    def test_initial_state_hook(self):
        """Noise free plant from x0 follows the closed loop powers"""
        plant = LinearPlant(self.plant.A, self.plant.B, np.zeros((2, 2)), strict=False)
        K = np.array([[-0.1, -0.5]])
        record = rollout(plant, self.weights, linear_policy(K), 10, RngStream(0), x0=[1.0, -1.0])
        A_K = plant.closed_loop(K)
        x = np.array([1.0, -1.0])
        for k in range(11):
            np.testing.assert_allclose(record.states[k], x, atol=1e-12)
            x = A_K @ x

    def test_divergence(self):
        """Unswitched destabilizing gain hits the divergence guard"""
        policy = linear_policy(TOY_DESTABILIZING_GAIN)
        record = rollout(self.plant, self.weights, policy, 3_000, RngStream(0))
        assert record.diverged
        assert record.horizon < 3_000
        assert record.average_cost is INFINITE

    def test_switching_stays_bounded(self):
        """The same gain behind the switch stays finite"""
        policy = switched_policy(np.zeros((1, 2)), TOY_DESTABILIZING_GAIN, 10.0, 30)
        record = rollout(self.plant, self.weights, policy, 3_000, RngStream(0))
        assert not record.diverged
        assert record.trigger_count >= 1
        assert record.fallback_steps >= 30
        assert Mode.FALLBACK in record.modes


class TestEstimateCost(unittest.TestCase):
    """estimate_cost and paired_compare unit tests"""

    def setUp(self):
        self.plant = toy_example_plant()
        self.weights = toy_example_weights()
        self.K_star = dare_solve(self.plant, self.weights).K_star

    def test_consistency(self):
        """Mean within 3 standard errors of the exact cost"""
        K = np.array([[-0.1, -0.5]])
        estimate = estimate_cost(self.plant, self.weights, linear_policy(K), 2_000, 100, seed=3)
        exact = linear_feedback_cost(self.plant, self.weights, K)
        assert abs(estimate.mean - exact) <= 3 * estimate.stderr
        self.assertEqual(estimate.fallback_fraction, 0.0)
        assert not estimate.diverged

    def test_thread_invariance(self):
        """Bit-identical estimates for any thread count"""
        policy = switched_policy(np.zeros((1, 2)), TOY_DESTABILIZING_GAIN, 4.0, 5)
        single = estimate_cost(self.plant, self.weights, policy, 300, 16, seed=9, threads=1)
        multi = estimate_cost(self.plant, self.weights, policy, 300, 16, seed=9, threads=4)
        self.assertEqual(single.mean, multi.mean)
        self.assertEqual(single.stderr, multi.stderr)
        np.testing.assert_array_equal(single.per_trajectory, multi.per_trajectory)
        np.testing.assert_array_equal(single.trigger_counts, multi.trigger_counts)

    def test_divergence(self):
        """Any diverged trajectory makes the estimate infinite"""
        estimate = estimate_cost(
            self.plant, self.weights, linear_policy(TOY_DESTABILIZING_GAIN), 2_000, 2, seed=0
        )
        assert estimate.diverged
        assert estimate.mean is INFINITE
        self.assertEqual(estimate.as_dict()["mean"], "inf")

    def test_checks(self):
        """Too few trajectories"""
        with self.assertRaises(DomainError):
            estimate_cost(self.plant, self.weights, linear_policy(self.K_star), 10, 1, seed=0)

    def test_paired_identical(self):
        """Identical controllers give exactly zero differences"""
        policy = linear_policy(self.K_star)
        comparison = paired_compare(self.plant, self.weights, policy, policy, 200, 10, seed=5)
        np.testing.assert_array_equal(comparison.differences, np.zeros(10))

    def test_paired_never_switching(self):
        """M = inf switched policy equals the linear policy on every trajectory"""
        K1 = np.array([[-0.1, -0.5]])
        switched = switched_policy(np.zeros((1, 2)), K1, math.inf, 3)
        comparison = paired_compare(
            self.plant, self.weights, switched, linear_policy(K1), 200, 10, seed=5
        )
        np.testing.assert_array_equal(comparison.differences, np.zeros(10))

    def test_paired_optimal(self):
        """Switching never beats the optimal linear gain beyond noise"""
        switched = switched_policy(np.zeros((1, 2)), self.K_star, 10.0, 30)
        comparison = paired_compare(
            self.plant, self.weights, switched, linear_policy(self.K_star), 1_000, 50, seed=2
        )
        assert comparison.mean_difference >= -3 * comparison.stderr_difference - 1e-12

    def test_state_moments(self):
        """Second moment of the P-norm matches tr(P Sigma_k)"""
        K = np.array([[-0.1, -0.5]])
        P = np.eye(2)
        moments = estimate_state_moments(
            self.plant, self.weights, linear_policy(K), [5, 50], 2_000, seed=4, P=P
        )
        A_K = self.plant.closed_loop(K)
        stationary = solve_stein(A_K, self.plant.W)
        expected = np.trace(P @ stationary)
        self.assertEqual(moments.steps, [5, 50])
        assert abs(moments.second[1] - expected) <= 4 * moments.second_stderr[1]
        assert np.all(moments.fourth >= moments.second**2)


if __name__ == "__main__":
    unittest.main()
