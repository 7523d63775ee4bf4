"""End-to-end checks of the guarantees on the toy and stand-in plants, at reduced sizes"""

import math
import unittest

import numpy as np

from switched_lqr.adaptive import AdaptiveConfig, adaptive_run, decay_slope, gap_curve
from switched_lqr.certificates import (
    bounded_cost_bound,
    build_common_certificate,
    build_fallback_certificate,
    fourth_moment_bound,
    gain_spread,
    gap_bound,
    process_gramian,
    second_moment_bound,
    tail_bound,
    threshold_floor,
)
from switched_lqr.cli import gap_sweep
from switched_lqr.control_core import INFINITE, dare_solve
from switched_lqr.montecarlo import estimate_cost, estimate_state_moments
from switched_lqr.plants import (
    TOY_DESTABILIZING_GAIN,
    standin_process_plant,
    standin_process_weights,
    toy_example_plant,
    toy_example_weights,
)
from switched_lqr.switching import linear_policy, switched_policy


class TestToyGuarantees(unittest.TestCase):
    def setUp(self):
        self.plant = toy_example_plant()
        self.weights = toy_example_weights()
        self.K0 = np.zeros((1, 2))
        self.K_star = dare_solve(self.plant, self.weights).K_star
        self.cert0 = build_fallback_certificate(self.plant, self.K0)
        self.cert = build_common_certificate(self.plant, self.K0, self.K_star)
        self.W_tilde = process_gramian(self.plant, self.K0)
        self.M0 = threshold_floor(self.W_tilde, self.cert.P, self.cert.rho)

    def test_safety_with_destabilizing_gain(self):
        """Bounded cost for a destabilizing primary gain; the gain alone diverges"""
        policy = switched_policy(self.K0, TOY_DESTABILIZING_GAIN, 10.0, 30)
        estimate = estimate_cost(self.plant, self.weights, policy, 2_000, 20, seed=11)
        assert not estimate.diverged
        bound = bounded_cost_bound(
            self.plant, self.weights, self.K0, TOY_DESTABILIZING_GAIN, 10.0, self.cert0
        )
        assert estimate.mean <= bound

        unswitched = estimate_cost(
            self.plant, self.weights, linear_policy(TOY_DESTABILIZING_GAIN), 2_000, 2, seed=11
        )
        assert unswitched.diverged
        assert unswitched.mean is INFINITE

    def test_second_moment(self):
        """E x^T P0 x under the second moment bound, stabilizing or not"""
        P0, rho0 = self.cert0.P0, self.cert0.rho0
        for K1 in (self.K_star, TOY_DESTABILIZING_GAIN):
            policy = switched_policy(self.K0, K1, 10.0, 30)
            moments = estimate_state_moments(
                self.plant, self.weights, policy, [10, 100, 1_000], 200, seed=17, P=P0
            )
            spread = gain_spread(self.plant, self.K0, K1)
            bound = second_moment_bound(10.0, spread, P0, rho0, self.plant.W)
            assert np.all(moments.second <= bound)

    def test_dwell_effect(self):
        """Over 100 paired seeds, t = 1 triggers more than t = 30 at 95% confidence"""
        counts = {}
        for t in (1, 30):
            policy = switched_policy(self.K0, TOY_DESTABILIZING_GAIN, 10.0, t)
            estimate = estimate_cost(self.plant, self.weights, policy, 1_000, 100, seed=12)
            counts[t] = estimate.trigger_counts
        differences = counts[1] - counts[30]
        stderr = differences.std(ddof=1) / math.sqrt(len(differences))
        assert differences.mean() > 1.645 * stderr

    def test_fourth_moment(self):
        """Empirical E||x_k||_P0^4 under the bound at k = 10, 100, 1000"""
        policy = switched_policy(self.K0, self.K_star, self.M0, self.cert.t_min)
        moments = estimate_state_moments(
            self.plant, self.weights, policy, [10, 100, 1_000], 300, seed=13, P=self.cert0.P0
        )
        _, bound = fourth_moment_bound(
            self.plant.n, self.cert.P, self.cert.rho, self.cert0.P0, self.W_tilde
        )
        assert np.all(moments.fourth <= bound + 3 * moments.fourth_stderr)

    def test_tail(self):
        """Fallback frequency under the tail bound for M = M0, M0 + 1, M0 + 2"""
        t = self.cert.t_min
        for M in (self.M0, self.M0 + 1, self.M0 + 2):
            policy = switched_policy(self.K0, self.K_star, M, t)
            estimate = estimate_cost(self.plant, self.weights, policy, 1_000, 20, seed=14)
            tail = tail_bound(M, t, self.plant.n, self.cert.P, self.cert.rho, self.W_tilde)
            assert estimate.fallback_fraction <= tail + 3 * estimate.fallback_stderr

    def test_gap_within_bound(self):
        """Paired Monte Carlo gap under the closed-form bound"""
        rows = gap_sweep(
            self.plant,
            self.weights,
            self.K0,
            self.K_star,
            [2 * self.M0, 3 * self.M0],
            [None],
            horizon=500,
            n_traj=20,
            seed=15,
        )
        for row in rows:
            self.assertEqual(row["status"], "ok")
            assert row["mc_gap"] <= row["bound"] + 3 * row["mc_stderr"]
        bound, _ = gap_bound(
            self.plant, self.weights, self.K0, self.K_star, 2 * self.M0, self.cert0, self.cert
        )
        self.assertAlmostEqual(rows[0]["bound"], bound)

    def test_estimator_consistency(self):
        """Optimal gain cost within 3 standard errors of J*"""
        J_star = dare_solve(self.plant, self.weights).J_star
        estimate = estimate_cost(
            self.plant, self.weights, linear_policy(self.K_star), 5_000, 40, seed=16
        )
        # finite horizon from x_0 = 0 biases the mean slightly low
        assert abs(estimate.mean - J_star) <= 3 * estimate.stderr + 1e-3 * J_star


class TestStandinLearning(unittest.TestCase):
    """Scheduled learning on the stand-in process plant up to k = 2^14"""

    def test_gap_curve(self):
        """Finite switched cost on every row and a decaying gap"""
        plant, weights = standin_process_plant(), standin_process_weights()
        config = AdaptiveConfig(K0=np.zeros((plant.m, plant.n)))
        for seed in range(10):
            record = adaptive_run(plant, weights, config, 2**14 + 1, seed)
            if not all(update.stabilizing for update in record.updates):
                break
        else:
            self.fail("no seed in 0..9 learned a destabilizing gain")

        assert not record.diverged
        points = gap_curve(plant, weights, record, eval_horizon=100, eval_n_traj=1_000, seed=seed)
        self.assertEqual(points[-1].k, 2**14)
        for point in points:
            assert math.isfinite(point.J_switched)
            if not point.stabilizing:
                assert point.J_linear is INFINITE
                assert point.gap is None
        assert decay_slope(points) < 0


if __name__ == "__main__":
    unittest.main()
