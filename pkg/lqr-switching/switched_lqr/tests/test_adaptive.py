"""adaptive.py unit tests"""

import math
import unittest
import warnings

import numpy as np
from scipy import linalg

from switched_lqr.adaptive import (
    AdaptiveConfig,
    AdaptiveRecord,
    GainUpdate,
    GapPoint,
    RecursiveLeastSquares,
    adaptive_run,
    certainty_equivalent_gain,
    decay_slope,
    gap_curve,
    is_update_step,
    least_squares_fit,
    safety_cost_bound,
    schedule,
)
from switched_lqr.certificates import bounded_cost_bound, build_fallback_certificate
from switched_lqr.control_core import INFINITE, dare_solve
from switched_lqr.errors import DomainError, RankDeficiencyError
from switched_lqr.montecarlo import RngStream, rollout
from switched_lqr.plants import (
    TOY_DESTABILIZING_GAIN,
    toy_example_plant,
    toy_example_weights,
)
from switched_lqr.switching import linear_policy


class TestSchedule(unittest.TestCase):
    """schedule and update cadence"""

    def test_floors(self):
        """log(1) = 0, so both floors engage at k = 0"""
        self.assertEqual(schedule(0), (1.0, 1))
        self.assertEqual(schedule(0, M_min=0.5), (0.5, 1))

    def test_transition(self):
        """t_k reaches 3 at k = 20, the first k with log(k + 1) >= 3"""
        self.assertEqual(schedule(19)[1], 2)
        self.assertEqual(schedule(20)[1], 3)
        self.assertAlmostEqual(schedule(20)[0], math.log(21))

    def test_monotone(self):
        """Both schedules are nondecreasing"""
        values = [schedule(k) for k in range(5_000)]
        for (M1, t1), (M2, t2) in zip(values, values[1:], strict=False):
            assert M2 >= M1
            assert t2 >= t1
        with self.assertRaises(DomainError):
            schedule(-1)

    def test_update_steps(self):
        """Updates at powers of two only"""
        steps = [k for k in range(1_100) if is_update_step(k)]
        self.assertEqual(steps, [2**i for i in range(11)])

    def test_fixed_override(self):
        """Fixed M and t replace the schedule"""
        config = AdaptiveConfig(K0=np.zeros((1, 2)), fixed_M=10.0, fixed_t=30)
        self.assertEqual(config.hyperparameters(1_000), (10.0, 30))
        with self.assertRaises(DomainError):
            AdaptiveConfig(K0=np.zeros((1, 2)), ridge=-1.0)


class TestLeastSquares(unittest.TestCase):
    """least_squares_fit unit tests"""

    def test_noiseless_recovery(self):
        """Exact data with exciting inputs recovers (A, B)"""
        rng = np.random.default_rng(0)
        plant = toy_example_plant()
        history = []
        x = np.zeros(2)
        for _ in range(50):
            u = rng.standard_normal(1)
            x_next = plant.A @ x + plant.B @ u
            history.append((x, u, x_next))
            x = x_next
        A_hat, B_hat = least_squares_fit(history, ridge=0.0)
        np.testing.assert_allclose(A_hat, plant.A, atol=1e-8)
        np.testing.assert_allclose(B_hat, plant.B, atol=1e-8)

    def test_unexcited_direction(self):
        """A ridge shrinks an input that never moved to zero"""
        rng = np.random.default_rng(1)
        history = []
        x = rng.standard_normal(2)
        for _ in range(30):
            x_next = 0.5 * x + rng.standard_normal(2)
            history.append((x, np.zeros(1), x_next))
            x = x_next
        _, B_hat = least_squares_fit(history, ridge=1e-6)
        np.testing.assert_allclose(B_hat, np.zeros((2, 1)), atol=1e-12)
        with self.assertRaises(RankDeficiencyError):
            least_squares_fit(history, ridge=0.0)

    def test_scalar_consistency(self):
        """x_{k+1} = 0.8 x_k + u_k + w_k, estimate within 3 standard errors"""
        rng = np.random.default_rng(2)
        rls = RecursiveLeastSquares(1, 1)
        x = np.zeros(1)
        for _ in range(10_000):
            u = rng.standard_normal(1)
            x_next = 0.8 * x + u + rng.standard_normal(1)
            rls.update(x, u, x_next)
            x = x_next
        A_hat, _ = rls.estimate()
        stderr = math.sqrt(np.linalg.inv(rls.gram)[0, 0])
        assert abs(A_hat[0, 0] - 0.8) <= 3 * stderr

    def test_ill_conditioned_gram(self):
        """A nearly singular Gram matrix falls back to lstsq without a LinAlgWarning"""
        rls = RecursiveLeastSquares(2, 1, ridge=1e-6)
        rls.update([1e3, 1e3], [1e3], [1.0, 2.0])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            with self.assertLogs("switched_lqr.adaptive", level="DEBUG"):
                A_hat, B_hat = rls.estimate()
        assert not any(issubclass(w.category, linalg.LinAlgWarning) for w in caught)
        # the fit still reproduces the one observed transition
        prediction = A_hat @ [1e3, 1e3] + B_hat @ [1e3]
        np.testing.assert_allclose(prediction, [1.0, 2.0], atol=1e-2)

    def test_empty_history(self):
        with self.assertRaises(DomainError):
            least_squares_fit([])


class TestCertaintyEquivalentGain(unittest.TestCase):
    """certainty_equivalent_gain unit tests"""

    def test_exact_model(self):
        """True model gives the optimal gain"""
        plant, weights = toy_example_plant(), toy_example_weights()
        K = certainty_equivalent_gain(plant.A, plant.B, weights)
        np.testing.assert_allclose(K, dare_solve(plant, weights).K_star, atol=1e-8)

    def test_zero_dynamics(self):
        """A_hat = 0 gives K = 0"""
        weights = toy_example_weights()
        K = certainty_equivalent_gain(np.zeros((2, 2)), np.array([[0.3], [-2.0]]), weights)
        np.testing.assert_allclose(K, np.zeros((1, 2)), atol=1e-12)

    def test_unstabilizable(self):
        """Failure value, no exception"""
        weights = toy_example_weights()
        with self.assertLogs("switched_lqr.adaptive", level="WARNING"):
            K = certainty_equivalent_gain(2 * np.eye(2), np.zeros((2, 1)), weights)
        self.assertIsNone(K)


class TestAdaptiveRun(unittest.TestCase):
    """adaptive_run unit tests"""

    def setUp(self):
        self.plant = toy_example_plant()
        self.weights = toy_example_weights()
        self.config = AdaptiveConfig(K0=np.zeros((1, 2)))

    def learn(self, seed=0, horizon=300, **kwargs) -> AdaptiveRecord:
        return adaptive_run(self.plant, self.weights, self.config, horizon, seed, **kwargs)

    def test_update_cadence(self):
        """Gains change only at powers of two"""
        record = self.learn(horizon=300, fixed_M=10.0, fixed_t=30)
        assert not record.diverged
        self.assertEqual(record.update_steps, [1, 2, 4, 8, 16, 32, 64, 128, 256])
        np.testing.assert_array_equal(record.gain_at(0), self.config.K0)
        np.testing.assert_array_equal(record.gain_at(100), record.gain_at(64))
        np.testing.assert_array_equal(record.gain_at(127), record.updates[6].K_hat)

    def test_exploration_decay(self):
        """Probes are k^(-1/4) zeta_k"""
        record = self.learn(horizon=200, fixed_M=10.0, fixed_t=30)
        for k in (1, 16, 81, 199):
            np.testing.assert_allclose(record.probes[k], k**-0.25 * record.zeta[k])
        np.testing.assert_allclose(record.probes[0], record.zeta[0])

    def test_schedule_logged(self):
        """Per-step thresholds follow the schedule"""
        record = self.learn(horizon=100)
        for k in (0, 5, 20, 99):
            M_k, t_k = schedule(k)
            self.assertAlmostEqual(record.thresholds[k], M_k)
            self.assertEqual(record.dwell_times[k], t_k)

    def test_paired_noise(self):
        """Runs on the same seed share w_k and zeta_k"""
        switched = self.learn(seed=4, fixed_M=10.0, fixed_t=30)
        free = self.learn(seed=4, switching_enabled=False)
        steps = min(switched.trajectory.horizon, free.trajectory.horizon)
        np.testing.assert_array_equal(
            switched.trajectory.noises[:steps], free.trajectory.noises[:steps]
        )
        np.testing.assert_array_equal(switched.zeta[:steps], free.zeta[:steps])

    def test_switching_safety(self):
        """No divergence; the guarantee covers the worst gain of the run"""
        cert0 = build_fallback_certificate(self.plant, self.config.K0)
        K0 = self.config.K0
        for seed in range(10):
            record = self.learn(seed=seed, horizon=400, fixed_M=10.0, fixed_t=30)
            assert not record.diverged
            bound = safety_cost_bound(self.plant, self.weights, record, cert0)
            assert math.isfinite(bound)
            for gain in record.gains():
                assert bound >= bounded_cost_bound(self.plant, self.weights, K0, gain, 10.0, cert0)

    def test_unswitched_blowup(self):
        """Without switching an early bad estimate blows the state up until the next update"""
        free, switched = [], []
        for seed in range(100):
            free.append(self.learn(seed=seed, horizon=200, switching_enabled=False))
            switched.append(self.learn(seed=seed, horizon=200, fixed_M=10.0, fixed_t=30))
        assert not any(record.diverged for record in switched)
        worst_free = max(record.trajectory.max_state_norm for record in free)
        worst_switched = max(record.trajectory.max_state_norm for record in switched)
        assert worst_free > 100 * worst_switched


class TestGapCurve(unittest.TestCase):
    """gap_curve and decay_slope unit tests"""

    def setUp(self):
        self.plant = toy_example_plant()
        self.weights = toy_example_weights()
        self.K_star = dare_solve(self.plant, self.weights).K_star

    def record_with(self, gains, config) -> AdaptiveRecord:
        trajectory = rollout(self.plant, self.weights, linear_policy(config.K0), 10, RngStream(0))
        updates = [
            GainUpdate(k=2**i, A_hat=None, B_hat=None, K_hat=np.asarray(K), stabilizing=True, accepted=True)
            for i, K in enumerate(gains)
        ]
        return AdaptiveRecord(
            config=config,
            seed=0,
            switching_enabled=True,
            trajectory=trajectory,
            thresholds=np.ones(10),
            dwell_times=np.ones(10, dtype=int),
            probes=np.zeros((10, 1)),
            zeta=np.zeros((10, 1)),
            updates=updates,
        )

    def test_optimal_gain_no_gap(self):
        """K* with a huge threshold never switches, so the paired gap is exactly 0"""
        config = AdaptiveConfig(K0=np.zeros((1, 2)), fixed_M=1e9, fixed_t=1)
        record = self.record_with([self.K_star], config)
        (point,) = gap_curve(self.plant, self.weights, record, 1_000, 50, seed=1)
        self.assertEqual(point.gap, 0.0)
        self.assertEqual(point.gap_stderr, 0.0)
        assert math.isfinite(point.J_switched)

    def test_no_horizon_bias(self):
        """Short evaluations from x_0 = 0 don't push the gap below 0"""
        config = AdaptiveConfig(K0=np.zeros((1, 2)), fixed_M=1e9, fixed_t=1)
        record = self.record_with([self.K_star], config)
        (point,) = gap_curve(self.plant, self.weights, record, 5, 1_000, seed=1)
        # a 5-step average sits well below the stationary cost
        assert point.J_switched < point.J_linear - 3 * point.stderr
        self.assertEqual(point.gap, 0.0)

    def test_destabilizing_row(self):
        """Finite switched cost where the linear cost is infinite"""
        config = AdaptiveConfig(K0=np.zeros((1, 2)), fixed_M=10.0, fixed_t=30)
        record = self.record_with([TOY_DESTABILIZING_GAIN, self.K_star], config)
        points = gap_curve(self.plant, self.weights, record, 200, 20, seed=1)
        self.assertEqual([p.k for p in points], [1, 2])
        assert points[0].J_linear is INFINITE
        assert points[0].gap is None and points[0].gap_stderr is None
        assert math.isfinite(points[0].J_switched)
        assert points[1].gap is not None
        assert points[1].gap >= 0

    def gap_points(self, gaps) -> list[GapPoint]:
        return [
            GapPoint(
                k=2**i, M=1.0, t=1, J_switched=1.0, stderr=0.0, J_linear=1.0,
                gap=gap, gap_stderr=0.0, stabilizing=True,
            )
            for i, gap in enumerate(gaps, start=1)
        ]

    def test_decay_slope(self):
        """Theil-Sen slope of a power law over the final five updates"""
        points = self.gap_points([(2**i) ** -2.0 for i in range(1, 9)])
        self.assertAlmostEqual(decay_slope(points), -2.0, places=10)
        with self.assertRaises(DomainError):
            decay_slope(points[:4])

    def test_decay_slope_final_points(self):
        """Earlier updates are ignored; a bad gap among the final five raises"""
        gaps = [(2**i) ** -1.0 for i in range(1, 9)]
        self.assertAlmostEqual(decay_slope(self.gap_points([None, -1.0, 0.0] + gaps[3:])), -1.0, places=10)
        for bad in (0.0, -0.2, None):
            with self.assertRaises(DomainError):
                decay_slope(self.gap_points(gaps[:-2] + [bad] + gaps[-1:]))


if __name__ == "__main__":
    unittest.main()
