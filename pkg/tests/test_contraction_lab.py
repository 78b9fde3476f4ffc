"""
tests.test_contraction_lab

Unit tests for contraction factors, the displacement condition and rate fits
in services.contraction_lab.
"""

import math
import unittest

import numpy as np

from services.errors import ConfigurationError, InsufficientDataError, PreconditionError
from services.contraction_lab import (
    cauchy_bound,
    contraction_report,
    contraction_threshold,
    critical_learning_rate,
    displacement_bound_check,
    empirical_contraction_estimate,
    exponential_rate_fit,
    gd_operator_norm_factor,
    limit_bound_holds,
    operator_difference_identity,
    strict_convexity_factor,
)
from services.model_zoo import (
    NoiseKind,
    NoiseModel,
    linearized_sequence,
    quadratic_sequence,
    random_least_squares,
    two_point_sequence,
)
from services.operator_core import apply_backward_naive, apply_forward, backward_iterate

H = np.diag([2.0, 0.5])


class TestAnalyticFactors(unittest.TestCase):

    def test_operator_norm_factor(self) -> None:
        self.assertAlmostEqual(gd_operator_norm_factor(H, 0.1), 0.95)
        self.assertAlmostEqual(gd_operator_norm_factor(H, 0.9), 0.8)

    def test_critical_learning_rate(self) -> None:
        self.assertAlmostEqual(critical_learning_rate(H), 1.0)
        with self.assertRaises(ConfigurationError):
            critical_learning_rate(np.diag([1.0, -1.0]))

    def test_strict_convexity_factor(self) -> None:
        self.assertAlmostEqual(strict_convexity_factor(0.1, 1.0, 2.0), math.sqrt(0.84))
        self.assertAlmostEqual(contraction_threshold(1.0, 2.0), 0.5)
        self.assertAlmostEqual(strict_convexity_factor(0.5, 1.0, 2.0), 1.0)
        self.assertLess(strict_convexity_factor(0.4, 1.0, 2.0), 1.0)

    def test_invalid_constants(self) -> None:
        with self.assertRaises(ConfigurationError):
            strict_convexity_factor(0.1, 2.0, 1.0)
        with self.assertRaises(ConfigurationError):
            strict_convexity_factor(0.1, 0.0, 1.0)
        with self.assertRaises(ConfigurationError):
            strict_convexity_factor(-0.1, 1.0, 1.0)


class TestEmpiricalContraction(unittest.TestCase):

    def test_estimate_approaches_operator_norm_from_below(self) -> None:
        seq = linearized_sequence([0.0, 0.0], H, 0.1, NoiseModel(NoiseKind.GAUSSIAN, 1.0), 0, 5)
        estimate = empirical_contraction_estimate(seq.operator(1), [1.0, 1.0], 1.0, 200, seed=3)
        self.assertLessEqual(estimate, 0.95 + 1e-12)
        self.assertGreater(estimate, 0.9)

    def test_estimate_is_reproducible(self) -> None:
        seq = linearized_sequence([0.0, 0.0], H, 0.1, NoiseModel(NoiseKind.GAUSSIAN, 1.0), 0, 5)
        a = empirical_contraction_estimate(seq.operator(2), [0.0, 0.0], 0.5, 50, seed=1)
        b = empirical_contraction_estimate(seq.operator(2), [0.0, 0.0], 0.5, 50, seed=1)
        self.assertEqual(a, b)

    def test_invalid_arguments(self) -> None:
        seq = two_point_sequence([0.0], [1.0], 0, 3)
        with self.assertRaises(ConfigurationError):
            empirical_contraction_estimate(seq.operator(1), [0.0], 0.0, 10)
        with self.assertRaises(ConfigurationError):
            empirical_contraction_estimate(seq.operator(1), [0.0], 1.0, 0)

    def test_constant_map_has_zero_factor(self) -> None:
        seq = two_point_sequence([0.0], [1.0], 0, 3)
        self.assertEqual(empirical_contraction_estimate(seq.operator(1), [0.5], 1.0, 20), 0.0)


class TestDisplacementAndRates(unittest.TestCase):

    def test_displacement_bound_is_strict(self) -> None:
        seq = two_point_sequence([0.0], [1.0], 0, 10)
        check = displacement_bound_check(seq, [0.5], 10)
        self.assertAlmostEqual(check.max_displacement, 0.5)
        self.assertTrue(displacement_bound_check(seq, [0.5], 10, bound=1.0).holds)
        self.assertFalse(displacement_bound_check(seq, [0.5], 10, bound=0.5).holds)

    def test_rate_fit_recovers_geometric_decay(self) -> None:
        seq = quadratic_sequence(0.1, NoiseModel(NoiseKind.GAUSSIAN, 0.0), 0, 50)
        traj = apply_backward_naive(seq, [1.0], 50)
        fit = exponential_rate_fit(traj, [0.0])
        self.assertAlmostEqual(fit.slope, math.log(0.9), places=10)
        self.assertAlmostEqual(fit.intercept, 0.0, places=8)
        self.assertLess(fit.residual, 1e-10)

    def test_rate_fit_needs_five_points(self) -> None:
        seq = quadratic_sequence(0.1, NoiseModel(NoiseKind.GAUSSIAN, 0.0), 0, 3)
        with self.assertRaises(InsufficientDataError):
            exponential_rate_fit(apply_backward_naive(seq, [1.0], 3), [0.0])

    def test_rate_fit_on_noisy_backward_runs(self) -> None:
        """
        Test that the fitted slope of log distance to the limit is within 5% of log(1 - h).
        """
        noise = NoiseModel(NoiseKind.GAUSSIAN, 1.0)
        for h in (0.05, 0.1, 0.2):
            for seed in range(3):
                with self.subTest(h=h, seed=seed):
                    seq = quadratic_sequence(h, noise, seed, 1000)
                    limit = backward_iterate(seq, [10.0], 1000)
                    traj = apply_backward_naive(seq, [10.0], 100)
                    fit = exponential_rate_fit(traj, limit)
                    expected = math.log(1.0 - h)
                    self.assertLess(abs(fit.slope - expected), 0.05 * abs(expected))

    def test_rate_fit_rejects_a_forward_run(self) -> None:
        seq = quadratic_sequence(0.1, NoiseModel(NoiseKind.GAUSSIAN, 1.0), 0, 200)
        traj = apply_forward(seq, [0.0], 200)
        with self.assertRaises(PreconditionError):
            exponential_rate_fit(traj, traj.terminal)

    def test_cauchy_bound(self) -> None:
        self.assertAlmostEqual(cauchy_bound(1.0, 0.5, 3), 0.25)
        with self.assertRaises(ConfigurationError):
            cauchy_bound(1.0, 1.0, 3)

    def test_backward_iterates_respect_the_convergence_bound(self) -> None:
        noise = NoiseModel(NoiseKind.UNIFORM, 0.5)
        for seed in range(5):
            seq = quadratic_sequence(0.1, noise, seed, 400)
            limit = backward_iterate(seq, [1.0], 400)
            D = displacement_bound_check(seq, [1.0], 400).max_displacement
            traj = apply_backward_naive(seq, [1.0], 60)
            self.assertTrue(limit_bound_holds(traj, limit, D, 0.9))
            self.assertFalse(limit_bound_holds(traj, limit, D, 0.1))


class TestOperatorDifferenceIdentity(unittest.TestCase):

    def test_both_sides_agree(self) -> None:
        model, _ = random_least_squares(3, 24, 6, seed=1)
        lhs, rhs = operator_difference_identity(model, 2, 0.2, [1.0, 0.0, -1.0], [0.3, 0.4, 0.5])
        self.assertAlmostEqual(lhs, rhs, places=12)


class TestContractionReport(unittest.TestCase):

    def test_report_for_linearized_run(self) -> None:
        seq = linearized_sequence([0.0, 0.0], H, 0.1, NoiseModel(NoiseKind.UNIFORM, 0.1), 2, 80)
        traj = apply_backward_naive(seq, [1.0, 1.0], 80)
        report = contraction_report(seq, traj, analytic_factor=0.95, n_pairs=50, seed=2)
        self.assertTrue(report.passed)
        self.assertLess(report.empirical_factor, 1.0)
        self.assertLess(report.rate_slope, 0.0)
        document = report.to_dict()
        self.assertTrue(document["pass"])
        self.assertNotIn("passed", document)
        self.assertEqual(document["anchor"], [1.0, 1.0])


if __name__ == "__main__":
    unittest.main()
