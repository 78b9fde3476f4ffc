"""
tests.test_model_zoo

Unit tests for the model families in services.model_zoo.

Covers:
- Noise laws and their determinism
- Closed forms of the noisy quadratic and the linearized dynamics
- The two-point operators
- Least-squares derivatives and SGD operators
"""

import unittest

import numpy as np

from services.errors import ConfigurationError, ResourceGuardError
from services.model_zoo import (
    MAX_HESSIAN_DIM,
    BatchLossModel,
    NoiseKind,
    NoiseModel,
    batch_choice,
    contiguous_batches,
    convexity_constants,
    full_batch_operator,
    hessian_vector_product,
    least_squares_model,
    linearized_backward_closed_form,
    linearized_forward_closed_form,
    linearized_operator,
    linearized_sequence,
    quadratic_backward_closed_form,
    quadratic_forward_closed_form,
    quadratic_noise_values,
    quadratic_sequence,
    random_least_squares,
    scheduled_sgd_sequence,
    sgd_operator,
    sgd_sequence,
    two_point_choice,
    two_point_operator,
    two_point_sequence,
)
from services.operator_core import apply_backward_naive, apply_forward
from utils.numerics import central_gradient


class TestNoiseModel(unittest.TestCase):

    def test_samples_are_reproducible(self) -> None:
        noise = NoiseModel(NoiseKind.GAUSSIAN, 0.5)
        np.testing.assert_array_equal(noise.sample(3, 10, 4), noise.sample(3, 10, 4))

    def test_uniform_is_bounded(self) -> None:
        noise = NoiseModel("uniform-symmetric", 0.2)
        draws = np.concatenate([noise.sample(1, i, 3) for i in range(200)])
        self.assertTrue(np.all(np.abs(draws) <= 0.2))
        self.assertEqual(noise.bound(), 0.2)
        self.assertAlmostEqual(noise.stationary_variance(), 0.04 / 3.0)

    def test_rademacher_takes_two_values(self) -> None:
        noise = NoiseModel("rademacher", 0.3)
        draws = {float(noise.sample(0, i)[0]) for i in range(100)}
        self.assertEqual(draws, {-0.3, 0.3})

    def test_negative_scale_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            NoiseModel(NoiseKind.GAUSSIAN, -1.0)


class TestQuadratic(unittest.TestCase):

    def setUp(self) -> None:
        self.noise = NoiseModel(NoiseKind.GAUSSIAN, 1.0)
        self.h = 0.1
        self.n = 60

    def test_engines_match_closed_forms(self) -> None:
        for seed in range(3):
            seq = quadratic_sequence(self.h, self.noise, seed, self.n)
            eps = quadratic_noise_values(self.noise, seed, self.n)
            forward = apply_forward(seq, [1.0], self.n).terminal[0]
            backward = apply_backward_naive(seq, [1.0], self.n).terminal[0]
            self.assertAlmostEqual(forward, quadratic_forward_closed_form(1.0, self.h, eps), places=12)
            self.assertAlmostEqual(backward, quadratic_backward_closed_form(1.0, self.h, eps), places=12)

    def test_closed_form_rejects_unstable_rate(self) -> None:
        with self.assertRaises(ConfigurationError):
            quadratic_forward_closed_form(1.0, 2.5, [0.0])
        with self.assertRaises(ConfigurationError):
            quadratic_backward_closed_form(1.0, 0.0, [0.0])

    def test_operator_field(self) -> None:
        op = quadratic_sequence(self.h, self.noise, 0, 5).operator(2)
        eps = quadratic_noise_values(self.noise, 0, 2)[1]
        np.testing.assert_allclose(op.field(np.array([0.7])), [-0.7 + eps])
        np.testing.assert_array_equal(op.field_jacobian(np.array([0.7])), [[-1.0]])


class TestLinearized(unittest.TestCase):

    def setUp(self) -> None:
        self.H = np.array([[2.0, 0.5], [0.5, 1.0]])
        self.minimum = np.array([1.0, -1.0])
        self.noise = NoiseModel(NoiseKind.UNIFORM, 0.3)
        self.h = 0.2

    def test_engines_match_closed_forms(self) -> None:
        n, seed = 25, 4
        seq = linearized_sequence(self.minimum, self.H, self.h, self.noise, seed, n)
        eps = [self.noise.sample(seed, i, 2) for i in range(1, n + 1)]
        start = np.array([3.0, 0.0])
        np.testing.assert_allclose(
            apply_forward(seq, start, n).terminal,
            linearized_forward_closed_form(start, self.minimum, self.H, self.h, eps), rtol=1e-12, atol=1e-12,
        )
        np.testing.assert_allclose(
            apply_backward_naive(seq, start, n).terminal,
            linearized_backward_closed_form(start, self.minimum, self.H, self.h, eps), rtol=1e-12, atol=1e-12,
        )

    def test_non_symmetric_hessian_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            linearized_sequence(self.minimum, [[1.0, 0.3], [0.0, 1.0]], self.h, self.noise)

    def test_mismatched_minimum_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            linearized_sequence([0.0, 0.0, 0.0], self.H, self.h, self.noise, 0, 3)

    def test_indefinite_hessian_is_rejected(self) -> None:
        for hessian in ([[1.0, 0.0], [0.0, -0.5]], [[1.0, 2.0], [2.0, 1.0]]):
            with self.subTest(hessian=hessian):
                with self.assertRaises(ConfigurationError) as ctx:
                    linearized_sequence(self.minimum, hessian, self.h, self.noise)
                self.assertEqual(ctx.exception.fields, ["hessian"])
                with self.assertRaises(ConfigurationError):
                    linearized_operator(self.minimum, hessian, self.h, 1, self.noise)

    def test_non_positive_rate_is_rejected(self) -> None:
        for h in (0.0, -0.1):
            with self.subTest(h=h):
                with self.assertRaises(ConfigurationError):
                    linearized_sequence(self.minimum, self.H, h, self.noise)
                with self.assertRaises(ConfigurationError) as ctx:
                    quadratic_sequence(h, self.noise, 0, 3).operator(1)
                self.assertEqual(ctx.exception.fields, ["learning_rate"])


class TestTwoPoint(unittest.TestCase):

    def test_operators_are_constant_maps(self) -> None:
        s = two_point_operator(0, [0.0], [1.0])
        u = two_point_operator(1, [0.0], [1.0])
        np.testing.assert_array_equal(s(np.array([5.0])), [0.0])
        np.testing.assert_array_equal(u(np.array([5.0])), [1.0])
        self.assertEqual((s.name, u.name), ("S", "U"))

    def test_equal_points_are_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            two_point_operator(0, [1.0], [1.0])

    def test_backward_limit_is_the_first_operator_target(self) -> None:
        for seed in range(10):
            seq = two_point_sequence([0.0], [1.0], seed, 20)
            backward = apply_backward_naive(seq, [0.5], 20)
            forward = apply_forward(seq, [0.5], 20)
            self.assertEqual(backward.terminal[0], float(two_point_choice(seed, 1)))
            self.assertEqual(forward.terminal[0], float(two_point_choice(seed, 20)))
            self.assertTrue(all(r.step_displacement == 0.0 for r in backward.records[2:]))

    def test_choices_are_balanced(self) -> None:
        ones = sum(two_point_choice(0, i) for i in range(1, 2001))
        self.assertGreater(ones, 900)
        self.assertLess(ones, 1100)


class TestLeastSquares(unittest.TestCase):

    def setUp(self) -> None:
        self.model, self.theta_bar = random_least_squares(4, 40, 8, seed=2)
        self.theta = np.array([0.3, -0.1, 0.8, 0.2])

    def test_gradient_matches_finite_differences(self) -> None:
        for i in range(self.model.batch_count):
            numeric = central_gradient(lambda t: self.model.loss(i, t), self.theta)
            np.testing.assert_allclose(self.model.gradient(i, self.theta), numeric, rtol=1e-6, atol=1e-8)

    def test_interpolating_solution_zeroes_every_batch_gradient(self) -> None:
        for i in range(self.model.batch_count):
            np.testing.assert_allclose(self.model.gradient(i, self.theta_bar), 0.0, atol=1e-12)

    def test_full_loss_is_mean_of_batch_losses(self) -> None:
        batch_mean = np.mean([self.model.loss(i, self.theta) for i in range(self.model.batch_count)])
        self.assertAlmostEqual(self.model.full_loss(self.theta), batch_mean, places=12)

    def test_hessian_vector_product(self) -> None:
        v = np.array([1.0, 0.0, -1.0, 2.0])
        indices = self.model.batches[1]
        np.testing.assert_allclose(
            hessian_vector_product(self.model, indices, self.theta, v),
            self.model.hessian(1, self.theta) @ v,
        )

    def test_convexity_constants(self) -> None:
        m, M = convexity_constants(self.model, 0)
        self.assertGreater(m, 0.0)
        self.assertGreaterEqual(M, m)

    def test_rank_deficient_design_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            least_squares_model([[1.0, 2.0], [2.0, 4.0]], [1.0, 2.0], 1)

    def test_explicit_batches(self) -> None:
        model = least_squares_model(np.eye(3), [1.0, 2.0, 3.0], [[0, 2], [1]])
        self.assertEqual(model.batch_count, 2)
        np.testing.assert_array_equal(model.batches[0], [0, 2])

    def test_contiguous_batches_keep_the_remainder(self) -> None:
        batches = contiguous_batches(10, 4)
        self.assertEqual([b.size for b in batches], [4, 4, 2])


class TestSgdOperators(unittest.TestCase):

    def setUp(self) -> None:
        self.model, _ = random_least_squares(3, 30, 6, seed=0)
        self.theta = np.array([1.0, -1.0, 0.5])

    def test_sgd_step(self) -> None:
        op = sgd_operator(self.model, 2, 0.1)
        np.testing.assert_allclose(op(self.theta), self.theta - 0.1 * self.model.gradient(2, self.theta))
        np.testing.assert_allclose(op.field_jacobian(self.theta), -self.model.hessian(2, self.theta))
        self.assertEqual(op.index, 3)

    def test_negative_rate_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            sgd_operator(self.model, 0, -0.1)

    def test_sequence_uses_seeded_batches(self) -> None:
        seq = sgd_sequence(self.model, 0.1, seed=5, length=20)
        for step in (1, 7, 20):
            i = batch_choice(self.model, 5, step)
            np.testing.assert_allclose(seq[step](self.theta), sgd_operator(self.model, i, 0.1)(self.theta))
            self.assertEqual(seq[step].index, step)

    def test_scheduled_sequence(self) -> None:
        seq = scheduled_sgd_sequence(self.model, 0.1, [4, 0, 1])
        self.assertEqual(seq.length, 3)
        self.assertEqual(seq[1].name, "sgd[batch=4]")

    def test_full_batch_operator(self) -> None:
        op = full_batch_operator(self.model, 0.05)
        np.testing.assert_allclose(op(self.theta), self.theta - 0.05 * self.model.full_gradient(self.theta))


class WideModel(BatchLossModel):
    """Placeholder model above the dense-Hessian cap."""

    def __init__(self):
        super().__init__([[0]], n_samples=1, dim=MAX_HESSIAN_DIM + 1)

    def subset_loss(self, indices, theta):
        return 0.0

    def subset_gradient(self, indices, theta):
        return np.zeros(self.dim)


class TestResourceGuard(unittest.TestCase):

    def test_dense_hessian_above_cap_is_refused(self) -> None:
        model = WideModel()
        self.assertFalse(model.has_dense_hessian)
        with self.assertRaises(ResourceGuardError):
            model.hessian(0, np.zeros(model.dim))

    def test_sgd_operator_has_no_jacobian_above_cap(self) -> None:
        self.assertIsNone(sgd_operator(WideModel(), 0, 0.1).field_jacobian)


if __name__ == "__main__":
    unittest.main()
