"""
tests.test_order_average

Unit tests for splits, large/small-batch updates and the order-average
regularizer in services.order_average.
"""

import unittest

import numpy as np

from services.bracket_approx import order_check
from services.errors import ConfigurationError, ResourceGuardError
from services.model_zoo import batch_choice, random_least_squares
from services.order_average import (
    SplitConfig,
    lambda_values,
    large_batch_update,
    order_average_mode_tag,
    order_average_regularized_update,
    order_average_sequence,
    order_average_term,
    permutation_average_update_exact,
    sequential_small_batch_update,
    small_batch_regularizer,
    split_batch,
)

LADDER = [0.1, 0.05, 0.025, 0.0125]


class TestSplitBatch(unittest.TestCase):

    def test_partition(self) -> None:
        batch = np.arange(10, 22)
        splits = split_batch(batch, 3, seed=4)
        self.assertEqual([s.size for s in splits], [4, 4, 4])
        np.testing.assert_array_equal(np.sort(np.concatenate(splits)), batch)

    def test_seeded(self) -> None:
        batch = np.arange(12)
        a, b = split_batch(batch, 2, 1), split_batch(batch, 2, 1)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        c = split_batch(batch, 2, 1, index=5)
        self.assertFalse(all(np.array_equal(x, y) for x, y in zip(a, c)))

    def test_single_split_is_the_batch(self) -> None:
        np.testing.assert_array_equal(split_batch([3, 1, 2], 1, 0)[0], [3, 1, 2])

    def test_uneven_batch_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError) as ctx:
            split_batch(np.arange(10), 3, 0)
        self.assertIn("resize", ctx.exception.message)

    def test_split_config(self) -> None:
        config = SplitConfig.build(np.arange(8), 4, 0.2, lambda_=0.01, seed=3)
        self.assertAlmostEqual(config.small_rate, 0.05)
        self.assertEqual(len(config.splits), 4)
        with self.assertRaises(ConfigurationError):
            SplitConfig.build(np.arange(8), 4, 0.2, lambda_=-1.0)


class TestSmallBatchUpdates(unittest.TestCase):

    def setUp(self) -> None:
        self.model, _ = random_least_squares(5, 120, 12, seed=0, scale=0.2)
        self.batch = self.model.batches[0]
        self.theta = np.zeros(5)

    def test_one_split_is_the_large_update(self) -> None:
        splits = split_batch(self.batch, 1, 0)
        np.testing.assert_allclose(
            sequential_small_batch_update(self.model, splits, self.theta, 0.1),
            large_batch_update(self.model, self.batch, self.theta, 0.1),
        )

    def test_order_must_be_a_permutation(self) -> None:
        splits = split_batch(self.batch, 3, 0)
        with self.assertRaises(ConfigurationError):
            sequential_small_batch_update(self.model, splits, self.theta, 0.1, order=[0, 0, 1])

    def test_regularizer_over_both_orders_is_the_order_average_term(self) -> None:
        splits = split_batch(self.batch, 2, 0)
        h = 0.1
        both = (small_batch_regularizer(self.model, splits, self.theta, h, [0, 1])
                + small_batch_regularizer(self.model, splits, self.theta, h, [1, 0]))
        np.testing.assert_allclose(both, h * h * order_average_term(self.model, splits, self.theta), atol=1e-16)

    def test_two_splits_are_exact_at_second_order(self) -> None:
        splits = split_batch(self.batch, 2, 1)
        h = 0.05
        large = large_batch_update(self.model, self.batch, self.theta, 2 * h)
        np.testing.assert_allclose(
            large + small_batch_regularizer(self.model, splits, self.theta, h),
            sequential_small_batch_update(self.model, splits, self.theta, h),
            atol=1e-14,
        )
        np.testing.assert_allclose(
            large + 0.5 * h * h * order_average_term(self.model, splits, self.theta),
            permutation_average_update_exact(self.model, splits, self.theta, h),
            atol=1e-14,
        )

    def test_regularizer_error_is_third_order(self) -> None:
        for c in (3, 4):
            splits = split_batch(self.batch, c, 2)

            def build(h: float):
                large = large_batch_update(self.model, self.batch, self.theta, c * h)
                return (large + small_batch_regularizer(self.model, splits, self.theta, h),
                        sequential_small_batch_update(self.model, splits, self.theta, h))
            ratios = [r.ratio for r in order_check(build, LADDER) if r.ratio is not None]
            self.assertEqual(len(ratios), 3)
            for ratio in ratios:
                self.assertGreater(ratio, 6.5)
                self.assertLess(ratio, 9.5)

    def test_permutation_average_error_is_third_order(self) -> None:
        splits = split_batch(self.batch, 3, 5)

        def build(h: float):
            large = large_batch_update(self.model, self.batch, self.theta, 3 * h)
            return (large + 0.5 * h * h * order_average_term(self.model, splits, self.theta),
                    permutation_average_update_exact(self.model, splits, self.theta, h))
        ratios = [r.ratio for r in order_check(build, LADDER) if r.ratio is not None]
        self.assertEqual(len(ratios), 3)
        for ratio in ratios:
            self.assertGreater(ratio, 6.5)
            self.assertLess(ratio, 9.5)

    def test_enumeration_cap(self) -> None:
        model, _ = random_least_squares(2, 18, 18, seed=0)
        splits = split_batch(model.batches[0], 9, 0)
        with self.assertRaises(ResourceGuardError):
            permutation_average_update_exact(model, splits, np.zeros(2), 0.01)


class TestOrderAverageUpdate(unittest.TestCase):

    def setUp(self) -> None:
        self.model, _ = random_least_squares(5, 80, 8, seed=3, scale=0.2)
        self.theta = np.ones(5)

    def test_zero_lambda_is_the_large_update(self) -> None:
        batch = self.model.batches[2]
        np.testing.assert_array_equal(
            order_average_regularized_update(self.model, batch, self.theta, 0.05, 0.0, 2, seed=0),
            large_batch_update(self.model, batch, self.theta, 0.05),
        )

    def test_positive_lambda_adds_the_term(self) -> None:
        batch = self.model.batches[2]
        splits = split_batch(batch, 2, 7, index=3)
        expected = (large_batch_update(self.model, batch, self.theta, 0.05)
                    + 0.01 * order_average_term(self.model, splits, self.theta))
        np.testing.assert_allclose(
            order_average_regularized_update(self.model, batch, self.theta, 0.05, 0.01, 2, seed=7, index=3),
            expected,
        )

    def test_negative_lambda_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            order_average_regularized_update(self.model, self.model.batches[0], self.theta, 0.05, -0.1, 2, 0)

    def test_lambda_values(self) -> None:
        np.testing.assert_allclose(lambda_values(0.1, None, [0.5, 1.0]), [0.005, 0.01])
        self.assertEqual(lambda_values(0.1, 0.3), [0.3])
        with self.assertRaises(ConfigurationError):
            lambda_values(0.1)

    def test_mode_tag(self) -> None:
        self.assertEqual(order_average_mode_tag(0.01), "order-average(λ=0.01)")

    def test_sequence_steps_use_seeded_batches(self) -> None:
        seq = order_average_sequence(self.model, 0.05, 2, 0.01, seed=4, length=10)
        for step in (1, 6):
            batch = self.model.batches[batch_choice(self.model, 4, step)]
            np.testing.assert_allclose(
                seq[step](self.theta),
                order_average_regularized_update(self.model, batch, self.theta, 0.05, 0.01, 2, 4, index=step),
            )
        self.assertEqual(seq[1].name, "order-average(λ=0.01)")


if __name__ == "__main__":
    unittest.main()
