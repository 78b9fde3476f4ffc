"""
tests.test_mlp

Unit tests for the regression datasets and the network model in services.mlp.
"""

import unittest

import numpy as np

from services.errors import ConfigurationError
from services.mlp import MLPModel, mlp_model, synthetic_regression_dataset
from utils.numerics import central_gradient


class TestRegressionDataset(unittest.TestCase):

    def test_grids(self) -> None:
        data = synthetic_regression_dataset("square")
        self.assertEqual(data.inputs.size, 101)
        self.assertEqual(data.test_inputs.size, 100)
        self.assertAlmostEqual(data.inputs[0], -1.0)
        self.assertAlmostEqual(data.inputs[-1], 1.0)
        self.assertAlmostEqual(data.test_inputs[0], -0.99)
        np.testing.assert_allclose(data.targets, data.inputs ** 2)

    def test_targets(self) -> None:
        np.testing.assert_allclose(synthetic_regression_dataset("cos10x").targets[50], 1.0, atol=1e-12)
        cube = synthetic_regression_dataset("cube")
        np.testing.assert_allclose(cube.test_targets, cube.test_inputs ** 3)

    def test_rows_list_train_then_test(self) -> None:
        rows = list(synthetic_regression_dataset("cube").rows())
        self.assertEqual(len(rows), 201)
        self.assertEqual(rows[0][0], "train")
        self.assertEqual(rows[-1][0], "test")

    def test_unknown_kind_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            synthetic_regression_dataset("sine")


class TestMLPModel(unittest.TestCase):

    def setUp(self) -> None:
        self.data = synthetic_regression_dataset("cos10x")

    def test_default_parameter_count(self) -> None:
        model = MLPModel(self.data)
        self.assertEqual(model.dim, 4353)
        self.assertEqual(model.batch_count, 101)
        self.assertFalse(model.has_dense_hessian)

    def test_gradient_matches_finite_differences(self) -> None:
        model = MLPModel(self.data, hidden=(3, 2), batch_size=5)
        theta = model.init_params(4)
        for i in (0, 7, 20):
            numeric = central_gradient(lambda t: model.loss(i, t), theta)
            np.testing.assert_allclose(model.gradient(i, theta), numeric, rtol=1e-5, atol=1e-8)

    def test_empty_hidden_is_a_linear_layer(self) -> None:
        model = mlp_model([], "tanh", self.data)
        self.assertEqual(model.dim, 2)
        np.testing.assert_allclose(model.predict(np.array([2.0, 0.5]), [0.0, 1.0]), [0.5, 2.5])

    def test_identity_activation_is_affine(self) -> None:
        model = MLPModel(self.data, hidden=(4,), activation="identity")
        theta = model.init_params(0)
        y = model.predict(theta, [-1.0, 0.0, 1.0])
        self.assertAlmostEqual(y[1] - y[0], y[2] - y[1], places=12)

    def test_init_is_seeded_and_scaled(self) -> None:
        model = MLPModel(self.data, hidden=(16,))
        np.testing.assert_array_equal(model.init_params(3), model.init_params(3))
        self.assertFalse(np.array_equal(model.init_params(3), model.init_params(4)))
        second_layer = model.init_params(3)[32:]
        self.assertTrue(np.all(np.abs(second_layer) <= 0.25))

    def test_losses(self) -> None:
        model = MLPModel(self.data, hidden=(8,))
        train, test = model.evaluate(model.init_params(0))
        self.assertGreater(train, 0.0)
        self.assertGreater(test, 0.0)

    def test_unknown_activation_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            MLPModel(self.data, activation="relu")


if __name__ == "__main__":
    unittest.main()
