"""
services.mlp

Synthetic one-dimensional regression data and a small fully connected network
trained on it with squared error.

The network maps a scalar x through hidden layers of the given widths (tanh by
default) to a scalar output. Gradients are computed by a hand-written reverse
pass over the flattened parameter vector; second derivatives come from central
differences of that gradient.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import numpy.typing as npt

from services.errors import ConfigurationError
from services.model_zoo import BatchLossModel, contiguous_batches
from services.operator_core import ParamVector
from utils import rng

logger = logging.getLogger(__name__)

TARGET_FUNCTIONS: dict[str, Callable[[npt.NDArray[np.float64]], npt.NDArray[np.float64]]] = {
    "square": np.square,
    "cos10x": lambda x: np.cos(10.0 * x),
    "cube": lambda x: x ** 3,
}

TRAIN_POINTS = 101
TEST_POINTS = 100


@dataclass(frozen=True)
class RegressionDataset:
    """
    Training grid x_i = -1 + 2i/100 (i = 0..100) and the midpoint test grid.

    Attributes:
        kind (str): One of square, cos10x, cube.
        inputs (numpy.ndarray): Training inputs.
        targets (numpy.ndarray): f(inputs).
        test_inputs (numpy.ndarray): Midpoints -1 + (2i + 1)/100, i = 0..99.
        test_targets (numpy.ndarray): f(test_inputs).
    """
    kind: str
    inputs: npt.NDArray[np.float64]
    targets: npt.NDArray[np.float64]
    test_inputs: npt.NDArray[np.float64]
    test_targets: npt.NDArray[np.float64]

    def rows(self):
        """Yield (split, x, y) for every training then test point."""
        for x, y in zip(self.inputs, self.targets):
            yield "train", float(x), float(y)
        for x, y in zip(self.test_inputs, self.test_targets):
            yield "test", float(x), float(y)


def synthetic_regression_dataset(kind: str) -> RegressionDataset:
    """
    Build the regression dataset for a target function.

    Args:
        kind (str): square (x^2), cos10x (cos(10x)) or cube (x^3).

    Returns:
        RegressionDataset: 101 training and 100 held-out points.

    Raises:
        ConfigurationError: For an unknown kind.
    """
    try:
        f = TARGET_FUNCTIONS[kind]
    except KeyError as e:
        raise ConfigurationError(
            f"Unknown dataset kind '{kind}'; expected one of {sorted(TARGET_FUNCTIONS)}",
            fields=["model.dataset"],
            raw_error=e,
        )
    x = -1.0 + 2.0 * np.arange(TRAIN_POINTS) / 100.0
    x_test = -1.0 + (2.0 * np.arange(TEST_POINTS) + 1.0) / 100.0
    return RegressionDataset(kind, x, f(x), x_test, f(x_test))


def _tanh_derivative(z, a):
    return 1.0 - a * a


def _identity_derivative(z, a):
    return np.ones_like(z)


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_derivative),
    "identity": (lambda z: z, _identity_derivative),
}


class MLPModel(BatchLossModel):
    """
    Scalar-in, scalar-out network with squared-error loss per batch of samples.

    Parameters are flattened layer by layer as (W_l row-major, b_l). An empty
    `hidden` tuple is a single linear layer y = w x + b.

    Attributes:
        dataset (RegressionDataset): Training and test data.
        hidden (tuple[int, ...]): Hidden layer widths.
        activation (str): Hidden activation name.
    """
    hessian_is_exact = False

    def __init__(
            self,
            dataset: RegressionDataset,
            hidden: Sequence[int] = (64, 64),
            activation: str = "tanh",
            batch_size: int = 1,
        ):
        if activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"Unknown activation '{activation}'; expected one of {sorted(ACTIVATIONS)}",
                fields=["model.activation"],
            )
        if any(int(w) < 1 for w in hidden):
            raise ConfigurationError("Layer widths must be positive", fields=["model.widths"])
        self.dataset = dataset
        self.hidden = tuple(int(w) for w in hidden)
        self.activation = activation
        self._act, self._act_prime = ACTIVATIONS[activation]

        sizes = (1,) + self.hidden + (1,)
        self._shapes = list(zip(sizes[1:], sizes[:-1]))
        self._offsets = []
        offset = 0
        for out_dim, in_dim in self._shapes:
            self._offsets.append(offset)
            offset += out_dim * in_dim + out_dim
        super().__init__(contiguous_batches(dataset.inputs.size, batch_size),
                         n_samples=dataset.inputs.size, dim=offset)
        logger.debug("MLP %s (%s): %d parameters", self.hidden, activation, self.dim)

    def init_params(self, seed: int) -> ParamVector:
        """Weights and biases uniform on +-1/sqrt(fan_in), drawn from the "mlp-init" stream."""
        u = rng.uniform_array(seed, "mlp-init", np.arange(self.dim))
        scale = np.empty(self.dim)
        for (out_dim, in_dim), offset in zip(self._shapes, self._offsets):
            scale[offset:offset + out_dim * in_dim + out_dim] = 1.0 / np.sqrt(in_dim)
        return scale * (2.0 * u - 1.0)

    def _unpack(self, theta: ParamVector):
        layers = []
        for (out_dim, in_dim), offset in zip(self._shapes, self._offsets):
            w_end = offset + out_dim * in_dim
            layers.append((theta[offset:w_end].reshape(out_dim, in_dim), theta[w_end:w_end + out_dim]))
        return layers

    def predict(self, theta: ParamVector, x) -> npt.NDArray[np.float64]:
        """Network output for inputs x."""
        a = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        layers = self._unpack(theta)
        for depth, (W, b) in enumerate(layers):
            z = a @ W.T + b
            a = z if depth == len(layers) - 1 else self._act(z)
        return a[:, 0]

    def _mse(self, theta: ParamVector, x, y) -> float:
        return float(np.mean((self.predict(theta, x) - y) ** 2))

    def subset_loss(self, indices, theta: ParamVector) -> float:
        return self._mse(theta, self.dataset.inputs[indices], self.dataset.targets[indices])

    def subset_gradient(self, indices, theta: ParamVector) -> ParamVector:
        x = self.dataset.inputs[indices].reshape(-1, 1)
        y = self.dataset.targets[indices]
        layers = self._unpack(theta)
        last = len(layers) - 1

        activations = [x]
        pre = []
        a = x
        for depth, (W, b) in enumerate(layers):
            z = a @ W.T + b
            pre.append(z)
            a = z if depth == last else self._act(z)
            activations.append(a)

        grad = np.empty_like(theta)
        delta = (2.0 / x.shape[0]) * (activations[-1] - y.reshape(-1, 1))
        for depth in range(last, -1, -1):
            W, _ = layers[depth]
            out_dim, in_dim = self._shapes[depth]
            offset = self._offsets[depth]
            w_end = offset + out_dim * in_dim
            grad[offset:w_end] = (delta.T @ activations[depth]).reshape(-1)
            grad[w_end:w_end + out_dim] = delta.sum(axis=0)
            if depth > 0:
                delta = (delta @ W) * self._act_prime(pre[depth - 1], activations[depth])
        return grad

    def test_loss(self, theta: ParamVector) -> float:
        return self._mse(theta, self.dataset.test_inputs, self.dataset.test_targets)


def mlp_model(
        widths: Sequence[int],
        activation: str,
        dataset: RegressionDataset,
        batch_size: int = 1,
    ) -> MLPModel:
    """Convenience constructor mirroring the experiment config fields."""
    return MLPModel(dataset, hidden=widths, activation=activation, batch_size=batch_size)
