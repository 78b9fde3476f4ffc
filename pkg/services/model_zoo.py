"""
services.model_zoo

Concrete operator families and batch-loss models:

- the noisy quadratic T_i(theta) = (1 - h) theta + h eps_i and its closed forms,
- linearized dynamics near a minimum, theta* + (I - hH)(theta - theta*) + h eps_i,
- the two-point constant maps S(theta) = x0, U(theta) = y0,
- least squares split into batches, and SGD / full-batch operators over any
  BatchLossModel (the network model lives in services.mlp).

Noise and batch choices are drawn from utils.rng, so the operator at step i is a
pure function of (i, seed).
"""
import abc
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import numpy.typing as npt

from services.errors import CapabilityError, ConfigurationError, ResourceGuardError
from services.operator_core import (
    Matrix,
    OperatorSequence,
    ParamVector,
    UpdateOperator,
    as_param_vector,
)
from utils import rng
from utils.numerics import directional_hvp, symmetric_hessian

logger = logging.getLogger(__name__)

MAX_HESSIAN_DIM = 2000


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform-symmetric"
    RADEMACHER = "rademacher"


@dataclass(frozen=True)
class NoiseModel:
    """
    I.i.d. zero-mean noise drawn as a pure function of (seed, step index).

    Attributes:
        kind (NoiseKind): Distribution family.
        scale (float): Standard deviation (gaussian), half-width (uniform) or magnitude (rademacher).
        stream (str): Random stream identifier.
    """
    kind: NoiseKind = NoiseKind.GAUSSIAN
    scale: float = 1.0
    stream: str = "noise"

    def __post_init__(self):
        if not self.scale >= 0.0:
            raise ConfigurationError("Noise scale must be non-negative", fields=["noise.scale"])
        object.__setattr__(self, "kind", NoiseKind(self.kind))

    def _draw(self, seed: int, counter: int) -> float:
        if self.kind is NoiseKind.GAUSSIAN:
            return self.scale * rng.gaussian(seed, self.stream, counter)
        if self.kind is NoiseKind.UNIFORM:
            return self.scale * (2.0 * rng.uniform(seed, self.stream, counter) - 1.0)
        return self.scale * rng.rademacher(seed, self.stream, counter)

    def sample(self, seed: int, index: int, dim: int = 1) -> ParamVector:
        """
        Noise vector eps_index.

        Args:
            seed (int): Sequence seed.
            index (int): Step index.
            dim (int): Dimension of the vector.

        Returns:
            numpy.ndarray: Shape (dim,).
        """
        return np.array([self._draw(seed, index * dim + c) for c in range(dim)], dtype=np.float64)

    def stationary_variance(self) -> float:
        """Per-coordinate variance of one draw."""
        if self.kind is NoiseKind.UNIFORM:
            return self.scale ** 2 / 3.0
        return self.scale ** 2

    def bound(self) -> float:
        """Almost-sure bound on |eps|, infinite for gaussian noise."""
        return np.inf if self.kind is NoiseKind.GAUSSIAN else self.scale


# --- noisy quadratic ---------------------------------------------------------

def quadratic_noisy_operator(h: float, step: int, noise: NoiseModel, seed: int = 0) -> UpdateOperator:
    """
    T_step(theta) = (1 - h) theta + h eps_step for the loss theta^2 / 2.

    Args:
        h (float): Learning rate, positive.
        step (int): Step index.
        noise (NoiseModel): Gradient noise law.
        seed (int): Sequence seed.

    Returns:
        UpdateOperator: One-dimensional affine operator with field -theta + eps.

    Raises:
        ConfigurationError: If h <= 0.
    """
    _check_positive_rate(h)
    eps = float(noise.sample(seed, step)[0])
    a = 1.0 - h

    def apply(theta: ParamVector) -> ParamVector:
        return a * theta + h * eps

    def field(theta: ParamVector) -> ParamVector:
        return -theta + eps

    def jacobian(theta: ParamVector) -> Matrix:
        return np.array([[-1.0]])

    return UpdateOperator(step, h, apply, field, jacobian, name=f"quadratic[{step}]")


def quadratic_sequence(h: float, noise: NoiseModel, seed: int = 0, length: int | None = None) -> OperatorSequence:
    """Seeded stream of noisy quadratic operators."""
    return OperatorSequence(lambda i, s: quadratic_noisy_operator(h, i, noise, s), seed, length)


def quadratic_noise_values(noise: NoiseModel, seed: int, n: int) -> ParamVector:
    """eps_1..eps_n exactly as the operators see them."""
    return np.array([noise.sample(seed, i)[0] for i in range(1, n + 1)], dtype=np.float64)


def _check_rate(h: float) -> None:
    if not 0.0 < h < 2.0:
        raise ConfigurationError("Learning rate must lie in (0, 2)", fields=["learning_rate"])


def quadratic_forward_closed_form(theta: float, h: float, eps: Sequence[float]) -> float:
    """
    (1 - h)^n theta + sum_j h (1 - h)^(n - j) eps_j: the forward iterate T_n ... T_1(theta).
    """
    _check_rate(h)
    eps = np.asarray(eps, dtype=np.float64)
    n = eps.size
    powers = np.power(1.0 - h, n - np.arange(1, n + 1))
    return float((1.0 - h) ** n * theta + np.sum(h * powers * eps))


def quadratic_backward_closed_form(theta: float, h: float, eps: Sequence[float]) -> float:
    """
    (1 - h)^n theta + sum_j h (1 - h)^(j - 1) eps_j: the backward iterate T_1 ... T_n(theta).
    """
    _check_rate(h)
    eps = np.asarray(eps, dtype=np.float64)
    n = eps.size
    powers = np.power(1.0 - h, np.arange(n))
    return float((1.0 - h) ** n * theta + np.sum(h * powers * eps))


# --- linearized dynamics near a minimum --------------------------------------

def symmetric_matrix(matrix, name: str = "hessian") -> Matrix:
    """
    `matrix` as a float array, checked square and symmetric.

    Raises:
        ConfigurationError: Naming `name` as the offending field.
    """
    H = np.array(matrix, dtype=np.float64, ndmin=2)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ConfigurationError("Matrix must be square", fields=[name])
    scale = max(1.0, float(np.max(np.abs(H))))
    if not np.allclose(H, H.T, rtol=0.0, atol=1e-12 * scale):
        raise ConfigurationError("Matrix must be symmetric", fields=[name])
    return H


def _check_positive_rate(h: float) -> None:
    if not h > 0.0:
        raise ConfigurationError("Learning rate must be positive", fields=["learning_rate"])


def _linearized_inputs(minimum, hessian, h: float) -> tuple[ParamVector, Matrix]:
    _check_positive_rate(h)
    theta_star = as_param_vector(minimum)
    H = symmetric_matrix(hessian)
    d = theta_star.size
    if H.shape != (d, d):
        raise ConfigurationError("Hessian shape does not match the minimum", fields=["hessian"])
    if np.linalg.eigvalsh(H)[0] <= 0.0:
        raise ConfigurationError("Hessian must be positive definite", fields=["hessian"])
    return theta_star, H


def _linearized(theta_star: ParamVector, H: Matrix, h: float, step: int, noise: NoiseModel,
                seed: int) -> UpdateOperator:
    eps = noise.sample(seed, step, theta_star.size)
    A = np.eye(theta_star.size) - h * H

    def apply(theta: ParamVector) -> ParamVector:
        return theta_star + A @ (theta - theta_star) + h * eps

    def field(theta: ParamVector) -> ParamVector:
        return -(H @ (theta - theta_star)) + eps

    def jacobian(theta: ParamVector) -> Matrix:
        return -H

    return UpdateOperator(step, h, apply, field, jacobian, name=f"linearized[{step}]")


def linearized_operator(
        minimum,
        hessian,
        h: float,
        step: int,
        noise: NoiseModel,
        seed: int = 0,
    ) -> UpdateOperator:
    """
    T_step(theta) = theta* + (I - hH)(theta - theta*) + h eps_step.

    Args:
        minimum: theta*.
        hessian: Symmetric positive definite H.
        h (float): Learning rate, positive.
        step (int): Step index.
        noise (NoiseModel): Noise law, drawn in dimension d.
        seed (int): Sequence seed.

    Returns:
        UpdateOperator: Affine operator with field -H(theta - theta*) + eps.

    Raises:
        ConfigurationError: If h <= 0, H is not symmetric positive definite
            or does not match theta*.
    """
    theta_star, H = _linearized_inputs(minimum, hessian, h)
    return _linearized(theta_star, H, h, step, noise, seed)


def linearized_sequence(minimum, hessian, h: float, noise: NoiseModel, seed: int = 0,
                        length: int | None = None) -> OperatorSequence:
    """Seeded stream of linearized operators; the inputs are checked once, here."""
    theta_star, H = _linearized_inputs(minimum, hessian, h)
    return OperatorSequence(
        lambda i, s: _linearized(theta_star, H, h, i, noise, s), seed, length
    )


def linearized_forward_closed_form(theta, minimum, hessian, h: float, eps: Sequence) -> ParamVector:
    """theta* + (I - hH)^n (theta - theta*) + sum_j h (I - hH)^(n - j) eps_j."""
    theta_star = as_param_vector(minimum)
    A = np.eye(theta_star.size) - h * symmetric_matrix(hessian)
    out = as_param_vector(theta) - theta_star
    for e in eps:
        out = A @ out + h * np.asarray(e, dtype=np.float64)
    return theta_star + out


def linearized_backward_closed_form(theta, minimum, hessian, h: float, eps: Sequence) -> ParamVector:
    """theta* + (I - hH)^n (theta - theta*) + sum_j h (I - hH)^(j - 1) eps_j."""
    return linearized_forward_closed_form(theta, minimum, hessian, h, list(eps)[::-1])


# --- two-point counterexample -------------------------------------------------

def two_point_operator(choice: int, x0, y0, index: int = 1) -> UpdateOperator:
    """
    Constant map to x0 (choice 0, "S") or y0 (choice 1, "U").

    The field (target - theta) / h with h = 1 keeps the UpdateOperator contract.

    Raises:
        ConfigurationError: If x0 equals y0 or their shapes differ.
    """
    x0 = as_param_vector(x0)
    y0 = as_param_vector(y0)
    if x0.shape != y0.shape or np.array_equal(x0, y0):
        raise ConfigurationError("x0 and y0 must be distinct points of equal dimension",
                                 fields=["model.x0", "model.y0"])
    target = x0 if choice == 0 else y0
    identity = np.eye(target.size)

    def apply(theta: ParamVector) -> ParamVector:
        return target.copy()

    def field(theta: ParamVector) -> ParamVector:
        return target - theta

    def jacobian(theta: ParamVector) -> Matrix:
        return -identity

    return UpdateOperator(index, 1.0, apply, field, jacobian, name="S" if choice == 0 else "U")


def two_point_choice(seed: int, index: int) -> int:
    """Fair coin: 0 selects S, 1 selects U."""
    return 0 if rng.uniform(seed, "two-point", index) < 0.5 else 1


def two_point_sequence(x0, y0, seed: int = 0, length: int | None = None) -> OperatorSequence:
    """Seeded stream of S / U operators chosen with probability 1/2 each."""
    x0 = as_param_vector(x0)
    y0 = as_param_vector(y0)
    return OperatorSequence(
        lambda i, s: two_point_operator(two_point_choice(s, i), x0, y0, index=i), seed, length
    )


# --- batch-loss models --------------------------------------------------------

Batches = list[npt.NDArray[np.intp]]


def contiguous_batches(n_samples: int, batch_size: int) -> Batches:
    """Partition sample indices 0..n_samples-1 into consecutive batches."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be at least 1", fields=["batch_size"])
    return [np.arange(i, min(i + batch_size, n_samples)) for i in range(0, n_samples, batch_size)]


class BatchLossModel(abc.ABC):
    """
    A loss L(theta) = (1/N) sum_i L_i(theta) over N batches of samples.

    Subclasses implement the mean loss and gradient over an arbitrary set of
    sample indices; batch-level quantities are derived from those. Batch
    indices are 0-based.

    Attributes:
        batches (list[numpy.ndarray]): Sample indices of each batch.
        dim (int): Parameter dimension.
        hessian_is_exact (bool): True when subset_hessian is analytic.
    """
    hessian_is_exact = False

    def __init__(self, batches: Sequence[Sequence[int]], n_samples: int, dim: int):
        self.n_samples = n_samples
        self.dim = dim
        self.batches = [np.asarray(b, dtype=np.intp) for b in batches]
        if not self.batches or any(b.size == 0 for b in self.batches):
            raise ConfigurationError("Every batch must contain at least one sample", fields=["batches"])
        flat = np.concatenate(self.batches)
        if flat.min() < 0 or flat.max() >= n_samples:
            raise ConfigurationError("Batch indices out of range", fields=["batches"])
        sizes = {b.size for b in self.batches}
        self._uniform_partition = (
            len(sizes) == 1 and flat.size == n_samples and np.unique(flat).size == n_samples
        )
        self._all = np.arange(n_samples)

    @property
    def batch_count(self) -> int:
        return len(self.batches)

    @abc.abstractmethod
    def subset_loss(self, indices, theta: ParamVector) -> float:
        """Mean sample loss over `indices`."""

    @abc.abstractmethod
    def subset_gradient(self, indices, theta: ParamVector) -> ParamVector:
        """Gradient of subset_loss."""

    def subset_hessian(self, indices, theta: ParamVector) -> Matrix:
        """
        Hessian of subset_loss; central differences of the gradient unless overridden.

        Raises:
            ResourceGuardError: If the dense Hessian would exceed the dimension cap.
        """
        if self.dim > MAX_HESSIAN_DIM:
            raise ResourceGuardError(
                f"Dense Hessian of dimension {self.dim} exceeds the cap of {MAX_HESSIAN_DIM}"
            )
        return symmetric_hessian(lambda t: self.subset_gradient(indices, t), theta)

    def subset_hvp(self, indices, theta: ParamVector, v: ParamVector) -> ParamVector:
        """Hessian-vector product of subset_loss."""
        return directional_hvp(lambda t: self.subset_gradient(indices, t), theta, v)

    def loss(self, i: int, theta: ParamVector) -> float:
        return self.subset_loss(self.batches[i], theta)

    def gradient(self, i: int, theta: ParamVector) -> ParamVector:
        return self.subset_gradient(self.batches[i], theta)

    def hessian(self, i: int, theta: ParamVector) -> Matrix:
        return self.subset_hessian(self.batches[i], theta)

    def hvp(self, i: int, theta: ParamVector, v: ParamVector) -> ParamVector:
        return self.subset_hvp(self.batches[i], theta, v)

    @property
    def has_dense_hessian(self) -> bool:
        return self.dim <= MAX_HESSIAN_DIM

    def full_loss(self, theta: ParamVector) -> float:
        """Mean of the batch losses."""
        if self._uniform_partition:
            return self.subset_loss(self._all, theta)
        return float(np.mean([self.loss(i, theta) for i in range(self.batch_count)]))

    def full_gradient(self, theta: ParamVector) -> ParamVector:
        if self._uniform_partition:
            return self.subset_gradient(self._all, theta)
        return np.mean([self.gradient(i, theta) for i in range(self.batch_count)], axis=0)

    def full_hessian(self, theta: ParamVector) -> Matrix:
        if self._uniform_partition:
            return self.subset_hessian(self._all, theta)
        return np.mean([self.hessian(i, theta) for i in range(self.batch_count)], axis=0)

    def test_loss(self, theta: ParamVector) -> float | None:
        """Held-out loss, when the model has a test split."""
        return None

    def evaluate(self, theta: ParamVector) -> tuple[float | None, float | None]:
        """(full training loss, test loss)."""
        return self.full_loss(theta), self.test_loss(theta)

    def convexity_constants(self, i: int, theta: ParamVector | None = None) -> tuple[float, float]:
        """
        (m, M): smallest and largest eigenvalue of the Hessian of batch i.
        """
        point = np.zeros(self.dim) if theta is None else theta
        eigenvalues = np.linalg.eigvalsh(self.hessian(i, point))
        return float(eigenvalues[0]), float(eigenvalues[-1])


class LeastSquaresModel(BatchLossModel):
    """
    L_B(theta) = mean over rows r in B of (a_r . theta - b_r)^2, with analytic derivatives.
    """
    hessian_is_exact = True

    def __init__(self, design, targets, batches: Sequence[Sequence[int]]):
        A = np.array(design, dtype=np.float64, ndmin=2)
        b = np.array(targets, dtype=np.float64).reshape(-1)
        if A.shape[0] != b.size:
            raise ConfigurationError("Design matrix and targets disagree in length", fields=["targets"])
        if np.linalg.matrix_rank(A) < A.shape[1]:
            raise ConfigurationError("Design matrix must have full column rank", fields=["design"])
        super().__init__(batches, n_samples=A.shape[0], dim=A.shape[1])
        self.design = A
        self.targets = b

    def subset_loss(self, indices, theta: ParamVector) -> float:
        residual = self.design[indices] @ theta - self.targets[indices]
        return float(np.mean(residual ** 2))

    def subset_gradient(self, indices, theta: ParamVector) -> ParamVector:
        A = self.design[indices]
        return (2.0 / A.shape[0]) * (A.T @ (A @ theta - self.targets[indices]))

    def subset_hessian(self, indices, theta: ParamVector) -> Matrix:
        A = self.design[indices]
        return (2.0 / A.shape[0]) * (A.T @ A)

    def subset_hvp(self, indices, theta: ParamVector, v: ParamVector) -> ParamVector:
        A = self.design[indices]
        return (2.0 / A.shape[0]) * (A.T @ (A @ v))


def least_squares_model(design, targets, batch_assignment: Sequence[Sequence[int]] | int) -> LeastSquaresModel:
    """
    Least-squares BatchLossModel.

    Args:
        design: Matrix A of shape (rows, d), full column rank.
        targets: Vector b of length rows.
        batch_assignment: List of row-index batches, or an int batch size for
            consecutive batches.

    Returns:
        LeastSquaresModel: The model.

    Raises:
        ConfigurationError: If A is rank deficient.
    """
    design = np.array(design, dtype=np.float64, ndmin=2)
    if isinstance(batch_assignment, int):
        batch_assignment = contiguous_batches(design.shape[0], batch_assignment)
    return LeastSquaresModel(design, targets, batch_assignment)


def random_least_squares(
        dim: int,
        n_samples: int,
        batch_size: int,
        seed: int = 0,
        scale: float = 1.0,
        target_noise: float = 0.0,
    ) -> tuple[LeastSquaresModel, ParamVector]:
    """
    Seeded synthetic least-squares instance with Gaussian design.

    With target_noise = 0 the returned theta_bar interpolates every batch.

    Returns:
        tuple: (model, theta_bar).
    """
    count = n_samples * dim
    A = scale * rng.gaussian_array(seed, "ls-design", np.arange(count)).reshape(n_samples, dim)
    theta_bar = rng.gaussian_array(seed, "ls-solution", np.arange(dim))
    b = A @ theta_bar
    if target_noise > 0.0:
        b = b + target_noise * rng.gaussian_array(seed, "ls-target-noise", np.arange(n_samples))
    return least_squares_model(A, b, batch_size), theta_bar


# --- SGD operators ------------------------------------------------------------

def sgd_operator(model: BatchLossModel, i: int, h: float, index: int | None = None) -> UpdateOperator:
    """
    T(theta) = theta - h grad L_i(theta), field -grad L_i, Jacobian -hess L_i.

    Args:
        model (BatchLossModel): Loss model.
        i (int): Batch index (0-based).
        h (float): Learning rate, non-negative.
        index (int | None): Step index to record on the operator; defaults to i + 1.

    Returns:
        UpdateOperator: The SGD step.
    """
    if h < 0.0:
        raise ConfigurationError("Learning rate must be non-negative", fields=["learning_rate"])

    def apply(theta: ParamVector) -> ParamVector:
        return theta - h * model.gradient(i, theta)

    def field(theta: ParamVector) -> ParamVector:
        return -model.gradient(i, theta)

    jacobian = None
    if model.has_dense_hessian:
        def jacobian(theta: ParamVector) -> Matrix:
            return -model.hessian(i, theta)

    return UpdateOperator(i + 1 if index is None else index, h, apply, field, jacobian,
                          name=f"sgd[batch={i}]")


def batch_choice(model: BatchLossModel, seed: int, step: int) -> int:
    """Batch sampled uniformly with replacement at `step`."""
    return rng.randbelow(seed, "batch", step, model.batch_count)


def sgd_sequence(model: BatchLossModel, h: float, seed: int = 0, length: int | None = None) -> OperatorSequence:
    """SGD operators over batches sampled uniformly with replacement per step."""
    return OperatorSequence(
        lambda step, s: sgd_operator(model, batch_choice(model, s, step), h, index=step), seed, length
    )


def scheduled_sgd_sequence(model: BatchLossModel, h: float, schedule: Sequence[int], seed: int = 0) -> OperatorSequence:
    """SGD operators visiting batches in a fixed order: step i uses schedule[i - 1]."""
    schedule = [int(b) for b in schedule]
    return OperatorSequence(
        lambda step, s: sgd_operator(model, schedule[step - 1], h, index=step), seed, len(schedule)
    )


def full_batch_operator(model: BatchLossModel, h: float, index: int = 1) -> UpdateOperator:
    """Full-batch gradient descent step theta - h grad L(theta)."""
    def apply(theta: ParamVector) -> ParamVector:
        return theta - h * model.full_gradient(theta)

    def field(theta: ParamVector) -> ParamVector:
        return -model.full_gradient(theta)

    def jacobian(theta: ParamVector) -> Matrix:
        if not model.has_dense_hessian:
            raise CapabilityError(f"Model of dimension {model.dim} has no dense Hessian")
        return -model.full_hessian(theta)

    return UpdateOperator(index, h, apply, field, jacobian, name="full-batch")


def full_batch_sequence(model: BatchLossModel, h: float, seed: int = 0, length: int | None = None) -> OperatorSequence:
    """Every operator is the same full-batch step."""
    return OperatorSequence(lambda step, s: full_batch_operator(model, h, index=step), seed, length)


def hessian_vector_product(model: BatchLossModel, indices, theta: ParamVector, v: ParamVector) -> ParamVector:
    """Hessian of the mean loss over `indices` at theta, applied to v."""
    return model.subset_hvp(np.asarray(indices, dtype=np.intp), theta, v)


def convexity_constants(model: BatchLossModel, i: int, theta: ParamVector | None = None) -> tuple[float, float]:
    """(m, M) of batch i; see BatchLossModel.convexity_constants."""
    return model.convexity_constants(i, theta)
