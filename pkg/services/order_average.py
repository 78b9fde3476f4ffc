"""
services.order_average

Large-batch versus sequential small-batch updates and the order-average regularizer.

A batch B is split into c equal parts B_1..B_c with fields V_i = -grad L_{B_i}.
With h' = h / c:

    T_large(theta) = theta + h V_B(theta) = theta + h' sum_i V_i(theta)
    T_small(theta) = (1 + h' V_{o_c}) ... (1 + h' V_{o_1})(theta)       (o_1 applied first)
                   = T_large(theta) + h'^2 sum_{u<v} V'_{o_v} V_{o_u}(theta) + O(h'^3)

Averaging T_small over all c! orders gives T_large + (h'^2 / 2) sum_{i != j} V'_i V_j
+ O(h'^3); the order-average update replaces h'^2 / 2 with a free weight lambda.

Split indices are 0-based. Every V' product is computed as a Hessian-vector
product, so the dense Hessian is never formed.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt

from services.errors import ConfigurationError, ResourceGuardError
from services.model_zoo import BatchLossModel, batch_choice
from services.operator_core import OperatorSequence, ParamVector, UpdateOperator, as_param_vector
from utils import rng

logger = logging.getLogger(__name__)

MAX_ENUMERATED_SPLITS = 8

Splits = list[npt.NDArray[np.intp]]


def split_batch(batch: Sequence[int], c: int, seed: int, index: int = 0) -> Splits:
    """
    Seeded uniform partition of a batch into c equal parts.

    Args:
        batch (Sequence[int]): Sample indices.
        c (int): Number of parts, at least 1.
        seed (int): Partition seed.
        index (int): Counter offset, so successive steps draw different partitions.

    Returns:
        list[numpy.ndarray]: c disjoint index arrays whose union is the batch.

    Raises:
        ConfigurationError: If c < 1 or the batch size is not a multiple of c.
    """
    batch = np.asarray(batch, dtype=np.intp).reshape(-1)
    if c < 1:
        raise ConfigurationError("Split count must be at least 1", fields=["order_average.c"])
    if batch.size % c != 0:
        raise ConfigurationError(
            f"Batch of size {batch.size} cannot be split into {c} equal parts; "
            f"resize it to a multiple of {c}",
            fields=["batch_size", "order_average.c"],
        )
    if c == 1:
        return [batch.copy()]
    keys = rng.uniform_array(seed, "split", index * batch.size + np.arange(batch.size))
    shuffled = batch[np.argsort(keys, kind="stable")]
    return [part.copy() for part in np.split(shuffled, c)]


@dataclass(frozen=True)
class SplitConfig:
    """
    A batch, its split and the two learning rates.

    Attributes:
        c (int): Split count.
        large_rate (float): h.
        lambda_ (float): Order-average regularizer weight.
        batch (numpy.ndarray): Sample indices of B.
        splits (list[numpy.ndarray]): B_1..B_c.
    """
    c: int
    large_rate: float
    lambda_: float
    batch: npt.NDArray[np.intp]
    splits: Splits

    def __post_init__(self):
        if self.lambda_ < 0.0:
            raise ConfigurationError("lambda must be non-negative", fields=["order_average.lambda"])
        if len(self.splits) != self.c:
            raise ConfigurationError(f"Expected {self.c} splits, got {len(self.splits)}")
        sizes = {len(s) for s in self.splits}
        joined = np.sort(np.concatenate(self.splits))
        if len(sizes) != 1 or not np.array_equal(joined, np.sort(self.batch)):
            raise ConfigurationError("Splits must be equal-sized and partition the batch")
        if not math.isclose(self.small_rate * self.c, self.large_rate, rel_tol=1e-15, abs_tol=0.0):
            raise ConfigurationError("Small-batch rate times c must equal the large-batch rate")

    @property
    def small_rate(self) -> float:
        return self.large_rate / self.c

    @classmethod
    def build(cls, batch: Sequence[int], c: int, h: float, lambda_: float = 0.0,
              seed: int = 0, index: int = 0) -> "SplitConfig":
        """Split `batch` with split_batch and wrap the result."""
        batch = np.asarray(batch, dtype=np.intp)
        return cls(c, h, lambda_, batch, split_batch(batch, c, seed, index))


def _check_rate(h: float) -> None:
    if h < 0.0:
        raise ConfigurationError("Learning rate must be non-negative", fields=["learning_rate"])


def large_batch_update(model: BatchLossModel, batch: Sequence[int], theta, h: float) -> ParamVector:
    """theta - h grad L_B(theta): one step on the whole batch."""
    _check_rate(h)
    theta = as_param_vector(theta)
    return theta - h * model.subset_gradient(np.asarray(batch, dtype=np.intp), theta)


def _check_order(order: Sequence[int] | None, c: int) -> list[int]:
    if order is None:
        return list(range(c))
    order = [int(o) for o in order]
    if sorted(order) != list(range(c)):
        raise ConfigurationError(f"Order must be a permutation of 0..{c - 1}", fields=["order"])
    return order


def sequential_small_batch_update(
        model: BatchLossModel,
        splits: Sequence[Sequence[int]],
        theta,
        h_small: float,
        order: Sequence[int] | None = None,
    ) -> ParamVector:
    """
    Apply the split steps theta <- theta - h' grad L_{B_o}(theta) in `order`.

    Args:
        model (BatchLossModel): Loss model.
        splits (Sequence): Split index sets.
        theta: Start point.
        h_small (float): h'.
        order (Sequence[int] | None): Permutation of split indices; the first entry is applied first.

    Returns:
        numpy.ndarray: T_small(theta).
    """
    _check_rate(h_small)
    theta = as_param_vector(theta)
    for o in _check_order(order, len(splits)):
        theta = theta - h_small * model.subset_gradient(np.asarray(splits[o], dtype=np.intp), theta)
    return theta


def _split_gradients(model: BatchLossModel, splits, theta: ParamVector) -> list[ParamVector]:
    return [model.subset_gradient(np.asarray(s, dtype=np.intp), theta) for s in splits]


def small_batch_regularizer(
        model: BatchLossModel,
        splits: Sequence[Sequence[int]],
        theta,
        h_small: float,
        order: Sequence[int] | None = None,
    ) -> ParamVector:
    """
    h'^2 sum_{u<v} V'_{o_v}(theta) V_{o_u}(theta): the second-order gap T_small - T_large.

    Each split's Jacobian multiplies the fields of the splits applied before it.

    Raises:
        CapabilityError: If the model cannot form Hessian-vector products.
    """
    theta = as_param_vector(theta)
    order = _check_order(order, len(splits))
    grads = _split_gradients(model, splits, theta)
    term = np.zeros_like(theta)
    earlier = np.zeros_like(theta)
    for o in order:
        # V'_o V_earlier = hess_o grad_earlier
        term += model.subset_hvp(np.asarray(splits[o], dtype=np.intp), theta, earlier)
        earlier += grads[o]
    return h_small * h_small * term


def permutation_average_update_exact(
        model: BatchLossModel,
        splits: Sequence[Sequence[int]],
        theta,
        h_small: float,
    ) -> ParamVector:
    """
    Mean of sequential_small_batch_update over all c! orders.

    Raises:
        ResourceGuardError: If c exceeds the enumeration cap of 8.
    """
    c = len(splits)
    if c > MAX_ENUMERATED_SPLITS:
        raise ResourceGuardError(
            f"Enumerating {c}! orders exceeds the cap of {MAX_ENUMERATED_SPLITS} splits"
        )
    theta = as_param_vector(theta)
    total = np.zeros_like(theta)
    count = 0
    for order in itertools.permutations(range(c)):
        total += sequential_small_batch_update(model, splits, theta, h_small, order)
        count += 1
    return total / count


def order_average_term(model: BatchLossModel, splits: Sequence[Sequence[int]], theta) -> ParamVector:
    """
    sum_{i != j} V'_i(theta) V_j(theta), computed as sum_i hess_i (G - grad_i) with G = sum_j grad_j.
    """
    theta = as_param_vector(theta)
    grads = _split_gradients(model, splits, theta)
    total_grad = np.sum(grads, axis=0)
    term = np.zeros_like(theta)
    for split, grad in zip(splits, grads):
        term += model.subset_hvp(np.asarray(split, dtype=np.intp), theta, total_grad - grad)
    return term


def order_average_regularized_update(
        model: BatchLossModel,
        batch: Sequence[int],
        theta,
        h: float,
        lambda_: float,
        c: int,
        seed: int,
        index: int = 0,
    ) -> ParamVector:
    """
    T_large(theta) + lambda sum_{i != j} V'_i V_j(theta) over a seeded c-way split of `batch`.

    With lambda = (h/c)^2 / 2 this agrees with the exact permutation average to O(h'^3).

    Raises:
        ConfigurationError: If lambda < 0 or the batch does not split evenly.
    """
    if lambda_ < 0.0:
        raise ConfigurationError("lambda must be non-negative", fields=["order_average.lambda"])
    theta = as_param_vector(theta)
    large = large_batch_update(model, batch, theta, h)
    if lambda_ == 0.0:
        return large
    splits = split_batch(batch, c, seed, index)
    return large + lambda_ * order_average_term(model, splits, theta)


def lambda_values(h: float, absolute: float | None = None, scales: Sequence[float] = ()) -> list[float]:
    """
    Regularizer weights: `absolute` if given, then every scale * h^2.

    Raises:
        ConfigurationError: If neither is supplied or a value is negative.
    """
    values = ([absolute] if absolute is not None else []) + [s * h * h for s in scales]
    if not values:
        raise ConfigurationError("Give lambda or lambda_scales", fields=["order_average"])
    if any(v < 0.0 for v in values):
        raise ConfigurationError("lambda must be non-negative", fields=["order_average"])
    return values


def order_average_mode_tag(lambda_: float) -> str:
    return f"order-average(λ={lambda_:g})"


def order_average_sequence(
        model: BatchLossModel,
        h: float,
        c: int,
        lambda_: float,
        seed: int = 0,
        length: int | None = None,
    ) -> OperatorSequence:
    """
    Training stream whose step i applies order_average_regularized_update to a
    batch sampled uniformly with replacement, split with counter offset i.
    """
    _check_rate(h)
    if lambda_ < 0.0:
        raise ConfigurationError("lambda must be non-negative", fields=["order_average.lambda"])

    def generator(step: int, s: int) -> UpdateOperator:
        batch = model.batches[batch_choice(model, s, step)]
        if batch.size % c != 0:
            raise ConfigurationError(
                f"Batch of size {batch.size} cannot be split into {c} equal parts",
                fields=["batch_size", "order_average.c"],
            )

        def apply(theta: ParamVector) -> ParamVector:
            return order_average_regularized_update(model, batch, theta, h, lambda_, c, s, index=step)

        def field(theta: ParamVector) -> ParamVector:
            return (apply(theta) - theta) / h if h > 0.0 else -model.subset_gradient(batch, theta)

        return UpdateOperator(step, h, apply, field, name=order_average_mode_tag(lambda_))

    return OperatorSequence(generator, seed, length)
