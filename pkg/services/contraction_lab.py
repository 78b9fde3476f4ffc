"""
services.contraction_lab

Contraction factors of update operators, the displacement condition
d(theta, T_i(theta)) < D, and exponential-rate fits of converging trajectories.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from services.errors import ConfigurationError, InsufficientDataError, PreconditionError
from services.model_zoo import BatchLossModel, sgd_operator, symmetric_matrix
from services.operator_core import (
    OperatorSequence,
    ParamVector,
    Trajectory,
    UpdateOperator,
    as_param_vector,
    distance,
)
from utils import rng

logger = logging.getLogger(__name__)

RATE_FIT_FLOOR = 1e-12
MIN_RATE_POINTS = 5
SETTLED_RATIO = 0.5
# Sampled pairs closer than this fraction of the radius are drawn again.
MIN_PAIR_SEPARATION = 1e-3


def _eigenvalues(H) -> np.ndarray:
    return np.linalg.eigvalsh(symmetric_matrix(H))


def gd_operator_norm_factor(H, h: float) -> float:
    """
    Operator-norm contraction factor of theta -> theta - hH theta.

    Returns:
        float: max_i |1 - h lambda_i| over the eigenvalues of H.
    """
    return float(np.max(np.abs(1.0 - h * _eigenvalues(H))))


def critical_learning_rate(H) -> float:
    """
    2 / lambda_max(H): gradient descent on H contracts iff 0 < h < this value.

    Raises:
        ConfigurationError: If H is not positive definite.
    """
    eigenvalues = _eigenvalues(H)
    if eigenvalues[0] <= 0.0:
        raise ConfigurationError("Matrix must be positive definite", fields=["hessian"])
    return 2.0 / float(eigenvalues[-1])


def _check_constants(m: float, M: float) -> None:
    if m <= 0.0 or m > M:
        raise ConfigurationError("Convexity constants must satisfy 0 < m <= M", fields=["m", "M"])


def strict_convexity_factor(h: float, m: float, M: float) -> float:
    """
    sqrt(1 - 2hm + h^2 M^2): the contraction factor of an SGD step on an
    m-strongly convex loss with M-Lipschitz gradient.

    Args:
        h (float): Learning rate, non-negative.
        m (float): Strong-convexity constant.
        M (float): Gradient Lipschitz constant.

    Returns:
        float: The factor; below 1 exactly when 0 < h < 2m / M^2.

    Raises:
        ConfigurationError: If m <= 0, m > M, or h < 0.
    """
    _check_constants(m, M)
    if h < 0.0:
        raise ConfigurationError("Learning rate must be non-negative", fields=["learning_rate"])
    return math.sqrt(max(0.0, 1.0 - 2.0 * h * m + h * h * M * M))


def contraction_threshold(m: float, M: float) -> float:
    """Largest rate 2m / M^2 for which strict_convexity_factor is below 1."""
    _check_constants(m, M)
    return 2.0 * m / (M * M)


def _ball_point(seed: int, center: ParamVector, radius: float, counter: int) -> ParamVector:
    d = center.size
    direction = rng.gaussian_array(seed, "contraction-direction", np.arange(counter * d, (counter + 1) * d))
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        return center.copy()
    r = radius * rng.uniform(seed, "contraction-radius", counter) ** (1.0 / d)
    return center + (r / norm) * direction


def empirical_contraction_estimate(
        op: UpdateOperator,
        center,
        radius: float,
        n_pairs: int,
        seed: int = 0,
    ) -> float:
    """
    Largest observed ratio d(T(a), T(b)) / d(a, b) over pairs sampled uniformly in a ball.

    Args:
        op (UpdateOperator): Operator under test.
        center: Ball center.
        radius (float): Ball radius, positive.
        n_pairs (int): Number of accepted pairs.
        seed (int): Sampling seed.

    Returns:
        float: A lower bound on the Lipschitz constant of `op` over the ball.

    Raises:
        ConfigurationError: If n_pairs < 1 or radius <= 0.
    """
    if n_pairs < 1:
        raise ConfigurationError("n_pairs must be at least 1", fields=["n_pairs"])
    if not radius > 0.0:
        raise ConfigurationError("radius must be positive", fields=["contraction_radius"])
    center = as_param_vector(center)
    best = 0.0
    accepted = 0
    counter = 0
    while accepted < n_pairs:
        a = _ball_point(seed, center, radius, counter)
        b = _ball_point(seed, center, radius, counter + 1)
        counter += 2
        gap = distance(a, b)
        if gap <= MIN_PAIR_SEPARATION * radius:
            continue
        best = max(best, distance(op(a), op(b)) / gap)
        accepted += 1
    return best


class DisplacementCheck(NamedTuple):
    max_displacement: float
    holds: bool


def displacement_bound_check(
        seq: OperatorSequence,
        anchor,
        steps: int,
        bound: float = math.inf,
    ) -> DisplacementCheck:
    """
    max_{i <= steps} d(anchor, T_i(anchor)) and whether it stays strictly below `bound`.

    Raises:
        ConfigurationError: If steps < 1.
    """
    if steps < 1:
        raise ConfigurationError("steps must be at least 1", fields=["steps"])
    seq.check_steps(steps)
    anchor = as_param_vector(anchor)
    largest = max(distance(anchor, seq.operator(i)(anchor)) for i in range(1, steps + 1))
    return DisplacementCheck(largest, largest < bound)


class RateFit(NamedTuple):
    slope: float
    intercept: float
    residual: float


def exponential_rate_fit(traj: Trajectory, limit, floor: float = RATE_FIT_FLOOR) -> RateFit:
    """
    Least-squares fit of log d(theta_m, limit) = intercept + slope * m.

    Only steps whose distance exceeds `floor` enter the fit. The slope estimates
    log k and exp(intercept) the constant C.

    Returns:
        RateFit: (slope, intercept, root-mean-square residual).

    Raises:
        InsufficientDataError: With fewer than five usable points.
        PreconditionError: If the trajectory has not settled: the mean step
            displacement over its last quarter is not below half that of its
            first quarter.
    """
    limit = as_param_vector(limit)
    steps, logs = [], []
    for record in traj.records:
        d = distance(record.iterate, limit)
        if d > floor:
            steps.append(record.step)
            logs.append(math.log(d))
    if len(steps) < MIN_RATE_POINTS:
        raise InsufficientDataError(
            f"Rate fit needs at least {MIN_RATE_POINTS} points above {floor:g}, found {len(steps)}"
        )
    displacements = np.array([record.step_displacement for record in traj.records[1:]])
    quarter = max(1, displacements.size // 4)
    head, tail = float(np.mean(displacements[:quarter])), float(np.mean(displacements[-quarter:]))
    if not tail < SETTLED_RATIO * head:
        raise PreconditionError(
            f"Rate fit needs a settling trajectory; mean step displacement went from "
            f"{head:.3g} to {tail:.3g}"
        )
    design = np.column_stack([np.asarray(steps, dtype=np.float64), np.ones(len(steps))])
    y = np.asarray(logs)
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.sqrt(np.mean((design @ np.array([slope, intercept]) - y) ** 2)))
    return RateFit(float(slope), float(intercept), residual)


def cauchy_bound(D: float, k: float, n: int) -> float:
    """D k^n / (1 - k): bound on the distance from step n to the backward limit."""
    if not 0.0 <= k < 1.0:
        raise ConfigurationError("Contraction factor must lie in [0, 1)", fields=["k"])
    return D * k ** n / (1.0 - k)


def limit_bound_holds(traj: Trajectory, limit, D: float, k: float, slack: float = 1e-12) -> bool:
    """True when d(theta_m, limit) <= D k^m / (1 - k) + slack at every step."""
    limit = as_param_vector(limit)
    for record in traj.records:
        if distance(record.iterate, limit) > cauchy_bound(D, k, record.step) + slack:
            logger.info("Convergence bound violated at step %d", record.step)
            return False
    return True


def operator_difference_identity(
        model: BatchLossModel,
        i: int,
        h: float,
        theta1,
        theta2,
    ) -> tuple[float, float]:
    """
    Both sides of the expanded square
    ||T(a) - T(b)||^2 = ||a - b||^2 - 2h <g(a) - g(b), a - b> + h^2 ||g(a) - g(b)||^2
    for the SGD step on batch i.

    Returns:
        tuple[float, float]: (left side, right side).
    """
    a = as_param_vector(theta1)
    b = as_param_vector(theta2)
    op = sgd_operator(model, i, h)
    lhs = float(np.sum((op(a) - op(b)) ** 2))
    delta = a - b
    grad_gap = model.gradient(i, a) - model.gradient(i, b)
    rhs = float(delta @ delta - 2.0 * h * (grad_gap @ delta) + h * h * (grad_gap @ grad_gap))
    return lhs, rhs


@dataclass
class ContractionReport:
    """
    Contraction summary of one seeded run.

    Attributes:
        analytic_factor (float | None): Known factor k, if any.
        empirical_factor (float): Sampled estimate of k.
        displacement_bound (float): max_i d(anchor, T_i(anchor)).
        anchor (list[float]): Point used for the displacement check.
        rate_slope (float | None): Fitted log-distance slope.
        rate_constant (float | None): exp(intercept) of the fit.
        rate_residual (float | None): RMS residual of the fit.
        passed (bool): empirical_factor < 1 and a finite displacement bound.
    """
    analytic_factor: float | None
    empirical_factor: float
    displacement_bound: float
    anchor: list[float]
    rate_slope: float | None
    rate_constant: float | None
    rate_residual: float | None
    passed: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pass"] = out.pop("passed")
        return out


def contraction_report(
        seq: OperatorSequence,
        traj: Trajectory,
        radius: float = 1.0,
        n_pairs: int = 200,
        analytic_factor: float | None = None,
        operator_indices: Sequence[int] | None = None,
        seed: int = 0,
    ) -> ContractionReport:
    """
    Build a ContractionReport for a (backward) trajectory.

    The anchor point is the trajectory start; the empirical factor is the largest
    estimate over `operator_indices` (default the first ten operators); the rate
    fit uses the terminal iterate as the limit.

    Args:
        seq (OperatorSequence): Operators the trajectory was built from.
        traj (Trajectory): Trajectory with at least one step.
        radius (float): Sampling ball radius around the anchor.
        n_pairs (int): Pairs per operator.
        analytic_factor (float | None): Known factor, reported as-is.
        operator_indices (Sequence[int] | None): Operators to sample.
        seed (int): Sampling seed.

    Returns:
        ContractionReport: The report.
    """
    n = traj.steps
    anchor = traj.iterate(0)
    indices = list(operator_indices) if operator_indices is not None else list(range(1, min(n, 10) + 1))
    empirical = max(
        (empirical_contraction_estimate(seq.operator(i), anchor, radius, n_pairs, seed) for i in indices),
        default=0.0,
    )
    check = displacement_bound_check(seq, anchor, n)
    try:
        fit = exponential_rate_fit(traj, traj.terminal)
        slope, constant, residual = fit.slope, math.exp(fit.intercept), fit.residual
    except (InsufficientDataError, PreconditionError) as e:
        logger.info("No rate fit for seed %d: %s", traj.seed, e.message)
        slope = constant = residual = None
    return ContractionReport(
        analytic_factor=analytic_factor,
        empirical_factor=empirical,
        displacement_bound=check.max_displacement,
        anchor=[float(v) for v in anchor],
        rate_slope=slope,
        rate_constant=constant,
        rate_residual=residual,
        passed=bool(empirical < 1.0 and math.isfinite(check.max_displacement)),
    )
