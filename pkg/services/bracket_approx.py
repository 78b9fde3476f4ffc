"""
services.bracket_approx

Second-order composition expansions of update operators.

For T_i = 1 + h V_i the composition listed as T_{i_1} ... T_{i_k} (T_{i_k} applied
first) expands to

    theta + h sum_l V_{i_l} + h^2 sum_{u<v} V'_{i_u} V_{i_v} + O(h^3),

so backward and forward compositions differ by h^2 sum_{i<j} [V_i, V_j] with
[V, W] = V'W - W'V. The approximate backward iterate adds that correction,
evaluated at the start point, to the forward iterate; it can be computed by a
direct double sum or by a running recursion over (g, H, C).
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from services.errors import ConfigurationError, DivergenceError
from services.operator_core import (
    Evaluator,
    Matrix,
    OperatorSequence,
    ParamVector,
    Trajectory,
    TrajectoryMode,
    UpdateOperator,
    as_param_vector,
    backward_iterate,
    distance,
    forward_iterate,
)

logger = logging.getLogger(__name__)

ERROR_FLOOR = 1e-13


def lie_bracket(op_i: UpdateOperator, op_j: UpdateOperator, theta) -> ParamVector:
    """
    [V_i, V_j](theta) = V_i'(theta) V_j(theta) - V_j'(theta) V_i(theta).

    Raises:
        CapabilityError: If either operator lacks a field Jacobian; the message names it.
    """
    theta = as_param_vector(theta)
    field_i, jac_i = op_i.require_jacobian()
    field_j, jac_j = op_j.require_jacobian()
    return jac_i(theta) @ field_j(theta) - jac_j(theta) @ field_i(theta)


def _shared_rate(ops: Sequence[UpdateOperator]) -> float:
    rates = {op.learning_rate for op in ops}
    if len(rates) > 1:
        raise ConfigurationError(
            f"Operators use different learning rates: {sorted(rates)}", fields=["learning_rate"]
        )
    return rates.pop()


def _fields_and_jacobians(ops: Sequence[UpdateOperator], theta: ParamVector):
    fields, jacobians = [], []
    for op in ops:
        field, jac = op.require_jacobian()
        fields.append(field(theta))
        jacobians.append(jac(theta))
    return fields, jacobians


def second_order_expansion(ops: Sequence[UpdateOperator], theta) -> ParamVector:
    """
    Truncated expansion of the composition ops[0] ops[1] ... ops[-1] (last applied first).

    The h^2 term pairs the Jacobian of each operator with the fields of the
    operators listed after it.

    Raises:
        ConfigurationError: If the operators do not share one learning rate.
        CapabilityError: If an operator lacks a Jacobian.
    """
    theta = as_param_vector(theta)
    if not ops:
        return theta
    h = _shared_rate(ops)
    fields, jacobians = _fields_and_jacobians(ops, theta)
    correction = np.zeros_like(theta)
    later = np.zeros_like(theta)
    for field, jac in zip(reversed(fields), reversed(jacobians)):
        correction += jac @ later
        later += field
    return theta + h * later + h * h * correction


def bracket_sum(ops: Sequence[UpdateOperator], theta) -> ParamVector:
    """sum_{i<j} [V_i, V_j](theta) over the listed operators."""
    theta = as_param_vector(theta)
    fields, jacobians = _fields_and_jacobians(ops, theta)
    total = np.zeros_like(theta)
    earlier_fields = np.zeros_like(theta)
    earlier_jac = np.zeros((theta.size, theta.size))
    for field, jac in zip(fields, jacobians):
        # [V_i, V_j] summed over i < j for this j.
        total += earlier_jac @ field - jac @ earlier_fields
        earlier_fields += field
        earlier_jac += jac
    return total


def forward_backward_difference(seq: OperatorSequence, theta, n: int) -> tuple[ParamVector, ParamVector]:
    """
    Exact T_1...T_n(theta) - T_n...T_1(theta) and its bracket prediction h^2 sum_{i<j} [V_i, V_j](theta).

    Raises:
        ConfigurationError: If n < 2 or the rates differ.
        CapabilityError: If a Jacobian is missing.
    """
    if n < 2:
        raise ConfigurationError("The difference needs at least two operators", fields=["steps"])
    theta = as_param_vector(theta)
    ops = [seq.operator(i) for i in range(1, n + 1)]
    h = _shared_rate(ops)
    exact = backward_iterate(seq, theta, n) - forward_iterate(seq, theta, n)
    return exact, h * h * bracket_sum(ops, theta)


def _loss_derivatives(op: UpdateOperator, theta0: ParamVector) -> tuple[ParamVector, Matrix]:
    # grad L = -V, hess L = -V'
    field, jac = op.require_jacobian()
    return -field(theta0), -jac(theta0)


def approx_backward_direct(seq: OperatorSequence, start, n: int) -> ParamVector:
    """
    theta_n (forward) + h^2 sum_{1<=i<j<=n} [grad L_i, grad L_j](theta_0), by the explicit double sum.

    Raises:
        CapabilityError: If an operator lacks a Hessian.
        DivergenceError: If the forward iterate is not finite.
    """
    theta0 = as_param_vector(start)
    if n == 0:
        return theta0
    ops = [seq.operator(i) for i in range(1, n + 1)]
    h = _shared_rate(ops)
    derivs = [_loss_derivatives(op, theta0) for op in ops]
    correction = np.zeros_like(theta0)
    for i in range(n):
        g_i, H_i = derivs[i]
        for j in range(i + 1, n):
            g_j, H_j = derivs[j]
            correction += H_i @ g_j - H_j @ g_i
    return forward_iterate(seq, theta0, n) + h * h * correction


@dataclass
class ApproxBackwardState:
    """
    Running sums of the approximate backward recursion.

    Attributes:
        g (numpy.ndarray): sum_{i<n} grad L_i(theta_0).
        H (numpy.ndarray): sum_{i<n} hess L_i(theta_0).
        C (numpy.ndarray): sum_{i<j<=n} [grad L_i, grad L_j](theta_0).
        base_point (numpy.ndarray): theta_0.
        step (int): n.
        theta (numpy.ndarray): Forward iterate theta_n.
    """
    g: ParamVector
    H: Matrix
    C: ParamVector
    base_point: ParamVector
    step: int
    theta: ParamVector


class ApproxBackwardRecursion:
    """
    Streams theta~_n = theta_n + h^2 C_n one step at a time:

        theta_n = T_n(theta_{n-1})
        g_n = g_{n-1} + grad L_{n-1}(theta_0)
        H_n = H_{n-1} + hess L_{n-1}(theta_0)
        C_n = C_{n-1} + H_n grad L_n(theta_0) - hess L_n(theta_0) g_n

    with g_1 = 0, H_1 = 0, C_1 = 0.
    """

    def __init__(self, seq: OperatorSequence, start):
        theta0 = as_param_vector(start)
        d = theta0.size
        self.seq = seq
        self.learning_rate: float | None = None
        self.state = ApproxBackwardState(
            g=np.zeros(d), H=np.zeros((d, d)), C=np.zeros(d), base_point=theta0, step=0, theta=theta0
        )
        self._previous: tuple[ParamVector, Matrix] | None = None

    @property
    def approx_iterate(self) -> ParamVector:
        h = self.learning_rate or 0.0
        return self.state.theta + h * h * self.state.C

    def step(self) -> ParamVector:
        """
        Advance to the next step and return theta~_n.

        Raises:
            ConfigurationError: If the operator's rate differs from earlier ones.
            CapabilityError: If the operator lacks a Hessian.
            DivergenceError: If the forward iterate is not finite.
        """
        s = self.state
        n = s.step + 1
        op = self.seq.operator(n)
        if self.learning_rate is None:
            self.learning_rate = op.learning_rate
        elif op.learning_rate != self.learning_rate:
            raise ConfigurationError(
                f"Operator {n} has rate {op.learning_rate}, expected {self.learning_rate}",
                fields=["learning_rate"],
            )
        theta = op(s.theta)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(step=n, last_iterate=s.theta)

        if self._previous is not None:
            s.g = s.g + self._previous[0]
            s.H = s.H + self._previous[1]
        grad_n, hess_n = _loss_derivatives(op, s.base_point)
        s.C = s.C + s.H @ grad_n - hess_n @ s.g
        self._previous = (grad_n, hess_n)
        s.theta = theta
        s.step = n
        return self.approx_iterate


def approx_backward_recursive(seq: OperatorSequence, start, n: int) -> tuple[ParamVector, ApproxBackwardState]:
    """
    theta~_n by the running recursion: one forward trajectory, O(n d^2) work.

    Returns:
        tuple: (theta~_n, final ApproxBackwardState).
    """
    seq.check_steps(n)
    recursion = ApproxBackwardRecursion(seq, start)
    result = recursion.state.base_point
    for _ in range(n):
        result = recursion.step()
    return result, recursion.state


def apply_approx_backward(
        seq: OperatorSequence,
        start,
        n: int,
        evaluate: Evaluator | None = None,
        eval_every: int = 1,
    ) -> Trajectory:
    """
    Trajectory of approximate backward iterates theta~_0 .. theta~_n.

    Raises:
        CapabilityError: If an operator lacks a Hessian.
        DivergenceError: On a non-finite iterate; carries the partial trajectory.
    """
    seq.check_steps(n)
    if eval_every < 1:
        raise ConfigurationError("eval_every must be at least 1", fields=["eval_every"])
    recursion = ApproxBackwardRecursion(seq, start)
    theta0 = recursion.state.base_point
    traj = Trajectory(mode=TrajectoryMode.APPROX_BACKWARD.value, seed=seq.seed)

    def losses(theta: ParamVector, m: int):
        return evaluate(theta) if evaluate is not None and m % eval_every == 0 else (None, None)

    traj.append(0, theta0, losses(theta0, 0))
    try:
        for m in range(1, n + 1):
            iterate = recursion.step()
            if not np.all(np.isfinite(iterate)):
                raise DivergenceError(step=m, last_iterate=traj.terminal)
            traj.append(m, iterate, losses(iterate, m))
    except DivergenceError as exc:
        exc.trajectory = traj
        logger.warning("approx-backward trajectory diverged at step %d (seed %d)", exc.step, seq.seed)
        raise
    return traj


class OrderCheckRow(NamedTuple):
    h: float
    error: float
    ratio: float | None


def order_check(
        build: Callable[[float], tuple[ParamVector, ParamVector]],
        hs: Sequence[float],
        floor: float = ERROR_FLOOR,
    ) -> list[OrderCheckRow]:
    """
    Empirical order of accuracy over a halving ladder of step sizes.

    Args:
        build (Callable): h -> (approximation, reference).
        hs (Sequence[float]): At least three values, each half the previous.
        floor (float): Errors below this are floating-point noise and are discarded.

    Returns:
        list[OrderCheckRow]: (h, error, error(h) / error(h/2)) for every kept h;
        the ratio is None for the last kept value or when h/2 was discarded.
        A method of order p has ratios approaching 2^p.

    Raises:
        ConfigurationError: If the ladder is too short or not halving.
    """
    hs = [float(h) for h in hs]
    if len(hs) < 3:
        raise ConfigurationError("An order check needs at least three step sizes", fields=["hs"])
    if any(not math.isclose(b, a / 2.0, rel_tol=1e-12) for a, b in zip(hs, hs[1:])):
        raise ConfigurationError("Each step size must be half the previous one", fields=["hs"])

    errors: list[float | None] = []
    for h in hs:
        approximation, reference = build(h)
        error = distance(approximation, reference)
        if error < floor:
            logger.warning("Discarding h=%g: error %.3e is below the floating-point floor", h, error)
            errors.append(None)
        else:
            errors.append(error)

    rows = []
    for k, (h, error) in enumerate(zip(hs, errors)):
        if error is None:
            continue
        following = errors[k + 1] if k + 1 < len(errors) else None
        rows.append(OrderCheckRow(h, error, error / following if following else None))
    return rows


def observed_orders(rows: Sequence[OrderCheckRow]) -> list[float]:
    """log2 of every available ratio."""
    return [math.log2(r.ratio) for r in rows if r.ratio]
