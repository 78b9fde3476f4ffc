"""
services.operator_core

Update operators and the trajectory engines that compose them.

An update operator is one step map T_i(theta) = theta + h * V_i(theta). A seeded
OperatorSequence regenerates T_i on demand from (i, seed), which lets the
backward engines replay T_1 T_2 ... T_m(theta) from the start point at every
step without storing per-step state.

Engines:

- apply_forward:                theta_m = T_m(theta_{m-1})
- apply_backward_naive:         theta_m = T_1 T_2 ... T_m(theta_0)
- apply_intermittent_backward:  backward replays re-anchored at reset steps
- apply_backward_after:         forward up to a switch step, backward afterwards

Steps and operator indices are 1-based; step 0 is the initial point.
"""
import bisect
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import numpy.typing as npt

from services.errors import CapabilityError, ConfigurationError, DivergenceError

logger = logging.getLogger(__name__)

ParamVector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
VectorMap = Callable[[ParamVector], ParamVector]
Losses = tuple[float | None, float | None]
Evaluator = Callable[[ParamVector], Losses]


def as_param_vector(values) -> ParamVector:
    """
    Build a finite, one-dimensional float64 parameter vector.

    Args:
        values: Scalar or sequence of reals.

    Returns:
        numpy.ndarray: A fresh 1-D float64 array.

    Raises:
        ConfigurationError: If the input is empty, not 1-D, or not finite.
    """
    vec = np.array(values, dtype=np.float64, ndmin=1)
    if vec.ndim != 1 or vec.size == 0:
        raise ConfigurationError("A parameter vector must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(vec)):
        raise ConfigurationError("Parameter vector entries must be finite")
    return vec


def distance(a: ParamVector, b: ParamVector) -> float:
    """Euclidean distance between two parameter vectors."""
    return float(np.linalg.norm(np.subtract(a, b)))


class TrajectoryMode(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    INTERMITTENT = "intermittent-backward"
    BACKWARD_AFTER = "backward-after-switch"
    APPROX_BACKWARD = "approx-backward"


@dataclass(frozen=True)
class UpdateOperator:
    """
    One step map T_i with optional access to its vector field and field Jacobian.

    `apply` must return a new array and never mutate its argument.

    Attributes:
        index (int): Batch / step index i (1-based).
        learning_rate (float): Step size h.
        apply (Callable): theta -> T_i(theta).
        field (Callable | None): theta -> V_i(theta).
        field_jacobian (Callable | None): theta -> V_i'(theta), a (d, d) matrix.
        name (str): Label used in error messages.
    """
    index: int
    learning_rate: float
    apply: VectorMap
    field: VectorMap | None = None
    field_jacobian: Callable[[ParamVector], Matrix] | None = None
    name: str = "operator"

    def __post_init__(self):
        if self.field_jacobian is not None and self.field is None:
            raise ConfigurationError(
                f"Operator {self.name} has a field Jacobian but no field",
                fields=["field"],
            )

    def __call__(self, theta: ParamVector) -> ParamVector:
        return self.apply(theta)

    @classmethod
    def from_field(
            cls,
            index: int,
            learning_rate: float,
            field: VectorMap,
            field_jacobian: Callable[[ParamVector], Matrix] | None = None,
            name: str = "operator",
        ) -> "UpdateOperator":
        """
        Build the operator theta -> theta + h * field(theta).

        Args:
            index (int): Batch / step index.
            learning_rate (float): Step size h.
            field (Callable): Vector field V.
            field_jacobian (Callable | None): Jacobian of V.
            name (str): Operator label.

        Returns:
            UpdateOperator: The explicit Euler step of the field.
        """
        h = learning_rate

        def apply(theta: ParamVector) -> ParamVector:
            return theta + h * field(theta)

        return cls(
            index=index,
            learning_rate=h,
            apply=apply,
            field=field,
            field_jacobian=field_jacobian,
            name=name,
        )

    def require_jacobian(self) -> tuple[VectorMap, Callable[[ParamVector], Matrix]]:
        """
        Return (field, field_jacobian) or fail.

        Raises:
            CapabilityError: If either is missing.
        """
        if self.field is None or self.field_jacobian is None:
            raise CapabilityError(
                f"Operator {self.name} (index {self.index}) does not provide a field Jacobian"
            )
        return self.field, self.field_jacobian


@dataclass(frozen=True)
class OperatorSequence:
    """
    Deterministic, seeded stream T_1, T_2, ... of update operators.

    Attributes:
        generator (Callable): (index, seed) -> UpdateOperator; must be pure.
        seed (int): Sequence seed.
        length (int | None): Number of operators, or None for an unbounded stream.
    """
    generator: Callable[[int, int], UpdateOperator]
    seed: int
    length: int | None = None

    def operator(self, index: int) -> UpdateOperator:
        """
        Regenerate T_index.

        Raises:
            ConfigurationError: If the index is outside [1, length].
        """
        if index < 1 or (self.length is not None and index > self.length):
            raise ConfigurationError(
                f"Operator index {index} is outside [1, {self.length}]", fields=["steps"]
            )
        return self.generator(index, self.seed)

    def __getitem__(self, index: int) -> UpdateOperator:
        return self.operator(index)

    def with_seed(self, seed: int) -> "OperatorSequence":
        """Same family, different seed."""
        return replace(self, seed=seed)

    def check_steps(self, n: int) -> None:
        """
        Validate a requested step count.

        Raises:
            ConfigurationError: If n is negative or exceeds the sequence length.
        """
        if n < 0:
            raise ConfigurationError("Step count must be non-negative", fields=["steps"])
        if self.length is not None and n > self.length:
            raise ConfigurationError(
                f"Requested {n} steps from a sequence of length {self.length}",
                fields=["steps"],
            )


@dataclass
class TrajectoryRecord:
    step: int
    iterate: ParamVector
    train_loss: float | None = None
    test_loss: float | None = None
    step_displacement: float = 0.0


@dataclass
class Trajectory:
    """
    Per-step record of iterates under a named iteration mode.

    Records are dense: `records[m]` holds step m.

    Attributes:
        mode (str): Iteration mode tag.
        seed (int): Seed of the operator sequence.
        records (list[TrajectoryRecord]): Step 0..n.
        anchor_steps (list[int]): Reset / switch points.
    """
    mode: str
    seed: int
    records: list[TrajectoryRecord] = field(default_factory=list)
    anchor_steps: list[int] = field(default_factory=list)

    def append(self, step: int, iterate: ParamVector, losses: Losses = (None, None)) -> TrajectoryRecord:
        """
        Append the iterate for `step`, computing its step displacement.

        Raises:
            ConfigurationError: If steps are not strictly increasing from 0.
        """
        if self.records:
            previous = self.records[-1]
            if step <= previous.step:
                raise ConfigurationError(f"Step {step} does not follow step {previous.step}")
            displacement = distance(iterate, previous.iterate)
        else:
            if step != 0:
                raise ConfigurationError("A trajectory starts at step 0")
            displacement = 0.0
        record = TrajectoryRecord(step, iterate, losses[0], losses[1], displacement)
        self.records.append(record)
        return record

    @property
    def steps(self) -> int:
        return self.records[-1].step if self.records else 0

    @property
    def terminal(self) -> ParamVector:
        return self.records[-1].iterate

    def iterate(self, step: int) -> ParamVector:
        return self.records[step].iterate

    def iterates(self) -> npt.NDArray[np.float64]:
        """All iterates stacked into an (n + 1, d) array."""
        return np.vstack([r.iterate for r in self.records])


def _losses(evaluate: Evaluator | None, theta: ParamVector, step: int, eval_every: int) -> Losses:
    if evaluate is None or step % eval_every != 0:
        return (None, None)
    return evaluate(theta)


def _apply_checked(op: UpdateOperator, theta: ParamVector, step: int) -> ParamVector:
    out = op.apply(theta)
    if np.shape(out) != theta.shape:
        raise ConfigurationError(
            f"Operator {op.name} returned shape {np.shape(out)} for a start of shape {theta.shape}",
            fields=["start"],
        )
    if not np.all(np.isfinite(out)):
        raise DivergenceError(step=step, last_iterate=theta)
    return out


def _replay(seq: OperatorSequence, theta: ParamVector, first: int, last: int, step: int) -> ParamVector:
    # T_first T_{first+1} ... T_last(theta): T_last is applied first.
    for j in range(last, first - 1, -1):
        theta = _apply_checked(seq.operator(j), theta, step)
    return theta


def _run(
        seq: OperatorSequence,
        start,
        n: int,
        mode: str,
        anchor_for: Callable[[int], int | None],
        anchor_steps: Sequence[int] = (),
        evaluate: Evaluator | None = None,
        eval_every: int = 1,
    ) -> Trajectory:
    theta0 = as_param_vector(start)
    seq.check_steps(n)
    if eval_every < 1:
        raise ConfigurationError("eval_every must be at least 1", fields=["eval_every"])

    traj = Trajectory(mode=mode, seed=seq.seed, anchor_steps=list(anchor_steps))
    traj.append(0, theta0, _losses(evaluate, theta0, 0, eval_every))
    try:
        for m in range(1, n + 1):
            anchor = anchor_for(m)
            if anchor is None:
                iterate = _apply_checked(seq.operator(m), traj.records[m - 1].iterate, m)
            else:
                iterate = _replay(seq, traj.records[anchor].iterate, anchor + 1, m, m)
            traj.append(m, iterate, _losses(evaluate, iterate, m, eval_every))
    except DivergenceError as exc:
        exc.trajectory = traj
        logger.warning("%s trajectory diverged at step %d (seed %d)", mode, exc.step, seq.seed)
        raise
    return traj


def apply_forward(
        seq: OperatorSequence,
        start,
        n: int,
        evaluate: Evaluator | None = None,
        eval_every: int = 1,
    ) -> Trajectory:
    """
    Forward trajectory theta, T_1(theta), T_2 T_1(theta), ..., T_n ... T_1(theta).

    Args:
        seq (OperatorSequence): Operator stream.
        start: Initial point.
        n (int): Number of steps (n operator applications).
        evaluate (Callable | None): theta -> (train_loss, test_loss).
        eval_every (int): Loss-evaluation stride.

    Returns:
        Trajectory: Records for steps 0..n.

    Raises:
        ConfigurationError: On a dimension mismatch or invalid step count.
        DivergenceError: On a non-finite iterate; carries the failing step.
    """
    return _run(seq, start, n, TrajectoryMode.FORWARD.value, lambda m: None,
                evaluate=evaluate, eval_every=eval_every)


def apply_backward_naive(
        seq: OperatorSequence,
        start,
        n: int,
        evaluate: Evaluator | None = None,
        eval_every: int = 1,
    ) -> Trajectory:
    """
    Backward trajectory theta, T_1(theta), T_1 T_2(theta), ..., T_1 ... T_n(theta).

    Each step replays from the start point with T_m applied first, regenerating
    operators from the seeded sequence: n(n + 1) / 2 applications in total and
    O(d) working memory for the replay.

    Raises:
        ConfigurationError: On a dimension mismatch or invalid step count.
        DivergenceError: On a non-finite iterate.
    """
    return _run(seq, start, n, TrajectoryMode.BACKWARD.value, lambda m: 0,
                evaluate=evaluate, eval_every=eval_every)


def _validate_resets(resets: Sequence[int], n: int) -> list[int]:
    resets = [int(r) for r in resets]
    if any(b <= a for a, b in zip(resets, resets[1:])):
        raise ConfigurationError("Reset steps must be strictly increasing", fields=["resets"])
    if resets and (resets[0] < 1 or resets[-1] > n):
        raise ConfigurationError(f"Reset steps must lie in [1, {n}]", fields=["resets"])
    return resets


def apply_intermittent_backward(
        seq: OperatorSequence,
        start,
        n: int,
        resets: Sequence[int],
        evaluate: Evaluator | None = None,
        eval_every: int = 1,
    ) -> Trajectory:
    """
    Backward trajectory whose replay anchor moves to the current iterate at each reset.

    With r the largest reset strictly below m (0 if none), the iterate at step m is
    T_{r+1} ... T_m(theta_r), theta_r being this trajectory's own iterate at step r.
    A reset at r therefore re-anchors steps r + 1 onwards.

    Raises:
        ConfigurationError: On unsorted or out-of-range resets, or as apply_forward.
        DivergenceError: On a non-finite iterate.
    """
    seq.check_steps(n)
    anchors = _validate_resets(resets, n)

    def anchor_for(m: int) -> int:
        position = bisect.bisect_left(anchors, m)
        return anchors[position - 1] if position > 0 else 0

    return _run(seq, start, n, TrajectoryMode.INTERMITTENT.value, anchor_for, anchors,
                evaluate=evaluate, eval_every=eval_every)


def apply_backward_after(
        seq: OperatorSequence,
        start,
        n: int,
        switch_step: int,
        evaluate: Evaluator | None = None,
        eval_every: int = 1,
    ) -> Trajectory:
    """
    Forward iteration up to `switch_step`, backward replays anchored there afterwards.

    Raises:
        ConfigurationError: If switch_step is outside [0, n], or as apply_forward.
        DivergenceError: On a non-finite iterate.
    """
    seq.check_steps(n)
    s = int(switch_step)
    if s < 0 or s > n:
        raise ConfigurationError(f"switch_step must lie in [0, {n}]", fields=["switch_step"])

    def anchor_for(m: int) -> int | None:
        return None if m <= s else s

    return _run(seq, start, n, TrajectoryMode.BACKWARD_AFTER.value, anchor_for, [s],
                evaluate=evaluate, eval_every=eval_every)


def backward_iterate(seq: OperatorSequence, start, m: int) -> ParamVector:
    """
    T_1 T_2 ... T_m(start) by a single replay of m applications.

    Raises:
        DivergenceError: On a non-finite intermediate value.
    """
    theta0 = as_param_vector(start)
    seq.check_steps(m)
    return _replay(seq, theta0, 1, m, m)


def forward_iterate(seq: OperatorSequence, start, m: int) -> ParamVector:
    """T_m ... T_1(start) without recording intermediate steps."""
    theta = as_param_vector(start)
    seq.check_steps(m)
    for j in range(1, m + 1):
        theta = _apply_checked(seq.operator(j), theta, j)
    return theta


def step_displacement_series(traj: Trajectory) -> list[float]:
    """
    Distances ||theta_m - theta_{m-1}|| for m = 1..n.

    Args:
        traj (Trajectory): A trajectory with at least one record.

    Returns:
        list[float]: One entry per step.
    """
    return [record.step_displacement for record in traj.records[1:]]


def distance_to_window_limit(traj: Trajectory) -> list[float]:
    """
    Distance of every iterate to the terminal iterate of its anchor window.

    Windows end at each anchor step and at the last step; the iterate at an
    anchor step belongs to the window it closes.

    Returns:
        list[float]: One entry per record, step 0 included.
    """
    ends = sorted(set(s for s in traj.anchor_steps if 0 < s < traj.steps)) + [traj.steps]
    out = []
    for record in traj.records:
        end = ends[bisect.bisect_left(ends, record.step)]
        out.append(distance(record.iterate, traj.iterate(end)))
    return out
