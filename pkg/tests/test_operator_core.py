"""
tests.test_operator_core

Unit tests for update operators and the trajectory engines in services.operator_core.

Covers:
- Forward and backward composition order
- Intermittent resets and the backward-after switch
- Application counts and the intermittent displacement shape on the quadratic
- Divergence reporting with the partial trajectory
- Capability and step-count errors
"""

import unittest

import numpy as np

from services.errors import CapabilityError, ConfigurationError, DivergenceError
from services.model_zoo import (
    NoiseKind,
    NoiseModel,
    full_batch_sequence,
    quadratic_noise_values,
    quadratic_sequence,
    random_least_squares,
)
from services.operator_core import (
    OperatorSequence,
    UpdateOperator,
    apply_backward_after,
    apply_backward_naive,
    apply_forward,
    apply_intermittent_backward,
    backward_iterate,
    distance_to_window_limit,
    forward_iterate,
    step_displacement_series,
)

H = 0.3


def affine_operator(index: int, seed: int) -> UpdateOperator:
    """T_i(theta) = theta + h * (c_i - theta) with a target depending on (i, seed)."""
    target = np.array([float(index + seed), -0.5 * index])
    return UpdateOperator.from_field(
        index, H,
        field=lambda theta: target - theta,
        field_jacobian=lambda theta: -np.eye(2),
        name=f"affine[{index}]",
    )


def affine_sequence(seed: int = 0, length: int | None = 50) -> OperatorSequence:
    return OperatorSequence(affine_operator, seed, length)


def compose(seq: OperatorSequence, indices, theta) -> np.ndarray:
    """Apply seq[i] for i in `indices`, left to right."""
    theta = np.asarray(theta, dtype=float)
    for i in indices:
        theta = seq[i](theta)
    return theta


class TestUpdateOperator(unittest.TestCase):

    def test_from_field_is_an_euler_step(self) -> None:
        op = affine_operator(2, 0)
        theta = np.array([1.0, 1.0])
        np.testing.assert_allclose(op(theta), theta + H * (np.array([2.0, -1.0]) - theta))

    def test_apply_does_not_mutate_argument(self) -> None:
        theta = np.array([1.0, 2.0])
        affine_operator(1, 0)(theta)
        np.testing.assert_array_equal(theta, [1.0, 2.0])

    def test_require_jacobian_without_one_raises(self) -> None:
        op = UpdateOperator(index=1, learning_rate=H, apply=lambda t: t * 0.5)
        with self.assertRaises(CapabilityError):
            op.require_jacobian()

    def test_jacobian_without_field_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            UpdateOperator(index=1, learning_rate=H, apply=lambda t: t, field_jacobian=lambda t: np.eye(1))


class TestOperatorSequence(unittest.TestCase):

    def test_regenerates_the_same_operator(self) -> None:
        seq = affine_sequence(seed=4)
        theta = np.array([0.3, -0.2])
        np.testing.assert_array_equal(seq.operator(7)(theta), seq.operator(7)(theta))

    def test_index_outside_length_raises(self) -> None:
        seq = affine_sequence(length=5)
        with self.assertRaises(ConfigurationError):
            seq.operator(6)
        with self.assertRaises(ConfigurationError):
            seq.operator(0)

    def test_with_seed(self) -> None:
        self.assertEqual(affine_sequence(seed=1).with_seed(9).seed, 9)


class TestEngines(unittest.TestCase):

    def setUp(self) -> None:
        self.seq = affine_sequence(seed=1)
        self.start = np.array([2.0, -3.0])

    def test_forward_applies_newest_operator_last(self) -> None:
        traj = apply_forward(self.seq, self.start, 6)
        for m in range(7):
            np.testing.assert_allclose(traj.iterate(m), compose(self.seq, range(1, m + 1), self.start))
        np.testing.assert_allclose(traj.terminal, forward_iterate(self.seq, self.start, 6))

    def test_backward_applies_newest_operator_first(self) -> None:
        traj = apply_backward_naive(self.seq, self.start, 6)
        for m in range(7):
            np.testing.assert_allclose(traj.iterate(m), compose(self.seq, range(m, 0, -1), self.start))
            np.testing.assert_allclose(traj.iterate(m), backward_iterate(self.seq, self.start, m))

    def test_first_step_agrees(self) -> None:
        forward = apply_forward(self.seq, self.start, 1)
        backward = apply_backward_naive(self.seq, self.start, 1)
        np.testing.assert_array_equal(forward.terminal, backward.terminal)

    def test_zero_steps_returns_start(self) -> None:
        traj = apply_backward_naive(self.seq, self.start, 0)
        self.assertEqual(traj.steps, 0)
        np.testing.assert_array_equal(traj.terminal, self.start)

    def test_backward_settles(self) -> None:
        traj = apply_backward_naive(self.seq, self.start, 50)
        displacements = step_displacement_series(traj)
        self.assertEqual(len(displacements), 50)
        self.assertLess(displacements[-1], 1e-5)
        self.assertLess(displacements[-1], displacements[5])

    def test_losses_follow_eval_stride(self) -> None:
        traj = apply_forward(self.seq, self.start, 6, evaluate=lambda t: (float(t @ t), None), eval_every=3)
        recorded = [r.step for r in traj.records if r.train_loss is not None]
        self.assertEqual(recorded, [0, 3, 6])

    def test_intermittent_without_resets_is_backward(self) -> None:
        a = apply_intermittent_backward(self.seq, self.start, 8, [])
        b = apply_backward_naive(self.seq, self.start, 8)
        np.testing.assert_allclose(a.iterates(), b.iterates())

    def test_intermittent_reset_reanchors(self) -> None:
        traj = apply_intermittent_backward(self.seq, self.start, 8, [4])
        backward = apply_backward_naive(self.seq, self.start, 8)
        np.testing.assert_allclose(traj.iterates()[:5], backward.iterates()[:5])
        anchor = traj.iterate(4)
        for m in range(5, 9):
            np.testing.assert_allclose(traj.iterate(m), compose(self.seq, range(m, 4, -1), anchor))
        self.assertEqual(traj.anchor_steps, [4])

    def test_unsorted_resets_are_rejected(self) -> None:
        with self.assertRaises(ConfigurationError):
            apply_intermittent_backward(self.seq, self.start, 8, [5, 3])
        with self.assertRaises(ConfigurationError):
            apply_intermittent_backward(self.seq, self.start, 8, [9])

    def test_backward_after_switch_bounds(self) -> None:
        at_zero = apply_backward_after(self.seq, self.start, 6, 0)
        at_end = apply_backward_after(self.seq, self.start, 6, 6)
        np.testing.assert_allclose(at_zero.iterates(), apply_backward_naive(self.seq, self.start, 6).iterates())
        np.testing.assert_allclose(at_end.iterates(), apply_forward(self.seq, self.start, 6).iterates())

    def test_backward_after_switch_replays_from_switch_point(self) -> None:
        traj = apply_backward_after(self.seq, self.start, 7, 3)
        forward = apply_forward(self.seq, self.start, 3)
        np.testing.assert_allclose(traj.iterates()[:4], forward.iterates())
        np.testing.assert_allclose(traj.iterate(7), compose(self.seq, [7, 6, 5, 4], forward.terminal))

    def test_switch_outside_range_raises(self) -> None:
        with self.assertRaises(ConfigurationError):
            apply_backward_after(self.seq, self.start, 6, 7)

    def test_shape_changing_operator_raises(self) -> None:
        seq = OperatorSequence(lambda i, s: UpdateOperator(index=i, learning_rate=1.0, apply=lambda t: np.zeros(2)), 0)
        with self.assertRaises(ConfigurationError):
            apply_forward(seq, [1.0, 2.0, 3.0], 2)

    def test_too_many_steps_raises(self) -> None:
        with self.assertRaises(ConfigurationError):
            apply_forward(affine_sequence(length=3), self.start, 4)

    def test_window_limit_distance(self) -> None:
        traj = apply_intermittent_backward(self.seq, self.start, 8, [4])
        dist = distance_to_window_limit(traj)
        self.assertEqual(len(dist), 9)
        self.assertEqual(dist[4], 0.0)
        self.assertEqual(dist[8], 0.0)


class TestDivergence(unittest.TestCase):

    @staticmethod
    def exploding(index: int, seed: int) -> UpdateOperator:
        factor = np.inf if index == 3 else 2.0
        return UpdateOperator(index=index, learning_rate=1.0, apply=lambda t: t * factor)

    def test_forward_divergence_carries_partial_trajectory(self) -> None:
        seq = OperatorSequence(self.exploding, 0, 10)
        with self.assertRaises(DivergenceError) as ctx:
            apply_forward(seq, [1.0], 5)
        self.assertEqual(ctx.exception.step, 3)
        self.assertEqual(ctx.exception.trajectory.steps, 2)
        np.testing.assert_array_equal(ctx.exception.last_iterate, [4.0])

    def test_backward_divergence_step(self) -> None:
        seq = OperatorSequence(self.exploding, 0, 10)
        with self.assertRaises(DivergenceError) as ctx:
            apply_backward_naive(seq, [1.0], 5)
        self.assertEqual(ctx.exception.step, 3)


class TestSequenceProperties(unittest.TestCase):

    @staticmethod
    def counting_sequence(calls: list) -> OperatorSequence:
        def counted(index: int, seed: int) -> UpdateOperator:
            op = affine_operator(index, seed)

            def apply(theta):
                calls.append(index)
                return op.apply(theta)
            return UpdateOperator(index, H, apply)
        return OperatorSequence(counted, 0, 12)

    def test_forward_cost_is_linear(self) -> None:
        calls = []
        apply_forward(self.counting_sequence(calls), [0.0, 0.0], 12)
        self.assertEqual(len(calls), 12)
        self.assertEqual(calls, list(range(1, 13)))

    def test_backward_cost_is_triangular(self) -> None:
        calls = []
        apply_backward_naive(self.counting_sequence(calls), [0.0, 0.0], 12)
        self.assertEqual(len(calls), 12 * 13 // 2)

    def test_replay_is_deterministic_and_extends_its_prefix(self) -> None:
        start = np.array([1.0, 1.0])
        a = apply_backward_naive(affine_sequence(seed=3), start, 8)
        b = apply_backward_naive(affine_sequence(seed=3), start, 8)
        longer = apply_backward_naive(affine_sequence(seed=3), start, 12)
        for m in range(9):
            np.testing.assert_array_equal(a.iterate(m), b.iterate(m))
            np.testing.assert_array_equal(a.iterate(m), longer.iterate(m))

    def test_identical_operators_give_identical_trajectories(self) -> None:
        model, _ = random_least_squares(3, 24, 6, seed=1)
        seq = full_batch_sequence(model, 0.1, length=20)
        start = np.ones(3)
        forward = apply_forward(seq, start, 20)
        others = [
            apply_backward_naive(seq, start, 20),
            apply_intermittent_backward(seq, start, 20, [5, 12]),
            apply_backward_after(seq, start, 20, 7),
        ]
        for traj in others:
            for m in range(21):
                np.testing.assert_allclose(traj.iterate(m), forward.iterate(m), rtol=0, atol=1e-14)


class TestIntermittentShape(unittest.TestCase):
    """
    Intermittent backward on the noisy quadratic, one reset at step 100 of 200.
    """

    h = 0.1
    noise = NoiseModel(NoiseKind.RADEMACHER, 1.0)

    def setUp(self) -> None:
        self.seq = quadratic_sequence(self.h, self.noise, seed=4)
        self.traj = apply_intermittent_backward(self.seq, [3.0], 200, [100])
        self.displacements = step_displacement_series(self.traj)

    def test_geometric_decay_within_each_window(self) -> None:
        """
        Test that step m of a window anchored at a moves by h (1 - h)^(m - a - 1) |eps_m - theta_a|.
        """
        eps = quadratic_noise_values(self.noise, 4, 200)
        anchors = {0: 3.0, 100: float(self.traj.iterate(100)[0])}
        for a, end in ((0, 100), (100, 200)):
            steps = np.arange(a + 1, end + 1)
            expected = self.h * (1.0 - self.h) ** (steps - a - 1) * np.abs(eps[steps - 1] - anchors[a])
            envelope = self.h * (1.0 - self.h) ** (steps - a - 1) * (abs(anchors[a]) + 1.0)
            observed = np.array(self.displacements[a:end])
            np.testing.assert_allclose(observed, expected, rtol=1e-8, atol=1e-14)
            self.assertTrue(np.all(observed <= envelope * (1.0 + 1e-9)))

    def test_single_jump_at_the_reset(self) -> None:
        """
        Test that the only large upward jump of the displacement series is the first step after the reset.
        """
        d = np.array(self.displacements)
        jumps = [k for k in range(1, d.size) if d[k] > 1000.0 * d[k - 1]]
        self.assertEqual(jumps, [100])
        self.assertLess(d[99], 1e-3)
        self.assertGreater(d[100], 1e-2)


if __name__ == "__main__":
    unittest.main()
