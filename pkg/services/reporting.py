"""
services.reporting

Per-seed loss series and the end-of-run stability report.

Series are never averaged across seeds: every report row belongs to one
(seed, mode) pair, and the backward-versus-forward verdict is given per seed.
"""
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from services.errors import PreconditionError
from services.operator_core import Trajectory, distance_to_window_limit

logger = logging.getLogger(__name__)

BACKWARD_MODES = ("backward", "intermittent", "backward-after", "approx-backward")


@dataclass
class TrajectorySeries:
    """
    The recorded columns of one (seed, mode) run.

    Attributes:
        seed (int): Sequence seed.
        mode (str): Mode slug, e.g. "backward".
        steps (list[int]): Recorded steps.
        train_loss (list[float | None]): Train loss per recorded step.
        test_loss (list[float | None]): Test loss per recorded step.
        step_displacement (list[float]): ||theta_m - theta_{m-1}||.
        dist_to_anchor (list[float]): Distance to the anchor window's terminal iterate.
    """
    seed: int
    mode: str
    steps: list[int] = field(default_factory=list)
    train_loss: list[float | None] = field(default_factory=list)
    test_loss: list[float | None] = field(default_factory=list)
    step_displacement: list[float] = field(default_factory=list)
    dist_to_anchor: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


def series_from_trajectory(traj: Trajectory, mode: str, eval_every: int = 1) -> TrajectorySeries:
    """
    Rows for steps 1..n on the `eval_every` stride.

    Args:
        traj (Trajectory): Source trajectory.
        mode (str): Mode slug to record.
        eval_every (int): Recording stride.

    Returns:
        TrajectorySeries: The recorded columns.
    """
    anchor_distances = distance_to_window_limit(traj)
    series = TrajectorySeries(seed=traj.seed, mode=mode)
    for record, dist in zip(traj.records[1:], anchor_distances[1:]):
        if record.step % eval_every != 0:
            continue
        series.steps.append(record.step)
        series.train_loss.append(record.train_loss)
        series.test_loss.append(record.test_loss)
        series.step_displacement.append(record.step_displacement)
        series.dist_to_anchor.append(dist)
    return series


@dataclass
class StabilityRow:
    seed: int
    mode: str
    loss_variance: float | None
    max_displacement: float


@dataclass
class StabilityReport:
    """
    Attributes:
        window (int): Number of final recorded steps inspected.
        rows (list[StabilityRow]): One row per (seed, mode).
        verdicts (dict[int, bool]): Per seed, whether backward beat forward.
    """
    window: int
    rows: list[StabilityRow]
    verdicts: dict[int, bool]

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "rows": [row.__dict__ for row in self.rows],
            "verdicts": {str(seed): v for seed, v in sorted(self.verdicts.items())},
        }


def _window_variance(values: Sequence[float | None]) -> float | None:
    finite = [v for v in values if v is not None]
    if not finite:
        return None
    if len(finite) == 1:
        return 0.0
    return float(np.var(np.asarray(finite, dtype=np.float64), ddof=1))


def stability_report(
        series: Sequence[TrajectorySeries],
        window: int,
        displacement_ratio: float = 0.1,
    ) -> StabilityReport:
    """
    Variance of the train loss and maximum step displacement over each series' final window.

    A seed's verdict is True when its backward run has strictly smaller loss
    variance than its forward run and a maximum displacement below
    `displacement_ratio` times the forward one. Seeds without both modes get no verdict.

    Raises:
        PreconditionError: If the window exceeds the recorded steps of any series.
    """
    if window < 1:
        raise PreconditionError("Window must be at least 1")
    rows = []
    for s in series:
        if window > len(s):
            raise PreconditionError(
                f"Window of {window} exceeds the {len(s)} recorded steps of seed {s.seed} ({s.mode})"
            )
        rows.append(StabilityRow(
            seed=s.seed,
            mode=s.mode,
            loss_variance=_window_variance(s.train_loss[-window:]),
            max_displacement=float(max(s.step_displacement[-window:])),
        ))

    by_key = {(row.seed, row.mode): row for row in rows}
    verdicts = {}
    for seed in sorted({row.seed for row in rows}):
        forward, backward = by_key.get((seed, "forward")), by_key.get((seed, "backward"))
        if forward is None or backward is None:
            continue
        if forward.loss_variance is None or backward.loss_variance is None:
            continue
        verdicts[seed] = (
            backward.loss_variance < forward.loss_variance
            and backward.max_displacement < displacement_ratio * forward.max_displacement
        )
        if not verdicts[seed]:
            logger.info("Seed %d: backward run is not more stable than forward", seed)
    return StabilityReport(window, rows, verdicts)
