"""
services.distribution_lab

Ensembles of backward limit points and forward terminal iterates across seeds,
the stationary law of the noisy quadratic, and Kolmogorov-Smirnov comparisons.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import numpy.typing as npt
from scipy import special, stats

from services.errors import ConfigurationError, DivergenceError, InsufficientDataError
from services.operator_core import (
    OperatorSequence,
    ParamVector,
    as_param_vector,
    backward_iterate,
    distance,
    forward_iterate,
)

logger = logging.getLogger(__name__)

SequenceFactory = Callable[[int], OperatorSequence]
DEFAULT_TOLERANCE = 1e-10


class EnsembleKind(str, Enum):
    BACKWARD_LIMITS = "backward-limits"
    FORWARD_TERMINALS = "forward-terminals"


@dataclass
class LimitEnsemble:
    """
    One terminal point per seed.

    Attributes:
        kind (EnsembleKind): Backward limits or forward terminals.
        points (numpy.ndarray): Shape (n_seeds, d).
        converged (numpy.ndarray): Per-seed flag; terminal displacement below tolerance.
        seeds (list[int]): Seeds, in the order of `points`.
        steps_used (int): Step count n.
        tolerance (float): Convergence tolerance.
        terminal_displacements (numpy.ndarray): d(theta_n, theta_{n-1}) per seed.
    """
    kind: EnsembleKind
    points: npt.NDArray[np.float64]
    converged: npt.NDArray[np.bool_]
    seeds: list[int]
    steps_used: int
    tolerance: float
    terminal_displacements: npt.NDArray[np.float64] = field(default=None)

    def __post_init__(self):
        if len(self.points) != len(self.seeds) or len(self.converged) != len(self.seeds):
            raise ConfigurationError("Ensemble points, flags and seeds must have equal length")
        if self.terminal_displacements is None:
            self.terminal_displacements = np.full(len(self.seeds), np.nan)

    @property
    def dim(self) -> int:
        return self.points.shape[1] if self.points.ndim == 2 else 1

    def converged_points(self) -> npt.NDArray[np.float64]:
        """Points of the converged seeds only."""
        return self.points[self.converged]


def _terminal_pair(run: Callable[[int], ParamVector], n: int) -> tuple[ParamVector, ParamVector]:
    return (run(n - 1) if n > 0 else run(0)), run(n)


def _collect(
        kind: EnsembleKind,
        sequence_factory: SequenceFactory,
        start,
        seeds: Sequence[int],
        n: int,
        tol: float,
        iterate: Callable[[OperatorSequence, ParamVector, int], ParamVector],
    ) -> LimitEnsemble:
    theta0 = as_param_vector(start)
    points, flags, displacements = [], [], []
    diverged = 0
    for seed in seeds:
        seq = sequence_factory(seed)
        try:
            previous, last = _terminal_pair(lambda m: iterate(seq, theta0, m), n)
        except DivergenceError as e:
            diverged += 1
            logger.warning("Seed %d diverged at step %d; excluded from comparisons", seed, e.step)
            points.append(np.asarray(e.last_iterate if e.last_iterate is not None else theta0))
            flags.append(False)
            displacements.append(math.inf)
            continue
        gap = distance(previous, last)
        points.append(last)
        flags.append(gap < tol)
        displacements.append(gap)
    logger.info("%s ensemble: %d seeds, %d converged, %d diverged",
                kind.value, len(seeds), int(np.sum(flags)), diverged)
    return LimitEnsemble(
        kind=kind,
        points=np.vstack(points) if points else np.empty((0, theta0.size)),
        converged=np.asarray(flags, dtype=bool),
        seeds=[int(s) for s in seeds],
        steps_used=n,
        tolerance=tol,
        terminal_displacements=np.asarray(displacements, dtype=np.float64),
    )


def backward_limit_ensemble(
        sequence_factory: SequenceFactory,
        start,
        seeds: Sequence[int],
        n: int,
        tol: float = DEFAULT_TOLERANCE,
    ) -> LimitEnsemble:
    """
    Backward iterate T_1 ... T_n(start) for every seed, flagged converged when
    its distance to T_1 ... T_{n-1}(start) is below `tol`.

    Only the two terminal replays are computed per seed; they coincide with the
    last two records of apply_backward_naive.

    Args:
        sequence_factory (Callable): seed -> OperatorSequence.
        start: Shared initial point.
        seeds (Sequence[int]): Seeds to run.
        n (int): Step count, at least 2.
        tol (float): Convergence tolerance, positive.

    Returns:
        LimitEnsemble: Kind backward-limits.

    Raises:
        ConfigurationError: If n < 2 or tol <= 0.
    """
    if n < 2:
        raise ConfigurationError("Backward limits need at least 2 steps", fields=["steps"])
    if not tol > 0.0:
        raise ConfigurationError("Tolerance must be positive", fields=["tolerance"])
    return _collect(EnsembleKind.BACKWARD_LIMITS, sequence_factory, start, seeds, n, tol, backward_iterate)


def forward_terminal_ensemble(
        sequence_factory: SequenceFactory,
        start,
        seeds: Sequence[int],
        n: int,
    ) -> LimitEnsemble:
    """
    Forward iterate T_n ... T_1(start) for every seed.

    Forward iterates do not converge pointwise, so the tolerance is infinite and
    the flag only marks finite runs; terminal displacements are still recorded.

    Raises:
        ConfigurationError: If n < 0.
    """
    if n < 0:
        raise ConfigurationError("Step count must be non-negative", fields=["steps"])
    return _collect(EnsembleKind.FORWARD_TERMINALS, sequence_factory, start, seeds, n, math.inf, forward_iterate)


def quadratic_stationary_params(h: float, sigma: float) -> tuple[float, float]:
    """
    Mean and variance of the stationary law of theta -> (1 - h) theta + h eps, eps ~ N(0, sigma^2).

    Returns:
        tuple[float, float]: (0, h sigma^2 / (2 - h)).

    Raises:
        ConfigurationError: If h is outside (0, 2).
    """
    if not 0.0 < h < 2.0:
        raise ConfigurationError("Learning rate must lie in (0, 2)", fields=["learning_rate"])
    return 0.0, h * sigma * sigma / (2.0 - h)


def quadratic_stationary_cdf(h: float, sigma: float) -> Callable[[float], float]:
    """CDF of the quadratic stationary law; a point mass at 0 when sigma = 0."""
    mean, variance = quadratic_stationary_params(h, sigma)
    if variance == 0.0:
        return lambda x: 1.0 if x >= mean else 0.0
    return stats.norm(loc=mean, scale=math.sqrt(variance)).cdf


def ks_statistic(samples: Sequence[float], cdf: Callable[[float], float]) -> float:
    """
    One-sample two-sided Kolmogorov-Smirnov statistic against a reference CDF.

    Args:
        samples (Sequence[float]): Non-empty sample.
        cdf (Callable): Reference CDF; called elementwise.

    Returns:
        float: sup |F_n - F| evaluated on both sides of every order statistic.

    Raises:
        InsufficientDataError: If samples is empty.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise InsufficientDataError("KS statistic needs at least one sample")
    return float(stats.kstest(x, np.vectorize(cdf, otypes=[np.float64])).statistic)


def two_sample_ks(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise InsufficientDataError("Two-sample KS needs non-empty samples")
    return float(stats.ks_2samp(a, b, method="asymp").statistic)


def ks_critical_value(alpha: float, n: int, m: int | None = None) -> float:
    """
    Asymptotic critical value of the KS statistic at level `alpha`.

    One-sample: K^-1(alpha) / sqrt(n); two-sample: K^-1(alpha) sqrt((n + m) / (n m)),
    with K the Kolmogorov distribution.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError("alpha must lie in (0, 1)", fields=["alpha"])
    c = float(special.kolmogi(alpha))
    if m is None:
        return c / math.sqrt(n)
    return c * math.sqrt((n + m) / (n * m))


@dataclass
class EnsembleComparison:
    """
    Per-coordinate comparison of two ensembles.

    Attributes:
        ks_statistics (list[float]): Two-sample KS statistic per coordinate.
        critical_value (float): Two-sample KS critical value at `alpha`.
        mean_deltas (list[float]): mean(a) - mean(b) per coordinate.
        variance_ratios (list[float]): var(a) / var(b); 1 when both vanish.
        sample_sizes (tuple[int, int]): Converged points used from a and b.
        excluded (tuple[int, int]): Non-converged seeds left out of a and b.
        verdict (bool): Every coordinate within the thresholds.
    """
    ks_statistics: list[float]
    critical_value: float
    mean_deltas: list[float]
    variance_ratios: list[float]
    sample_sizes: tuple[int, int]
    excluded: tuple[int, int]
    verdict: bool

    def to_dict(self) -> dict:
        return {
            "ks_statistics": self.ks_statistics,
            "critical_value": self.critical_value,
            "mean_deltas": self.mean_deltas,
            "variance_ratios": self.variance_ratios,
            "sample_sizes": list(self.sample_sizes),
            "excluded": list(self.excluded),
            "verdict": self.verdict,
        }


def _variance_ratio(a: np.ndarray, b: np.ndarray) -> float:
    va, vb = float(np.var(a)), float(np.var(b))
    if vb == 0.0:
        return 1.0 if va == 0.0 else math.inf
    return va / vb


def compare_ensembles(
        a: LimitEnsemble,
        b: LimitEnsemble,
        alpha: float = 0.01,
        ks_threshold: float | None = None,
        mean_tolerance: float = math.inf,
        variance_band: tuple[float, float] = (0.0, math.inf),
    ) -> EnsembleComparison:
    """
    Compare the converged points of two ensembles coordinate by coordinate.

    Args:
        a, b (LimitEnsemble): Ensembles of equal dimension.
        alpha (float): Level for the default KS threshold.
        ks_threshold (float | None): KS threshold; the two-sample critical value when None.
        mean_tolerance (float): Largest accepted |mean delta|.
        variance_band (tuple[float, float]): Accepted range of variance ratios.

    Returns:
        EnsembleComparison: Statistics and verdict.

    Raises:
        InsufficientDataError: If either ensemble has no converged point.
        ConfigurationError: If dimensions differ.
    """
    pa, pb = a.converged_points(), b.converged_points()
    if len(pa) == 0 or len(pb) == 0:
        raise InsufficientDataError("Every point of one ensemble is divergent")
    if pa.shape[1] != pb.shape[1]:
        raise ConfigurationError("Ensembles differ in dimension")
    critical = ks_critical_value(alpha, len(pa), len(pb))
    threshold = critical if ks_threshold is None else ks_threshold

    ks, means, ratios = [], [], []
    for j in range(pa.shape[1]):
        ks.append(two_sample_ks(pa[:, j], pb[:, j]))
        means.append(float(np.mean(pa[:, j]) - np.mean(pb[:, j])))
        ratios.append(_variance_ratio(pa[:, j], pb[:, j]))
    low, high = variance_band
    verdict = all(
        s < threshold and abs(dm) <= mean_tolerance and low <= r <= high
        for s, dm, r in zip(ks, means, ratios)
    )
    return EnsembleComparison(
        ks_statistics=ks,
        critical_value=critical,
        mean_deltas=means,
        variance_ratios=ratios,
        sample_sizes=(len(pa), len(pb)),
        excluded=(len(a.points) - len(pa), len(b.points) - len(pb)),
        verdict=verdict,
    )


def point_frequency(ensemble: LimitEnsemble, point, atol: float = 0.0) -> float:
    """
    Fraction of converged points equal to `point` (within `atol`).

    Raises:
        InsufficientDataError: If no point converged.
    """
    points = ensemble.converged_points()
    if len(points) == 0:
        raise InsufficientDataError("No converged points")
    target = as_param_vector(point)
    hits = np.all(np.abs(points - target) <= atol, axis=1)
    return float(np.mean(hits))
