"""
services.experiment_runner

Runs a validated ExperimentConfig into a run directory:

    <output_dir>/run_<config hash>/
        manifest.json               written first, finalized last
        seed<S>_<mode>.csv          one per (seed, mode)
        seed<S>_contraction.json    backward runs of Jacobian-capable models
        ensemble_<mode>.csv         terminal point of every seed
        dataset.csv                 regression experiments
        seed<S>.svg                 one plot per seed, never averaged across seeds

Jobs are independent (one per seed and mode) and fan out to worker threads;
results are keyed by (seed, mode) so the output does not depend on completion
order. The same service also backs the `plot`, `report`, `dist-test` and
`order-check` commands.
"""
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import partial
from pathlib import Path
from typing import Callable, Generator

import numpy as np

from services import __version__
from services.bracket_approx import (
    OrderCheckRow,
    apply_approx_backward,
    approx_backward_direct,
    forward_backward_difference,
    order_check,
)
from services.contraction_lab import contraction_report, gd_operator_norm_factor
from services.distribution_lab import (
    EnsembleKind,
    LimitEnsemble,
    compare_ensembles,
    ks_critical_value,
    ks_statistic,
    quadratic_stationary_cdf,
)
from services.errors import DivergenceError, OrderLabError, PreconditionError, ConfigurationError, EmptyPlotError
from services.mlp import MLPModel, RegressionDataset, synthetic_regression_dataset
from services.model_zoo import (
    BatchLossModel,
    NoiseModel,
    linearized_sequence,
    quadratic_sequence,
    random_least_squares,
    sgd_sequence,
    two_point_sequence,
)
from services.operator_core import (
    Evaluator,
    OperatorSequence,
    ParamVector,
    Trajectory,
    apply_backward_after,
    apply_backward_naive,
    apply_forward,
    apply_intermittent_backward,
    as_param_vector,
    backward_iterate,
)
from services.order_average import (
    large_batch_update,
    lambda_values,
    order_average_mode_tag,
    order_average_sequence,
    order_average_term,
    permutation_average_update_exact,
    sequential_small_batch_update,
    small_batch_regularizer,
    split_batch,
)
from services.reporting import (
    BACKWARD_MODES,
    StabilityReport,
    TrajectorySeries,
    series_from_trajectory,
    stability_report,
)
from utils.generator_utils import run_jobs
from utils.io_utils import (
    read_ensemble_csv,
    read_json,
    read_trajectory_csv,
    sha256_file,
    write_dataset_csv,
    write_ensemble_csv,
    write_json,
    write_trajectory_csv,
)
from utils.svg import PlotSeries, emit_svg
from validators.config_schema import ExperimentConfig, parse_config

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
TOOL_NAME = "iteration-order-lab"
# Modes whose iterates are expected to settle to a point.
CONVERGING_MODES = ("backward", "intermittent", "backward-after")


@dataclass
class ExperimentSetup:
    """
    Everything a job needs, built once per run from the config.

    Attributes:
        config (ExperimentConfig): The run config.
        sequence_factory (Callable): seed -> OperatorSequence of plain update operators.
        start_for (Callable): seed -> initial point.
        evaluate (Callable | None): theta -> (train_loss, test_loss).
        model (BatchLossModel | None): Batch-loss model, when the experiment has one.
        dataset (RegressionDataset | None): Regression data.
        analytic_factor (float | None): Known contraction factor.
    """
    config: ExperimentConfig
    sequence_factory: Callable[[int], OperatorSequence]
    start_for: Callable[[int], ParamVector]
    evaluate: Evaluator | None = None
    model: BatchLossModel | None = None
    dataset: RegressionDataset | None = None
    analytic_factor: float | None = None


def build_setup(config: ExperimentConfig) -> ExperimentSetup:
    """
    Instantiate the model family named by `config.experiment`.

    Raises:
        ConfigurationError: If the model parameters are invalid.
    """
    h, n = config.learning_rate, config.steps
    spec = config.model
    fixed_start = as_param_vector(config.start) if config.start is not None else None

    def constant_start(seed: int) -> ParamVector:
        return fixed_start.copy()

    if config.experiment == "quadratic":
        noise = NoiseModel(spec.noise.kind, spec.noise.scale)
        return ExperimentSetup(
            config=config,
            sequence_factory=lambda seed: quadratic_sequence(h, noise, seed, n),
            start_for=constant_start,
            evaluate=lambda theta: (0.5 * float(theta @ theta), None),
            analytic_factor=abs(1.0 - h),
        )

    if config.experiment == "linearized":
        noise = NoiseModel(spec.noise.kind, spec.noise.scale)
        H = np.asarray(config.hessian_matrix(), dtype=np.float64)
        minimum = as_param_vector(spec.minimum if spec.minimum is not None else np.zeros(len(H)))
        base = linearized_sequence(minimum, H, h, noise, 0, n)

        def quadratic_form(theta: ParamVector):
            gap = theta - minimum
            return 0.5 * float(gap @ H @ gap), None

        return ExperimentSetup(
            config=config,
            sequence_factory=base.with_seed,
            start_for=constant_start,
            evaluate=quadratic_form,
            analytic_factor=gd_operator_norm_factor(H, h),
        )

    if config.experiment == "two-point":
        return ExperimentSetup(
            config=config,
            sequence_factory=lambda seed: two_point_sequence(spec.x0, spec.y0, seed, n),
            start_for=constant_start,
            analytic_factor=0.0,
        )

    if config.experiment == "least-squares":
        model, _ = random_least_squares(
            spec.dim, spec.samples, config.batch_size, seed=spec.data_seed,
            scale=spec.design_scale, target_noise=spec.target_noise,
        )
        return ExperimentSetup(
            config=config,
            sequence_factory=lambda seed: sgd_sequence(model, h, seed, n),
            start_for=constant_start,
            evaluate=model.evaluate,
            model=model,
        )

    dataset = synthetic_regression_dataset(spec.dataset)
    model = MLPModel(dataset, hidden=spec.widths, activation=spec.activation,
                     batch_size=config.batch_size)
    return ExperimentSetup(
        config=config,
        sequence_factory=lambda seed: sgd_sequence(model, h, seed, n),
        start_for=constant_start if fixed_start is not None else model.init_params,
        evaluate=model.evaluate,
        model=model,
        dataset=dataset,
    )


@dataclass(frozen=True)
class Job:
    seed: int
    mode: str
    lambda_: float | None = None

    @property
    def slug(self) -> str:
        if self.mode == "order-average":
            return f"order-average-lambda{self.lambda_:g}"
        return self.mode

    @property
    def csv_name(self) -> str:
        return f"seed{self.seed}_{self.slug}.csv"


@dataclass
class JobResult:
    """
    Outcome of one (seed, mode) job.

    `status` is one of converged, completed, diverged or failed.
    """
    job: Job
    status: str
    wall_clock_s: float
    series: TrajectorySeries | None = None
    terminal: list[float] | None = None
    terminal_displacement: float | None = None
    diverged_step: int | None = None
    error: str | None = None
    artifacts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.job.seed,
            "mode": self.job.slug,
            "status": self.status,
            "wall_clock_s": self.wall_clock_s,
            "terminal_displacement": self.terminal_displacement,
            "diverged_step": self.diverged_step,
            "error": self.error,
            "artifacts": self.artifacts,
        }


@dataclass
class RunSummary:
    run_dir: Path
    manifest: dict
    results: list[JobResult]

    @property
    def exit_code(self) -> int:
        """3 when every seed has a diverged job, else 0."""
        seeds = {r.job.seed for r in self.results}
        diverged = {r.job.seed for r in self.results if r.status == "diverged"}
        return 3 if seeds and diverged == seeds else 0


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class ExperimentRunner:
    """
    Service executing one experiment config.

    Each run gets a private directory keyed by the config hash, so reruns of an
    identical config overwrite the same files with identical bytes.
    """

    def __init__(self, config: ExperimentConfig, output_dir: str | Path | None = None, workers: int | None = None):
        """
        Initialize the runner.

        Args:
            config (ExperimentConfig): Validated config.
            output_dir (str | Path | None): Overrides `config.output_dir`.
            workers (int | None): Concurrent jobs; ORDER_LAB_WORKERS or 1 when None.
        """
        self.config = config
        self.setup = build_setup(config)
        self.run_dir = Path(output_dir or config.output_dir) / f"run_{config.config_hash()}"
        self.workers = workers if workers is not None else int(os.environ.get("ORDER_LAB_WORKERS", "1"))
        self._started_at: str | None = None

    def jobs(self) -> list[Job]:
        """Seed-major list of every (seed, mode) job."""
        jobs = []
        for seed in self.config.seeds:
            for mode in self.config.modes:
                if mode == "order-average":
                    oa = self.config.order_average
                    for lam in lambda_values(self.config.learning_rate, oa.lambda_, oa.lambda_scales):
                        jobs.append(Job(seed, mode, lam))
                else:
                    jobs.append(Job(seed, mode))
        return jobs

    def _manifest(self, status: str, results: list[JobResult] | None = None) -> dict:
        manifest = {
            "tool": TOOL_NAME,
            "version": __version__,
            "status": status,
            "config": self.config.model_dump(mode="json", by_alias=True),
            "config_hash": self.config.config_hash(),
            "started_at": self._started_at,
        }
        if results is not None:
            seeds: dict[str, dict[str, str]] = {}
            for r in results:
                seeds.setdefault(str(r.job.seed), {})[r.job.slug] = r.status
            manifest["jobs"] = [r.to_dict() for r in results]
            manifest["seeds"] = seeds
            manifest["finished_at"] = _now()
        return manifest

    def prepare(self) -> Path:
        """
        Create the run directory and write the initial manifest.

        Returns:
            Path: The run directory.
        """
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._started_at = _now()
        write_json(self.run_dir / MANIFEST, self._manifest("running"))
        if self.setup.dataset is not None:
            write_dataset_csv(self.setup.dataset, self.run_dir / "dataset.csv")
        logger.info("Run %s: %d jobs", self.run_dir, len(self.jobs()))
        return self.run_dir

    def trajectory(self, job: Job) -> tuple[OperatorSequence, Trajectory]:
        """
        Run the engine for one job.

        Raises:
            DivergenceError: With the partial trajectory attached.
            CapabilityError: If the mode needs derivatives the model lacks.
        """
        c = self.config
        start = self.setup.start_for(job.seed)
        if job.mode == "order-average":
            seq = order_average_sequence(self.setup.model, c.learning_rate, c.order_average.c,
                                         job.lambda_, job.seed, c.steps)
        else:
            seq = self.setup.sequence_factory(job.seed)
        common = dict(evaluate=self.setup.evaluate, eval_every=c.eval_every)
        match job.mode:
            case "forward":
                traj = apply_forward(seq, start, c.steps, **common)
            case "backward":
                traj = apply_backward_naive(seq, start, c.steps, **common)
            case "intermittent":
                traj = apply_intermittent_backward(seq, start, c.steps, c.resets, **common)
            case "backward-after":
                traj = apply_backward_after(seq, start, c.steps, c.switch_step, **common)
            case "approx-backward":
                traj = apply_approx_backward(seq, start, c.steps, **common)
            case "order-average":
                traj = apply_forward(seq, start, c.steps, **common)
                traj.mode = order_average_mode_tag(job.lambda_)
            case _:
                raise ConfigurationError(f"Unknown mode '{job.mode}'", fields=["modes"])
        return seq, traj

    def run_job(self, job: Job) -> JobResult:
        """
        Run one job and write its CSV (and contraction report for backward runs).

        Divergence and capability failures are recorded in the result; other
        jobs are unaffected.
        """
        began = time.perf_counter()
        c = self.config
        seq = traj = None
        status, error, diverged_step = "completed", None, None
        try:
            seq, traj = self.trajectory(job)
        except DivergenceError as e:
            traj = e.trajectory
            status, error, diverged_step = "diverged", e.message, e.step
        except OrderLabError as e:
            logger.error("Job seed=%d mode=%s failed: %s", job.seed, job.slug, e.raw_error or e.message)
            return JobResult(job, "failed", time.perf_counter() - began, error=e.message)

        result = JobResult(job, status, 0.0, diverged_step=diverged_step, error=error)
        if traj is not None:
            result.series = series_from_trajectory(traj, job.slug, c.eval_every)
            write_trajectory_csv(self.run_dir / job.csv_name, result.series)
            result.artifacts.append(job.csv_name)
            result.terminal = [float(v) for v in traj.terminal]
            result.terminal_displacement = traj.records[-1].step_displacement
            if status == "completed" and job.mode in CONVERGING_MODES and result.terminal_displacement < c.tolerance:
                result.status = "converged"

        if status != "diverged" and job.mode == "backward" and seq.operator(1).field_jacobian is not None:
            report = contraction_report(seq, traj, radius=c.contraction_radius,
                                        analytic_factor=self.setup.analytic_factor, seed=job.seed)
            name = f"seed{job.seed}_contraction.json"
            write_json(self.run_dir / name, report.to_dict())
            result.artifacts.append(name)

        result.wall_clock_s = time.perf_counter() - began
        logger.info("Job seed=%d mode=%s: %s in %.3fs", job.seed, job.slug, result.status, result.wall_clock_s)
        return result

    def _write_ensembles(self, results: list[JobResult]) -> list[str]:
        names = []
        for slug in dict.fromkeys(r.job.slug for r in results):
            rows = [r for r in results if r.job.slug == slug and r.terminal is not None]
            if not rows:
                continue
            backward_like = rows[0].job.mode in BACKWARD_MODES
            ensemble = LimitEnsemble(
                kind=EnsembleKind.BACKWARD_LIMITS if backward_like else EnsembleKind.FORWARD_TERMINALS,
                points=np.array([r.terminal for r in rows], dtype=np.float64),
                converged=np.array([
                    (r.status == "converged") if backward_like else (r.status != "diverged") for r in rows
                ]),
                seeds=[r.job.seed for r in rows],
                steps_used=self.config.steps,
                tolerance=self.config.tolerance if backward_like else math.inf,
                terminal_displacements=np.array([r.terminal_displacement for r in rows], dtype=np.float64),
            )
            name = f"ensemble_{slug}.csv"
            write_ensemble_csv(self.run_dir / name, ensemble)
            names.append(name)
        return names

    def finalize(self, results: list[JobResult]) -> RunSummary:
        """
        Write ensembles and plots, hash every artifact and finalize the manifest.
        """
        self._write_ensembles(results)
        if self.config.emit_plots:
            emit_seed_plots(self.run_dir, [r.series for r in results if r.series is not None], self.config.log_y)
        manifest = self._manifest("finished", results)
        manifest["artifacts"] = {
            p.name: sha256_file(p) for p in sorted(self.run_dir.iterdir()) if p.name != MANIFEST and p.is_file()
        }
        write_json(self.run_dir / MANIFEST, manifest)
        summary = RunSummary(self.run_dir, manifest, results)
        logger.info("Run %s finished (exit code %d)", self.run_dir, summary.exit_code)
        return summary

    def run(self) -> RunSummary:
        """Execute every job, `workers` at a time, and finalize the run."""
        self.prepare()
        results = run_jobs([partial(self.run_job, job) for job in self.jobs()], self.workers)
        return self.finalize(results)

    def stream(self) -> Generator[bytes, None, None]:
        """
        Execute the run sequentially, yielding one NDJSON line per job and a final manifest line.

        Yields:
            bytes: UTF-8 encoded JSON lines.
        """
        self.prepare()
        yield _ndjson({"event": "started", "run_dir": str(self.run_dir), "jobs": len(self.jobs())})
        results = []
        for job in self.jobs():
            result = self.run_job(job)
            results.append(result)
            yield _ndjson({"event": "job", **result.to_dict()})
        summary = self.finalize(results)
        yield _ndjson({"event": "manifest", "exit_code": summary.exit_code, "manifest": summary.manifest})


def _ndjson(document: dict) -> bytes:
    return (json.dumps(document, sort_keys=True) + "\n").encode("utf-8")


def run_experiment(config: ExperimentConfig, output_dir: str | Path | None = None,
                   workers: int | None = None) -> RunSummary:
    """Run `config` and return the summary of its run directory."""
    return ExperimentRunner(config, output_dir, workers).run()


# --- run-directory readers ----------------------------------------------------

def load_manifest(run_dir: str | Path) -> dict:
    """
    Read a finished run's manifest.

    Raises:
        PreconditionError: If the run has not finished.
    """
    manifest = read_json(Path(run_dir) / MANIFEST)
    if manifest.get("status") != "finished":
        raise PreconditionError(f"Run in {run_dir} has not finished")
    return manifest


def load_series(run_dir: str | Path) -> list[TrajectorySeries]:
    """Every trajectory CSV listed in the manifest, in manifest order."""
    run_dir = Path(run_dir)
    series = []
    for job in load_manifest(run_dir)["jobs"]:
        name = f"seed{job['seed']}_{job['mode']}.csv"
        if name in job["artifacts"]:
            series.append(read_trajectory_csv(run_dir / name, job["seed"], job["mode"]))
    return series


def emit_seed_plots(run_dir: str | Path, series: list[TrajectorySeries], log_y: bool = True) -> list[Path]:
    """
    One SVG per seed with a curve per mode; train loss when recorded, else step displacement.
    """
    run_dir = Path(run_dir)
    written = []
    for seed in dict.fromkeys(s.seed for s in series):
        mine = [s for s in series if s.seed == seed]
        has_loss = any(v is not None for s in mine for v in s.train_loss)
        curves = [
            PlotSeries(s.mode, s.steps, s.train_loss if has_loss else s.step_displacement) for s in mine
        ]
        path = run_dir / f"seed{seed}.svg"
        try:
            emit_svg(curves, path, log_y=log_y, title=f"seed {seed}",
                     y_label="train loss" if has_loss else "step displacement")
        except EmptyPlotError as e:
            logger.warning("No plot for seed %d: %s", seed, e.message)
            continue
        written.append(path)
    return written


def plot_run(run_dir: str | Path, log_y: bool = True) -> list[Path]:
    """Re-render the per-seed plots of a finished run."""
    return emit_seed_plots(run_dir, load_series(run_dir), log_y)


def report_run(run_dir: str | Path, window: int) -> StabilityReport:
    """Stability report over a finished run; also written to stability.json."""
    report = stability_report(load_series(run_dir), window)
    write_json(Path(run_dir) / "stability.json", report.to_dict())
    return report


def dist_test(run_dir: str | Path, reference: str = "analytic", alpha: float = 0.01) -> dict:
    """
    Distribution test on a run's ensembles; also written to dist_test.json.

    `analytic` tests the backward limits of a Gaussian quadratic run against its
    stationary law; `two-sample` compares backward limits with forward terminals.

    Raises:
        PreconditionError: If the run lacks the needed ensembles or experiment.
    """
    run_dir = Path(run_dir)
    config = parse_config(load_manifest(run_dir)["config"])

    def ensemble(slug: str, kind: EnsembleKind, tolerance: float) -> LimitEnsemble:
        path = run_dir / f"ensemble_{slug}.csv"
        if not path.exists():
            raise PreconditionError(f"Run has no {slug} ensemble")
        return read_ensemble_csv(path, kind, config.steps, tolerance)

    backward = ensemble("backward", EnsembleKind.BACKWARD_LIMITS, config.tolerance)
    if reference == "analytic":
        if config.experiment != "quadratic" or config.model.noise.kind != "gaussian":
            raise PreconditionError("Analytic reference needs a quadratic experiment with gaussian noise")
        points = backward.converged_points()[:, 0]
        if points.size == 0:
            raise PreconditionError("No converged backward limits")
        statistic = ks_statistic(points, quadratic_stationary_cdf(config.learning_rate, config.model.noise.scale))
        critical = ks_critical_value(alpha, points.size)
        result = {
            "reference": "analytic",
            "ks_statistic": statistic,
            "critical_value": critical,
            "samples": int(points.size),
            "excluded": int(len(backward.points) - points.size),
            "verdict": statistic < critical,
        }
    elif reference == "two-sample":
        forward = ensemble("forward", EnsembleKind.FORWARD_TERMINALS, math.inf)
        result = {"reference": "two-sample", **compare_ensembles(backward, forward, alpha=alpha).to_dict()}
    else:
        raise ConfigurationError(f"Unknown reference '{reference}'", fields=["reference"])
    write_json(run_dir / "dist_test.json", result)
    return result


# --- order-of-accuracy tables ---------------------------------------------------

ORDER_CHECK_KINDS = ("approx-backward", "bracket", "small-batch", "permutation-average", "euler")


def order_check_table(
        kind: str,
        h0: float = 0.1,
        levels: int = 4,
        steps: int = 10,
        dim: int = 5,
        batches: int = 10,
        rows_per_batch: int = 12,
        c: int = 3,
        seed: int = 0,
        design_scale: float = 0.2,
    ) -> list[OrderCheckRow]:
    """
    Order-check table for one of the built-in cases, on a seeded least-squares model.

    Kinds:
        approx-backward      approximate backward iterate vs exact backward iterate
        bracket              bracket prediction vs exact backward - forward gap
        small-batch          T_large + small-batch regularizer vs sequential split updates
        permutation-average  T_large + order-average term / 2 vs exact permutation average
        euler                explicit Euler vs the exact flow of theta' = -theta (first order)

    Raises:
        ConfigurationError: For an unknown kind or an invalid ladder.
    """
    hs = [h0 / 2 ** k for k in range(levels)]
    if kind == "euler":
        def euler(h: float):
            n_steps = round(1.0 / h)
            return np.array([(1.0 - h) ** n_steps]), np.array([math.exp(-1.0)])
        return order_check(euler, hs)

    model, _ = random_least_squares(dim, batches * rows_per_batch, rows_per_batch, seed=seed, scale=design_scale)
    theta0 = np.zeros(dim)

    if kind in ("approx-backward", "bracket"):
        def build(h: float):
            seq = sgd_sequence(model, h, seed, steps)
            if kind == "bracket":
                exact, prediction = forward_backward_difference(seq, theta0, steps)
                return prediction, exact
            return approx_backward_direct(seq, theta0, steps), backward_iterate(seq, theta0, steps)
        return order_check(build, hs)

    if kind in ("small-batch", "permutation-average"):
        batch = model.batches[0]
        splits = split_batch(batch, c, seed)

        def build(h_small: float):
            large = large_batch_update(model, batch, theta0, c * h_small)
            if kind == "small-batch":
                return (large + small_batch_regularizer(model, splits, theta0, h_small),
                        sequential_small_batch_update(model, splits, theta0, h_small))
            return (large + 0.5 * h_small * h_small * order_average_term(model, splits, theta0),
                    permutation_average_update_exact(model, splits, theta0, h_small))
        return order_check(build, hs)

    raise ConfigurationError(f"Unknown order-check kind '{kind}'", fields=["kind"])
