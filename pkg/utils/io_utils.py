"""IO utils

Run-directory persistence (trajectory and ensemble CSVs, JSON documents,
artifact hashes) and a mechanism for storing a streamed request body to a
tempfile while validating it.

Numbers are written in decimal notation with 17 significant digits so every
float64 survives a write/read cycle exactly; missing values are empty cells.
"""
import csv
import hashlib
import json
import logging
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from fastapi import Request

from services.distribution_lab import EnsembleKind, LimitEnsemble
from services.errors import ConfigurationError, OrderLabError
from services.mlp import RegressionDataset
from services.reporting import TrajectorySeries
from validators.config_validator import streaming_validator

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("step", "train_loss", "test_loss", "step_displacement", "dist_to_anchor")


class ConfigUploadError(OrderLabError):
    """
    Raised when a streamed experiment config cannot be stored for parsing.

    Distinct from ConfigurationError: the body may be valid, the server failed.
    """
    status_code = 500
    exit_code = 4


def format_number(value: float | None) -> str:
    """17 significant digits, or an empty string for a missing value."""
    if value is None:
        return ""
    return format(float(value), ".17g")


def parse_number(cell: str) -> float | None:
    return float(cell) if cell != "" else None


def write_trajectory_csv(path: str | Path, series: TrajectorySeries) -> Path:
    """
    Write one (seed, mode) series with the fixed column set.

    Args:
        path (str | Path): Target CSV file.
        series (TrajectorySeries): Rows to write.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in zip(series.steps, series.train_loss, series.test_loss,
                       series.step_displacement, series.dist_to_anchor):
            writer.writerow([str(row[0])] + [format_number(v) for v in row[1:]])
    return path


def read_trajectory_csv(path: str | Path, seed: int, mode: str) -> TrajectorySeries:
    """
    Read a trajectory CSV back into a TrajectorySeries.

    Raises:
        ConfigurationError: If the header differs from the fixed column set.
    """
    series = TrajectorySeries(seed=seed, mode=mode)
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != TRAJECTORY_COLUMNS:
            raise ConfigurationError(f"{path} is not a trajectory CSV", fields=["run_dir"])
        for row in reader:
            series.steps.append(int(row[0]))
            series.train_loss.append(parse_number(row[1]))
            series.test_loss.append(parse_number(row[2]))
            series.step_displacement.append(float(row[3]))
            series.dist_to_anchor.append(float(row[4]))
    return series


def write_ensemble_csv(path: str | Path, ensemble: LimitEnsemble) -> Path:
    """Columns: seed, converged, theta_0 .. theta_{d-1}."""
    path = Path(path)
    d = ensemble.points.shape[1]
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["seed", "converged"] + [f"theta_{j}" for j in range(d)])
        for seed, flag, point in zip(ensemble.seeds, ensemble.converged, ensemble.points):
            writer.writerow([str(seed), "1" if flag else "0"] + [format_number(v) for v in point])
    return path


def read_ensemble_csv(path: str | Path, kind: EnsembleKind, steps_used: int, tolerance: float) -> LimitEnsemble:
    """Inverse of write_ensemble_csv; terminal displacements are not stored and read back as nan."""
    seeds, flags, points = [], [], []
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["seed", "converged"]:
            raise ConfigurationError(f"{path} is not an ensemble CSV", fields=["run_dir"])
        for row in reader:
            seeds.append(int(row[0]))
            flags.append(row[1] == "1")
            points.append([float(v) for v in row[2:]])
    return LimitEnsemble(
        kind=kind,
        points=np.asarray(points, dtype=np.float64).reshape(len(seeds), len(header) - 2),
        converged=np.asarray(flags, dtype=bool),
        seeds=seeds,
        steps_used=steps_used,
        tolerance=tolerance,
    )


def write_dataset_csv(dataset: RegressionDataset, path: str | Path) -> Path:
    """Columns: split, x, y."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["split", "x", "y"])
        for split, x, y in dataset.rows():
            writer.writerow([split, format_number(x), format_number(y)])
    return path


def write_rows_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[float | None]]) -> Path:
    """Generic numeric table, e.g. order-check results (h, error, ratio)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])
    return path


def write_json(path: str | Path, document: dict) -> Path:
    """Pretty JSON with sorted keys and a trailing newline."""
    path = Path(path)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"Cannot read {path}", fields=["run_dir"], raw_error=e)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


async def save_request_to_tempfile(request: Request, suffix: str = ".json") -> str:
    """
    Store a streamed experiment config body in a tempfile, checking it as it arrives.

    Every chunk goes both to the file and to the streaming config validator, so a
    non-object document or an unknown top-level key (say "colour") fails while the
    body is still being received. Full schema validation happens afterwards, on
    the stored file.

    Args:
        request (Request): POST /experiments request carrying the config JSON.
        suffix (str, optional): Tempfile suffix (default ".json").

    Returns:
        str: Path of the stored config body.

    Raises:
        ConfigurationError: The body is not a JSON object, is malformed, or names
            an unknown top-level key (HTTP 400).
        ConfigUploadError: The body could not be written (HTTP 500).
    """
    try:
        temp = tempfile.NamedTemporaryFile(delete=False, suffix=suffix)
        validator = streaming_validator()
        received = 0

        try:
            async for chunk in request.stream():
                temp.write(chunk)
                validator.feed(chunk)
                received += len(chunk)
            temp.flush()
            validator.finish()
        finally:
            temp.close()

        logger.debug("Stored %d-byte experiment config in %s", received, temp.name)
        return temp.name

    except OrderLabError:
        raise
    except Exception as e:
        raise ConfigUploadError("Could not store the experiment config body", raw_error=e)
