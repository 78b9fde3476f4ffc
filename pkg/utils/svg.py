"""
SVG line plots of per-seed series.

Plots are rendered with matplotlib's object API (no pyplot state) at 960x540
and are a pure function of their inputs: the SVG id salt is fixed and the date
metadata is dropped, so the same series produce byte-identical files.
"""
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from services.errors import EmptyPlotError

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 960, 540
POINTS_PER_INCH = 72
HASH_SALT = "iteration-order-lab"


@dataclass
class PlotSeries:
    label: str
    steps: Sequence[int]
    values: Sequence[float | None]


def _as_arrays(series: PlotSeries, log_y: bool) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(series.steps, dtype=np.float64)
    y = np.array([np.nan if v is None else v for v in series.values], dtype=np.float64)
    if log_y:
        y[~(y > 0.0)] = np.nan
    return x, y


def emit_svg(
        series: Sequence[PlotSeries],
        path: str | Path | None = None,
        log_y: bool = False,
        title: str = "",
        y_label: str = "train loss",
    ) -> str:
    """
    Render one polyline per series with a legend.

    Args:
        series (Sequence[PlotSeries]): Curves sharing the step axis, one per (seed, mode).
        path (str | Path | None): Where to write the SVG, if given.
        log_y (bool): Logarithmic y axis; non-positive values are dropped.
        title (str): Plot title.
        y_label (str): Y axis label.

    Returns:
        str: The SVG document.

    Raises:
        EmptyPlotError: If no series has a drawable point.
    """
    arrays = [(s.label, *_as_arrays(s, log_y)) for s in series]
    if not any(np.any(np.isfinite(y)) for _, _, y in arrays):
        raise EmptyPlotError("Nothing to plot: every series is empty")

    rc = {"svg.hashsalt": HASH_SALT, "svg.fonttype": "none", "path.simplify": False}
    with matplotlib.rc_context(rc):
        fig = Figure(figsize=(WIDTH / POINTS_PER_INCH, HEIGHT / POINTS_PER_INCH), dpi=POINTS_PER_INCH)
        ax = fig.add_subplot()
        for label, x, y in arrays:
            ax.plot(x, y, label=label, linewidth=1.0)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel(y_label)
        if title:
            ax.set_title(title)
        ax.legend(loc="upper right", fontsize="small")
        buffer = io.BytesIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    document = buffer.getvalue().decode("utf-8")

    if path is not None:
        Path(path).write_text(document, encoding="utf-8")
        logger.debug("Wrote plot %s (%d series)", path, len(arrays))
    return document
