"""Experiment config generator

Writes ready-to-run experiment configs covering the main acceptance scenarios,
for the CLI (`run --config`) and the `/experiments` endpoint.
"""

import json
from pathlib import Path

RECIPES: dict[str, dict] = {
    # Forward iterates keep fluctuating, backward iterates settle
    "case_quadratic_stability.json": {
        "experiment": "quadratic",
        "modes": ["forward", "backward"],
        "learning_rate": 0.1,
        "steps": 400,
        "seeds": list(range(20)),
        "model": {"noise": {"kind": "gaussian", "scale": 1.0}},
        "stability_window": 200,
    },
    # Backward limits vs the stationary law, 200 seeds
    "case_quadratic_distribution.json": {
        "experiment": "quadratic",
        "modes": ["forward", "backward"],
        "learning_rate": 0.1,
        "steps": 400,
        "seeds": list(range(200)),
        "emit_plots": False,
    },
    "case_intermittent_reset.json": {
        "experiment": "linearized",
        "modes": ["forward", "intermittent"],
        "learning_rate": 0.1,
        "steps": 200,
        "resets": [100],
        "seeds": [0, 1, 2],
        "model": {"hessian": [[2.0, 0.0], [0.0, 0.5]], "minimum": [1.0, -1.0]},
    },
    "case_backward_after_switch.json": {
        "experiment": "linearized",
        "modes": ["forward", "backward-after"],
        "learning_rate": 0.1,
        "steps": 300,
        "switch_step": 150,
        "seeds": [0, 1, 2],
        "model": {"hessian": [[1.0, 0.3], [0.3, 0.8]]},
    },
    "case_two_point.json": {
        "experiment": "two-point",
        "modes": ["forward", "backward"],
        "learning_rate": 1.0,
        "steps": 100,
        "seeds": list(range(50)),
        "model": {"x0": [0.0], "y0": [1.0]},
    },
    "case_regression_square.json": {
        "experiment": "regression",
        "modes": ["forward", "backward"],
        "steps": 1400,
        "seeds": [0, 1],
        "model": {"dataset": "square", "widths": [64, 64]},
        "eval_every": 10,
        "stability_window": 40,
    },
    "case_regression_cos10x.json": {
        "experiment": "regression",
        "modes": ["forward", "backward"],
        "steps": 1400,
        "seeds": [0, 1],
        "model": {"dataset": "cos10x", "widths": [64, 64]},
        "eval_every": 10,
        "stability_window": 40,
    },
    "case_regression_cube.json": {
        "experiment": "regression",
        "modes": ["forward", "backward"],
        "steps": 1400,
        "seeds": [0, 1],
        "model": {"dataset": "cube", "widths": [64, 64]},
        "eval_every": 10,
        "stability_window": 40,
    },
    "case_least_squares_approx_backward.json": {
        "experiment": "least-squares",
        "modes": ["forward", "backward", "approx-backward"],
        "learning_rate": 0.05,
        "steps": 200,
        "batch_size": 8,
        "seeds": [0, 1, 2],
        "model": {"dim": 5, "samples": 80},
    },
    "case_order_average_sweep.json": {
        "experiment": "least-squares",
        "modes": ["forward", "order-average"],
        "learning_rate": 0.05,
        "steps": 200,
        "batch_size": 8,
        "seeds": [0, 1, 2],
        "model": {"dim": 5, "samples": 80},
        "order_average": {"c": 2, "lambda_scales": [0.5, 1.0, 2.0, 4.0]},
    },
}


def write_configs(directory: str | Path = ".") -> list[Path]:
    """
    Write every recipe as a JSON file.

    Args:
        directory (str | Path): Target directory.

    Returns:
        list[Path]: Written files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, config in RECIPES.items():
        path = directory / name
        path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
        print(path)
        written.append(path)
    return written


if __name__ == "__main__":
    write_configs(Path(__file__).parent)
