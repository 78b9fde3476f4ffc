"""Application main entrypoint

Contains the routes and their controllers.
"""
import logging
import os
from typing import Callable

from fastapi import Depends, FastAPI, Request, Response

from logging_utils.config import setup_logging
from services import __version__
from services.errors import OrderLabError
from services.experiment_runner import ExperimentRunner
from utils.generator_utils import stream_run_progress
from utils.request_utils import error_response, load_config_with_handling, save_request_with_handling
from validators.config_schema import ExperimentConfig

setup_logging()
logger = logging.getLogger(__name__)

app = FastAPI()

RunnerFactory = Callable[[ExperimentConfig], ExperimentRunner]


def get_runner_factory() -> RunnerFactory:
    """
    Dependency provider for experiment runners.

    ORDER_LAB_OUTPUT_DIR, when set, overrides the config's output_dir.

    Returns:
        RunnerFactory: Builds an ExperimentRunner for a validated config.
    """
    output_dir = os.environ.get("ORDER_LAB_OUTPUT_DIR")
    return lambda config: ExperimentRunner(config, output_dir=output_dir)


@app.get("/version")
async def version() -> dict:
    """
    Report the tool name and version.

    Returns:
        dict: {"tool": "iteration-order-lab", "version": <package version>}.
    """
    return {"tool": "iteration-order-lab", "version": __version__}


@app.post("/experiments")
async def run_experiment(
    request: Request,
    runner_factory: RunnerFactory = Depends(get_runner_factory),
) -> Response:
    """
    Stream the config body to a tempfile, validate it and run the experiment.

    Args:
        request (Request): Incoming FastAPI request with a JSON config.
        runner_factory (RunnerFactory): Builds the runner for the config.

    Returns:
        StreamingResponse | Response: NDJSON progress (one line per job, then
        the manifest) on success, or an error response on failure.
    """
    # Step 1: Save the request body to a tempfile
    temp_path_or_response = await save_request_with_handling(request, logger=logger)
    if isinstance(temp_path_or_response, Response):
        return temp_path_or_response

    # Step 2: Validate the full config before any output is written
    config_or_response = load_config_with_handling(temp_path_or_response, logger=logger)
    if isinstance(config_or_response, Response):
        return config_or_response
    try:
        runner = runner_factory(config_or_response)
    except OrderLabError as e:
        logger.error("Cannot build experiment: %s", e.message)
        return error_response(e)

    # Step 3: Run the jobs and stream progress
    return await stream_run_progress(runner)
