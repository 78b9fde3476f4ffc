import json
from logging import Logger

from fastapi import Request, Response

from services.errors import ConfigurationError, OrderLabError
from utils.io_utils import ConfigUploadError, read_json, save_request_to_tempfile
from validators.config_schema import ExperimentConfig, parse_config


def error_response(e: OrderLabError) -> Response:
    """JSON error body carrying the message and, for config errors, the offending field paths."""
    body = {"error": e.message}
    if isinstance(e, ConfigurationError):
        body["fields"] = e.fields
    return Response(content=json.dumps(body), status_code=e.status_code, media_type="application/json")


async def save_request_with_handling(
    request: Request,
    logger: Logger,
) -> str | Response:
    """
    Store the experiment config body of POST /experiments, or say why it cannot be run.

    Wraps `save_request_to_tempfile`: config problems found while streaming become a
    400 with the offending fields, storage failures a 500, both as JSON error bodies.

    Args:
        request (Request): POST /experiments request.
        logger (logging.Logger): Logger for rejected or failed uploads.

    Returns:
        str | Response: Path of the stored config, or the error response to return.
    """
    try:
        return await save_request_to_tempfile(request)
    except ConfigUploadError as e:
        logger.error("Could not store experiment config: %s", e.raw_error, exc_info=True)
        return error_response(e)
    except OrderLabError as e:
        logger.error("Rejected experiment config while streaming: %s", e.raw_error or e.message)
        return error_response(e)


def load_config_with_handling(path: str, logger: Logger) -> ExperimentConfig | Response:
    """
    Parse a saved config body, turning validation failures into a 400 response.

    Args:
        path (str): Tempfile written by `save_request_with_handling`.
        logger (logging.Logger): Logger for validation errors.

    Returns:
        ExperimentConfig | Response: The config, or an error response.
    """
    try:
        return parse_config(read_json(path))
    except OrderLabError as e:
        logger.error("Invalid experiment config: %s", e.message)
        return error_response(e)
