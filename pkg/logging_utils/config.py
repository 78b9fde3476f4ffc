"""
Logging configuration module.

Provides centralized logging setup for the application and the CLI.
`setup_logging()` attaches a rotating file handler to the root logger, and
optionally a stderr handler with the same format.

Environment:
    ORDER_LAB_LOG_DIR    directory for app.log (default "logs")
    ORDER_LAB_LOG_LEVEL  root level name (default "INFO")

Usage:
    from logging_utils.config import setup_logging
    setup_logging()
"""
import logging
import logging.handlers
import os
import sys
from pathlib import Path

LOG_FORMAT = "[%(asctime)s] [%(levelname)s] %(name)s: %(message)s"
LOG_FILE_NAME = "app.log"


def log_dir() -> Path:
    return Path(os.environ.get("ORDER_LAB_LOG_DIR", "logs"))


def log_level() -> int:
    name = os.environ.get("ORDER_LAB_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def setup_logging(verbose: bool = False) -> logging.Logger:
    """
    Configure application-wide logging.

    - Creates the log directory if needed.
    - Writes to `<log dir>/app.log` through a RotatingFileHandler (5 MB x 5 backups).
    - With `verbose`, also logs to stderr.
    - Calling it again does not duplicate handlers.

    Args:
        verbose (bool): Attach a stderr handler.

    Returns:
        logging.Logger: The root logger.
    """
    logger = logging.getLogger()
    logger.setLevel(log_level())
    formatter = logging.Formatter(LOG_FORMAT)

    if not any(isinstance(h, logging.handlers.RotatingFileHandler) for h in logger.handlers):
        directory = log_dir()
        directory.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            directory / LOG_FILE_NAME, maxBytes=5_000_000, backupCount=5, encoding="utf-8"
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    if verbose and not any(getattr(h, "_order_lab_stderr", False) for h in logger.handlers):
        stream_handler = logging.StreamHandler(sys.stderr)
        stream_handler.setFormatter(formatter)
        stream_handler._order_lab_stderr = True
        logger.addHandler(stream_handler)

    return logger
