"""
services.errors

Exception hierarchy shared by every service module.

Each error keeps a safe, human-readable `message`, an HTTP `status_code` for the
API layer, a process `exit_code` for the CLI, and the optional `raw_error` that
caused it so the original exception can be logged later.
"""
from typing import Sequence


class OrderLabError(Exception):
    """
    Base class for all laboratory errors.

    Attributes:
        message (str): Safe, generic message for client consumption.
        status_code (int): HTTP status code, default 500.
        exit_code (int): CLI exit code, default 4 (internal error).
        raw_error (Exception | None): Original exception object for logging purposes.
    """
    status_code = 500
    exit_code = 4

    def __init__(self, message: str = "Internal error", raw_error: Exception | None = None):
        super().__init__(message)
        self.message = message
        self.raw_error = raw_error


class ConfigurationError(OrderLabError):
    """
    Raised when inputs or configuration violate a precondition.

    Attributes:
        fields (list[str]): Offending field paths, when known.
    """
    status_code = 400
    exit_code = 2

    def __init__(
            self,
            message: str = "Invalid configuration",
            fields: Sequence[str] = (),
            raw_error: Exception | None = None,
        ):
        super().__init__(message, raw_error=raw_error)
        self.fields = list(fields)


class DivergenceError(OrderLabError):
    """
    Raised when an iterate stops being finite.

    Attributes:
        step (int): The step whose operator produced the non-finite iterate.
        last_iterate: The last finite iterate before the failure.
        trajectory: The partial trajectory, when the failure happened inside an engine.
    """
    status_code = 422
    exit_code = 3

    def __init__(self, step: int, last_iterate=None, trajectory=None):
        super().__init__(f"Non-finite iterate at step {step}")
        self.step = step
        self.last_iterate = last_iterate
        self.trajectory = trajectory


class CapabilityError(OrderLabError):
    """Raised when an operator or model lacks a field, Jacobian or Hessian."""
    status_code = 400
    exit_code = 2


class InsufficientDataError(OrderLabError):
    """Raised when a statistic or fit has too few usable points."""
    status_code = 422


class ResourceGuardError(OrderLabError):
    """Raised when a request would exceed an enumeration or memory guard."""
    status_code = 400
    exit_code = 2


class PreconditionError(OrderLabError):
    """Raised when an operation is called outside its documented domain."""
    status_code = 400
    exit_code = 2


class EmptyPlotError(OrderLabError):
    """Raised when a plot has no data to draw."""
    status_code = 422
