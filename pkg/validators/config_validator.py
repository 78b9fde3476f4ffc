"""
Streaming experiment-config validator.

Config documents arrive either as files (CLI) or as streamed HTTP request
bodies. `StreamingConfigValidator` checks them incrementally with ijson while
they are written to disk: the document must be a JSON object, and unknown
top-level keys are rejected as soon as they are seen, before the full body is
received. Field-level validation happens afterwards in
`validators.config_schema.parse_config`.

Typical usage:

    from validators.config_validator import streaming_validator

    validator = streaming_validator()
    for chunk in request_stream:
        validator.feed(chunk)
    validator.finish()  # Raises ConfigurationError if any issues found
"""
import json
from pathlib import Path

import ijson

from services.errors import ConfigurationError
from validators.config_schema import ExperimentConfig, parse_config

READ_CHUNK = 64 * 1024


def known_top_level_keys() -> set[str]:
    """JSON keys accepted at the top level of a config."""
    return {f.alias or name for name, f in ExperimentConfig.model_fields.items()}


class StreamingConfigValidator:
    """
    Incrementally validates an incoming config document.

    Raises ConfigurationError on the first unknown top-level key or non-object
    document; malformed JSON is reported by `finish()`.
    """

    def __init__(self):
        self._allowed = known_top_level_keys()
        self._seen_keys: list[str] = []
        self._buffer = b""

    def document(self) -> bytes:
        """Bytes received so far."""
        return self._buffer

    @property
    def seen_keys(self) -> list[str]:
        return list(self._seen_keys)

    def feed(self, chunk: bytes):
        """
        Feed a chunk of bytes to the validator.

        Incomplete documents are expected between chunks, so parse errors are
        held back until `finish()`.

        Args:
            chunk (bytes): Next portion of the document.

        Raises:
            ConfigurationError: If the document is not an object or has an unknown top-level key.
        """
        self._buffer += chunk
        try:
            for prefix, event, value in ijson.parse(self._buffer):
                if prefix == "" and event not in ("start_map", "map_key", "end_map"):
                    raise ConfigurationError("Config must be a JSON object")
                if prefix == "" and event == "map_key" and value not in self._seen_keys:
                    if value not in self._allowed:
                        raise ConfigurationError(f"Unknown config key '{value}'", fields=[value])
                    self._seen_keys.append(value)
        except ijson.JSONError:
            # The chunk may be incomplete
            pass

    def finish(self):
        """
        Complete validation after the last chunk.

        Raises:
            ConfigurationError: If the JSON is malformed, empty or lacks the `experiment` key.
        """
        try:
            for _ in ijson.parse(self._buffer):
                pass
        except ijson.JSONError as e:
            raise ConfigurationError("Malformed JSON config", raw_error=e)
        if "experiment" not in self._seen_keys:
            raise ConfigurationError("Config must name an experiment", fields=["experiment"])


def streaming_validator() -> StreamingConfigValidator:
    """
    Create a new StreamingConfigValidator.

    Returns:
        StreamingConfigValidator: A validator ready for `feed()`.
    """
    return StreamingConfigValidator()


def load_config(path: str | Path) -> ExperimentConfig:
    """
    Stream a config file through the validator, then parse it.

    Args:
        path (str | Path): JSON config file.

    Returns:
        ExperimentConfig: The validated config.

    Raises:
        ConfigurationError: On unreadable, malformed or invalid configs.
    """
    validator = streaming_validator()
    try:
        with open(path, "rb") as f:
            while chunk := f.read(READ_CHUNK):
                validator.feed(chunk)
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}", fields=["config"], raw_error=e)
    validator.finish()
    return parse_config(json.loads(validator.document()))
