"""
Experiment configuration schema.

`ExperimentConfig` is the typed form of a run's JSON config. Unknown keys are
rejected at every level; omitted hyperparameters are filled with per-experiment
defaults (see `EXPERIMENT_DEFAULTS`), and mode/experiment combinations are
checked before any run starts.

Typical usage:

    from validators.config_schema import parse_config

    config = parse_config({"experiment": "quadratic", "modes": ["forward", "backward"]})
"""
import hashlib
import json
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from services.errors import ConfigurationError
from services.model_zoo import MAX_HESSIAN_DIM

Experiment = Literal["quadratic", "linearized", "two-point", "least-squares", "regression"]
Mode = Literal["forward", "backward", "intermittent", "backward-after", "approx-backward", "order-average"]

MAX_SEED = 2 ** 64

# (learning_rate, steps, batch_size) per experiment; regression rates depend on the dataset.
EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "quadratic": {"learning_rate": 0.1, "steps": 400, "batch_size": 1},
    "linearized": {"learning_rate": 0.1, "steps": 400, "batch_size": 1},
    "two-point": {"learning_rate": 1.0, "steps": 100, "batch_size": 1},
    "least-squares": {"learning_rate": 0.05, "steps": 200, "batch_size": 8},
    "regression": {"learning_rate": None, "steps": 1400, "batch_size": 1},
}
REGRESSION_RATES = {"square": 0.05, "cos10x": 0.02, "cube": 0.02}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class NoiseSpec(_Strict):
    kind: Literal["gaussian", "uniform-symmetric", "rademacher"] = "gaussian"
    scale: float = Field(1.0, ge=0.0)


class ModelSpec(_Strict):
    """Model parameters; each experiment reads the fields it needs."""
    widths: list[int] = Field(default_factory=lambda: [64, 64])
    activation: Literal["tanh", "identity"] = "tanh"
    dataset: Literal["square", "cos10x", "cube"] = "square"
    hessian: list[list[float]] | None = None
    minimum: list[float] | None = None
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    dim: int = Field(5, ge=1)
    samples: int = Field(80, ge=1)
    design_scale: float = Field(0.2, gt=0.0)
    target_noise: float = Field(0.0, ge=0.0)
    data_seed: int = Field(0, ge=0)
    x0: list[float] = Field(default_factory=lambda: [0.0])
    y0: list[float] = Field(default_factory=lambda: [1.0])

    @field_validator("widths")
    @classmethod
    def _positive_widths(cls, v: list[int]) -> list[int]:
        if any(w < 1 for w in v):
            raise ValueError("layer widths must be positive")
        return v


class OrderAverageSpec(_Strict):
    c: int = Field(2, ge=1)
    lambda_: float | None = Field(None, alias="lambda", ge=0.0)
    lambda_scales: list[float] = Field(default_factory=list)

    @field_validator("lambda_scales")
    @classmethod
    def _non_negative(cls, v: list[float]) -> list[float]:
        if any(s < 0.0 for s in v):
            raise ValueError("lambda scales must be non-negative")
        return v


class ExperimentConfig(_Strict):
    """
    Validated experiment configuration.

    Attributes mirror the JSON keys documented in README.md; `learning_rate`,
    `steps`, `batch_size` and `start` are filled from the experiment defaults
    when omitted.
    """
    experiment: Experiment
    modes: list[Mode] = Field(default_factory=lambda: ["forward", "backward"], min_length=1)
    learning_rate: float | None = Field(None, gt=0.0)
    steps: int | None = Field(None, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    batch_size: int | None = Field(None, ge=1)
    start: list[float] | None = None
    model: ModelSpec = Field(default_factory=ModelSpec)
    resets: list[int] = Field(default_factory=list)
    switch_step: int | None = Field(None, ge=0)
    order_average: OrderAverageSpec = Field(default_factory=OrderAverageSpec)
    eval_every: int = Field(1, ge=1)
    output_dir: str = "runs"
    contraction_radius: float = Field(1.0, gt=0.0)
    stability_window: int = Field(200, ge=1)
    tolerance: float = Field(1e-10, gt=0.0)
    emit_plots: bool = True
    log_y: bool = True

    @field_validator("seeds")
    @classmethod
    def _seed_range(cls, v: list[int]) -> list[int]:
        if any(s < 0 or s >= MAX_SEED for s in v):
            raise ValueError("seeds must be 64-bit unsigned integers")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be unique")
        return v

    @field_validator("modes")
    @classmethod
    def _unique_modes(cls, v: list[str]) -> list[str]:
        if len(set(v)) != len(v):
            raise ValueError("modes must be unique")
        return v

    @model_validator(mode="after")
    def _finalize(self) -> "ExperimentConfig":
        self._fill_defaults()
        self._check_modes()
        return self

    def _fill_defaults(self) -> None:
        defaults = EXPERIMENT_DEFAULTS[self.experiment]
        if self.learning_rate is None:
            self.learning_rate = (
                REGRESSION_RATES[self.model.dataset] if self.experiment == "regression"
                else defaults["learning_rate"]
            )
        if self.steps is None:
            self.steps = defaults["steps"]
        if self.batch_size is None:
            self.batch_size = defaults["batch_size"]
        if self.start is None:
            self.start = self._default_start()

    def _default_start(self) -> list[float] | None:
        if self.experiment == "quadratic":
            return [1.0]
        if self.experiment == "linearized":
            return [m + 1.0 for m in (self.model.minimum or [0.0] * len(self.hessian_matrix()))]
        if self.experiment == "two-point":
            return [0.5 * (a + b) for a, b in zip(self.model.x0, self.model.y0)]
        if self.experiment == "least-squares":
            return [0.0] * self.model.dim
        # regression: seeded network initialization
        return None

    def hessian_matrix(self) -> list[list[float]]:
        """Linearized-model Hessian; identity of the minimum's dimension by default."""
        if self.model.hessian is not None:
            return self.model.hessian
        d = len(self.model.minimum) if self.model.minimum else 1
        return [[1.0 if i == j else 0.0 for j in range(d)] for i in range(d)]

    def parameter_dim(self) -> int:
        """Dimension of theta for this experiment."""
        if self.experiment == "regression":
            sizes = [1] + list(self.model.widths) + [1]
            return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
        if self.experiment == "least-squares":
            return self.model.dim
        if self.experiment == "two-point":
            return len(self.model.x0)
        if self.experiment == "linearized":
            return len(self.hessian_matrix())
        return 1

    def _check_modes(self) -> None:
        n = self.steps
        if self.start is not None and len(self.start) != self.parameter_dim():
            raise ValueError(f"start must have {self.parameter_dim()} entries")
        if self.experiment == "two-point":
            if len(self.model.x0) != len(self.model.y0) or self.model.x0 == self.model.y0:
                raise ValueError("model.x0 and model.y0 must be distinct points of equal dimension")
            if self.learning_rate != 1.0:
                raise ValueError("two-point operators have learning_rate 1")
        if self.experiment == "linearized":
            H = self.hessian_matrix()
            if any(len(row) != len(H) for row in H):
                raise ValueError("model.hessian must be square")
            if self.model.minimum is not None and len(self.model.minimum) != len(H):
                raise ValueError("model.minimum must match model.hessian")
        if self.experiment == "least-squares" and self.model.samples < self.model.dim:
            raise ValueError("model.samples must be at least model.dim")
        if self.experiment == "quadratic" and not 0.0 < self.learning_rate < 2.0:
            raise ValueError("quadratic learning_rate must lie in (0, 2)")

        # empty resets reduce intermittent to naive backward
        if self.resets:
            if any(b <= a for a, b in zip(self.resets, self.resets[1:])) or self.resets[0] < 1 or self.resets[-1] > n:
                raise ValueError(f"resets must be strictly increasing within [1, {n}]")
        if "backward-after" in self.modes:
            if self.switch_step is None or self.switch_step > n:
                raise ValueError(f"backward-after mode needs switch_step within [0, {n}]")
        if "approx-backward" in self.modes and self.parameter_dim() > MAX_HESSIAN_DIM:
            raise ValueError(
                f"approx-backward needs a dense Hessian; parameter dimension {self.parameter_dim()} "
                f"exceeds {MAX_HESSIAN_DIM}"
            )
        if "order-average" in self.modes:
            if self.experiment not in ("least-squares", "regression"):
                raise ValueError("order-average mode needs a batch-loss experiment")
            if self.batch_size % self.order_average.c != 0:
                raise ValueError("batch_size must be a multiple of order_average.c")
            if self.order_average.lambda_ is None and not self.order_average.lambda_scales:
                raise ValueError("order-average mode needs order_average.lambda or lambda_scales")

    def canonical_json(self) -> str:
        """Stable JSON form used for hashing and the manifest echo."""
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """First 12 hex digits of the SHA-256 of the canonical JSON."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:12]


def _error_fields(error: ValidationError) -> list[str]:
    fields = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"])
        fields.append(path or "<root>")
    return fields


def parse_config(data: Any) -> ExperimentConfig:
    """
    Validate a decoded JSON document into an ExperimentConfig.

    Args:
        data: Decoded JSON (a dict).

    Returns:
        ExperimentConfig: Validated config with defaults filled in.

    Raises:
        ConfigurationError: Listing every offending field path.
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        fields = _error_fields(e)
        details = "; ".join(
            f"{field}: {item['msg']}" for field, item in zip(fields, e.errors())
        )
        raise ConfigurationError(f"Invalid experiment config: {details}", fields=fields, raw_error=e)
