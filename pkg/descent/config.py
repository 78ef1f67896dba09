import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt, PositiveFloat, PositiveInt, ValidationError, model_validator

from .errors import ConfigError
from .metrics import MetricKind
from .stepper import FixedRate, LineSearch, StepPolicy, TrustRegion

ModelId = Literal["linear_gaussian", "linear_least_squares", "mlp_gaussian", "mlp_least_squares", "softmax"]
DENSITY_MODELS = ("linear_gaussian", "mlp_gaussian", "softmax")
SPIRAL_CLASSES = 3
# (input_dim, output_dim) of datasets whose shape is fixed by the generator
FIXED_SHAPES = {"sine": (1, 1), "spiral3": (2, SPIRAL_CLASSES)}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: ModelId = "mlp_gaussian"
    width: Optional[PositiveInt] = 16  # hidden width; None gives a linear softmax
    beta: PositiveFloat = 1.0


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    size: PositiveInt = 256
    noise: NonNegativeFloat = 0.1
    input_dim: PositiveInt = 1
    output_dim: PositiveInt = 1
    seed: PositiveInt = 1
    # linreg only: y = A x + b + noise·ε; drawn from the seed when omitted
    weights: Optional[list[list[float]]] = None
    bias: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check_fixed_shape(self):
        shape = FIXED_SHAPES.get(self.name)
        if shape is None:
            return self
        for name, want in zip(("input_dim", "output_dim"), shape):
            if name in self.model_fields_set and getattr(self, name) != want:
                raise ValueError(f"{self.name} data has {name} {want}, got {getattr(self, name)}")
            setattr(self, name, want)
        return self


class PolicyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["trust_region", "fixed_rate", "line_search"] = "trust_region"
    eps: PositiveFloat = 1e-2
    decay: NonNegativeFloat = 0.0
    alpha: PositiveFloat = 0.1
    alpha0: PositiveFloat = 1.0
    shrink: float = Field(0.5, gt=0, lt=1)
    armijo_c: float = Field(1e-4, gt=0, lt=1)
    max_backtracks: NonNegativeInt = 30

    def build(self) -> StepPolicy:
        match self.type:
            case "trust_region":
                return TrustRegion(self.eps, self.decay)
            case "fixed_rate":
                return FixedRate(self.alpha)
            case "line_search":
                return LineSearch(self.alpha0, self.shrink, self.armijo_c, self.max_backtracks)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = ModelConfig()
    dataset: DatasetSpec
    methods: list[MetricKind] = Field(default_factory=lambda: list(MetricKind), min_length=1)
    policy: PolicyConfig = PolicyConfig()
    lam: Optional[NonNegativeFloat] = None  # None: scale-aware default floor
    iterations: PositiveInt = 200
    batch_size: Optional[PositiveInt] = None  # None: full batch
    out_dir: str = "runs"
    seed: PositiveInt = 1
    timing: bool = False  # write measured wall_ms instead of 0

    @model_validator(mode="after")
    def _check_model_matches_data(self):
        classifier = self.model.kind == "softmax"
        if classifier != (self.dataset.name == "spiral3"):
            raise ValueError("the softmax model goes with the spiral3 dataset and only with it")
        if self.batch_size is not None and self.batch_size > self.dataset.size:
            raise ValueError(f"batch_size {self.batch_size} exceeds dataset size {self.dataset.size}")
        if self.model.kind not in DENSITY_MODELS and MetricKind.EMPIRICAL_FISHER in self.methods:
            raise ValueError(f"{self.model.kind} has no density, drop empirical_fisher from methods")
        return self

    def config_hash(self) -> str:
        # output location is not part of the experiment's identity
        payload = self.model_dump(mode="json", exclude={"out_dir"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        data = self.model_dump(mode="json")
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.model_validate_json(text)
        except ValidationError as exc:
            raise ConfigError(f"invalid config {path}:\n{exc}") from exc
