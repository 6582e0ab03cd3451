from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from byzfl.exceptions import ConfigurationError


# Base schemas
class BaseSchema(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


def _shorthand(value: Any) -> Any:
    """Allow `"median"` wherever `{"type": "median"}` is expected."""
    if isinstance(value, str):
        return {"type": value}
    return value


def to_configuration_error(exc: ValidationError, prefix: str = "") -> ConfigurationError:
    """Turn the first pydantic error into a ConfigurationError with a dotted field path."""
    first = exc.errors()[0]
    path = ".".join(str(part) for part in first["loc"])
    if prefix:
        path = f"{prefix}.{path}" if path else prefix
    return ConfigurationError(first["msg"], field_path=path or None)


# Model schemas
class ModelConfig(BaseSchema):
    kind: Literal["linear", "logistic", "mlp"] = Field("logistic", alias="type")
    hidden_dim: int = Field(16, ge=1, description="Hidden units (mlp only)")
    activation: Literal["relu", "tanh"] = Field("relu", description="Hidden activation (mlp only)")

    @model_validator(mode="before")
    @classmethod
    def _accept_name(cls, value):
        return _shorthand(value)


class ModelSpec(ModelConfig):
    input_dim: int = Field(..., ge=1)
    num_classes: int = Field(2, ge=1, description="L, number of classes")

    @model_validator(mode="after")
    def _classifier_needs_two_classes(self):
        if self.kind != "linear" and self.num_classes < 2:
            raise ValueError("classifiers need num_classes >= 2")
        return self

    @property
    def param_dim(self) -> int:
        """d: linear → in+1; logistic → in·L+L; mlp → in·h+h + h·L+L."""
        if self.kind == "linear":
            return self.input_dim + 1
        if self.kind == "logistic":
            return self.input_dim * self.num_classes + self.num_classes
        h = self.hidden_dim
        return self.input_dim * h + h + h * self.num_classes + self.num_classes


# Attack schemas
AttackKind = Literal["label_flip", "sign_flip", "noise", "alie", "ipm", "minmax"]

ATTACK_LEVELS: Dict[str, int] = {
    "label_flip": 1,
    "sign_flip": 2,
    "noise": 2,
    "alie": 4,
    "ipm": 4,
    "minmax": 4,
}

_ATTACK_ALIASES = {
    "labelflip": "label_flip",
    "labelflipadversary": "label_flip",
    "signflip": "sign_flip",
    "signflipadversary": "sign_flip",
    "noiseadversary": "noise",
    "alieadversary": "alie",
    "ipmadversary": "ipm",
    "minmaxadversary": "minmax",
}


class AttackConfig(BaseSchema):
    kind: AttackKind = Field(..., alias="type")
    level: Optional[int] = Field(None, ge=1, le=5, description="Taxonomy level, metadata only")

    # noise
    sigma: float = Field(1.0, ge=0, description="Std of the uploaded Gaussian noise")
    noise_mode: Literal["replace", "add"] = "replace"

    # alie
    z_mode: Literal["fixed", "auto"] = "fixed"
    z_max: float = Field(1.0, ge=0)
    direction_sign: Literal[1, -1] = 1

    # ipm
    epsilon: float = Field(0.1, ge=0, description="Magnitude of the negated benign mean")

    # minmax
    perturbation: Literal["neg_std", "neg_unit_mean", "neg_sign"] = "neg_std"
    gamma_init: float = Field(10.0, gt=0)
    gamma_tol: float = Field(1e-5, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _normalize_type(cls, value):
        value = _shorthand(value)
        if isinstance(value, dict) and isinstance(value.get("type"), str):
            name = value["type"].strip().lower()
            value = {**value, "type": _ATTACK_ALIASES.get(name, name)}
        return value

    @property
    def taxonomy_level(self) -> int:
        return self.level if self.level is not None else ATTACK_LEVELS[self.kind]


# Aggregator schemas
AggregatorKind = Literal[
    "mean", "median", "trimmed_mean", "geomed", "krum", "cc", "dnc", "clipped_clustering", "signguard"
]

_AGGREGATOR_ALIASES = {
    "trimmedmean": "trimmed_mean",
    "geometric_median": "geomed",
    "centeredclipping": "cc",
    "centered_clipping": "cc",
    "clippedclustering": "clipped_clustering",
}


class AggregatorConfig(BaseSchema):
    kind: AggregatorKind = Field("mean", alias="type")
    b: Optional[int] = Field(None, ge=0, description="TrimmedMean trim count; defaults to M")
    max_iters: int = Field(100, ge=1, description="GeoMed Weiszfeld iterations")
    eps: float = Field(1e-6, gt=0, description="GeoMed smoothing / stopping tolerance")
    f: Optional[int] = Field(None, ge=0, description="Assumed Byzantine count; defaults to M")
    tau: float = Field(10.0, gt=0, description="CC clipping radius")
    iters: int = Field(3, ge=1, description="CC inner iterations")
    niters: int = Field(1, ge=1, description="DnC repetitions")
    sub_dim: int = Field(1000, ge=1, description="DnC sampled coordinates, clamped to d")
    c: float = Field(1.0, ge=0, description="DnC filtering fraction")
    historical: bool = Field(False, description="ClippedClustering: median over all observed norms")
    lower: float = Field(0.1, gt=0, description="SignGuard lower norm bound")
    upper: float = Field(3.0, gt=0, description="SignGuard upper norm bound")
    coord_frac: float = Field(0.1, gt=0, le=1, description="SignGuard sampled coordinate fraction")
    bucketing: Optional[int] = Field(None, ge=1, description="Bucket size s; None disables bucketing")

    @model_validator(mode="before")
    @classmethod
    def _normalize_type(cls, value):
        value = _shorthand(value)
        if isinstance(value, dict) and isinstance(value.get("type"), str):
            name = value["type"].strip().lower()
            value = {**value, "type": _AGGREGATOR_ALIASES.get(name, name)}
        return value

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.lower >= self.upper:
            raise ValueError("signguard requires lower < upper")
        return self


class DPConfig(BaseSchema):
    epsilon: float = Field(..., gt=0)
    delta: float = Field(..., gt=0, lt=1)
    g_max: float = Field(..., gt=0, description="Assumed bound on update norms")
    batch_b: int = Field(64, ge=1, description="b in the noise calibration")


class TransformConfig(BaseSchema):
    clip_tau: Optional[float] = Field(None, gt=0)
    dp: Optional[DPConfig] = None

    @model_validator(mode="after")
    def _dp_needs_clipping(self):
        if self.dp is not None:
            if self.clip_tau is None:
                raise ValueError("dp requires clip_tau")
            if self.clip_tau > self.dp.g_max:
                raise ValueError("dp requires clip_tau <= g_max")
        return self


# Optimizer schemas
class ClientConfig(BaseSchema):
    lr: float = Field(1.0, ge=0, description="η_l, local learning rate")
    local_steps: int = Field(1, ge=1, description="E_l, local batch steps per round")
    momentum: float = Field(0.0, ge=0, lt=1, description="Client momentum β_c")
    grad_clip: Optional[float] = Field(None, gt=0)
    reset_momentum: bool = Field(False, description="Zero the client momentum every round")


class ClientOptConfig(ClientConfig):
    batch_size: int = Field(64, ge=1)


class ServerOptConfig(BaseSchema):
    type: Literal["SGD"] = "SGD"
    lr: Optional[float] = Field(None, gt=0, description="Shorthand for lr_schedule [[0, lr]]")
    lr_schedule: Optional[List[Tuple[int, float]]] = None
    momentum: float = Field(0.0, ge=0, lt=1, description="Server momentum β_s")

    @field_validator("lr_schedule")
    @classmethod
    def _check_schedule(cls, schedule):
        if schedule is None:
            return schedule
        if not schedule or schedule[0][0] != 0:
            raise ValueError("lr_schedule must start at round 0")
        rounds = [r for r, _ in schedule]
        if any(a >= b for a, b in zip(rounds, rounds[1:])):
            raise ValueError("lr_schedule rounds must be strictly increasing")
        if any(eta <= 0 for _, eta in schedule):
            raise ValueError("lr_schedule rates must be > 0")
        return schedule

    def resolved_schedule(self, default_lr: float = 1.0) -> List[Tuple[int, float]]:
        if self.lr_schedule is not None:
            return list(self.lr_schedule)
        return [(0, self.lr if self.lr is not None else default_lr)]

    def lr_at(self, t: int, default_lr: float = 1.0) -> float:
        """Last schedule entry with round <= t."""
        eta = None
        for start, rate in self.resolved_schedule(default_lr):
            if start <= t:
                eta = rate
        return eta


# Data schemas
class DatasetConfig(BaseSchema):
    type: Literal["synthetic", "csv"] = "synthetic"
    num_classes: int = Field(2, ge=2)
    input_dim: int = Field(10, ge=1)
    per_class: int = Field(500, ge=1)
    sep: float = Field(6.0, gt=0)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.type == "csv" and not self.path:
            raise ValueError("csv datasets need a path")
        return self


class PartitionConfig(BaseSchema):
    type: Literal["iid", "dirichlet"] = "iid"
    alpha: float = Field(1.0, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _accept_name(cls, value):
        return _shorthand(value)


class DataConfig(BaseSchema):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    batch_size: int = Field(64, ge=1)
    test_fraction: Optional[float] = Field(None, gt=0, lt=1)


class ServerConfig(BaseSchema):
    aggregator: AggregatorConfig = Field(default_factory=AggregatorConfig)
    optimizer: ServerOptConfig = Field(default_factory=ServerOptConfig)
    transforms: TransformConfig = Field(default_factory=TransformConfig)


# Trial / experiment schemas
class TrialConfig(BaseSchema):
    global_model: ModelConfig = Field(default_factory=ModelConfig)
    data_config: DataConfig = Field(default_factory=DataConfig)
    num_clients: int = Field(20, ge=1, description="K")
    num_malicious_clients: int = Field(0, ge=0, description="M")
    client_config: ClientConfig = Field(default_factory=ClientConfig)
    server_config: ServerConfig = Field(default_factory=ServerConfig)
    adversary_config: Optional[AttackConfig] = None
    eval_interval: Optional[int] = Field(None, ge=1)
    abort_on_divergence: bool = False
    adversary_sees_noisy: bool = True
    majority_policy: Literal["warn", "reject"] = "warn"
    snapshot: bool = Field(False, description="Write a .npz state snapshot next to the CSV")

    @model_validator(mode="after")
    def _check_counts(self):
        if self.num_malicious_clients > self.num_clients:
            raise ValueError("num_malicious_clients cannot exceed num_clients")
        if self.majority_policy == "reject" and 2 * self.num_malicious_clients >= self.num_clients:
            raise ValueError("num_malicious_clients must be < num_clients / 2")
        return self


class StopConfig(BaseSchema):
    training_round: int = Field(..., ge=0, description="T, communication rounds")


class ExperimentConfig(BaseSchema):
    run: Literal["FEDSGD", "FEDAVG"] = "FEDSGD"
    stop: StopConfig
    seed: int = 0
    repetitions: int = Field(1, ge=1)
    config: Dict[str, Any] = Field(default_factory=dict)


# Output schemas
class RoundRecord(BaseModel):
    round: int
    train_loss: float
    test_acc: float
    elapsed_s: float


class ManifestEntry(BaseModel):
    trial_id: int
    repetition: int
    config: Dict[str, Any]
    csv_path: str
    status: Literal["ok", "diverged", "failed"]
    total_s: float
    partition_repairs: int = 0
    divergent_rounds: int = 0
    error: Optional[str] = None


class TrialSummary(BaseModel):
    trial_id: int
    repetition: int
    config: Dict[str, Any]


class RegistryEntry(BaseModel):
    name: str
    description: str
    annotation: Optional[str] = Field(None, description="Aggregator characteristic or attack taxonomy level")
