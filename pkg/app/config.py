"""
App configuration for fedleaf.

Settings carries process-wide defaults loaded from the environment
(prefix FEDLEAF_) and an optional .env file. RunConfig is one run's full
configuration; load_run_config builds it from a KEY=value file plus
command-line overrides, flags winning.
"""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.errors import ConfigError
from core.models import ClientOverrides, DType, FedConfig, SplitSpec


class Settings(BaseSettings):
    """Application settings."""

    model_config = SettingsConfigDict(env_prefix="FEDLEAF_", env_file=".env", case_sensitive=False, extra="ignore")

    # Federation server
    server_host: str = "127.0.0.1"
    server_port: int = 3002
    join_timeout_s: float = 60.0
    connect_timeout_s: float = 30.0
    connect_retries: int = 20

    # Monitoring API
    monitor_host: str = "127.0.0.1"
    monitor_port: Optional[int] = None

    # Output
    output_dir: str = "runs"

    # Logging
    log_level: str = "INFO"
    service_name: str = "fedleaf"


# Global settings instance
settings = Settings()


class Role(str, Enum):
    SIMULATE = "simulate"
    SERVER = "server"
    CLIENT = "client"


class DatasetSource(str, Enum):
    BLOBS = "blobs"
    CSV = "csv"


class RunConfig(BaseModel):
    """Everything needed to reproduce one federation run."""

    model_config = ConfigDict(frozen=True)

    role: Role = Role.SIMULATE
    rank: int = Field(default=0, ge=0)
    world_size: int = Field(default=3, ge=2)
    host: str = Field(default_factory=lambda: settings.server_host)
    port: int = Field(default_factory=lambda: settings.server_port, ge=0, le=65535)

    arch: str = "tiny_mlp"
    dataset: DatasetSource = DatasetSource.BLOBS
    csv_path: Optional[str] = None
    blob_counts: Optional[List[int]] = None
    blob_dim: int = Field(default=16, ge=1)
    blob_separation: float = Field(default=10.0, gt=0.0)

    participation: float = Field(default=1.0, gt=0.0, le=1.0)
    rounds: int = Field(default=50, ge=1)
    local_epochs: int = Field(default=1, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=0.001, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    num_classes: int = Field(default=4, ge=2)
    seed: int = Field(default=0, ge=0)
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    compute_dtype: DType = DType.FLOAT32
    wire_dtype: DType = DType.FLOAT32
    allow_lossy_wire: bool = False
    aggregator: str = "fedavg"
    client_overrides: Dict[int, ClientOverrides] = Field(default_factory=dict)

    output_dir: str = Field(default_factory=lambda: settings.output_dir)
    repetitions: int = Field(default=10, ge=1)
    workers: int = Field(default=1, ge=1)
    monitor_port: Optional[int] = Field(default_factory=lambda: settings.monitor_port)
    log_level: str = Field(default_factory=lambda: settings.log_level)

    @field_validator("compute_dtype", "wire_dtype", mode="before")
    @classmethod
    def parse_dtype(cls, v: Any) -> Any:
        if isinstance(v, str):
            return DType.from_string(v)
        return v

    @model_validator(mode="after")
    def validate_run(self) -> "RunConfig":
        if self.role == Role.CLIENT and not 1 <= self.rank < self.world_size:
            raise ValueError(f"client rank must be in [1, {self.world_size - 1}], got {self.rank}")
        if self.role != Role.CLIENT and self.rank != 0:
            raise ValueError("the server is rank 0")
        if self.dataset == DatasetSource.CSV and not self.csv_path:
            raise ValueError("dataset=csv needs csv_path")
        return self

    @property
    def num_clients(self) -> int:
        """K = world_size - 1."""
        return self.world_size - 1

    def fed_config(self, seed: Optional[int] = None) -> FedConfig:
        """FedConfig for this run; `seed` overrides the base seed (repetitions)."""
        try:
            return FedConfig(
                num_clients=self.num_clients,
                participation=self.participation,
                rounds=self.rounds,
                local_epochs=self.local_epochs,
                batch_size=self.batch_size,
                learning_rate=self.learning_rate,
                momentum=self.momentum,
                num_classes=self.num_classes,
                seed=self.seed if seed is None else seed,
                split=SplitSpec(train_frac=self.train_frac, val_frac=self.val_frac, test_frac=self.test_frac),
                compute_dtype=self.compute_dtype,
                wire_dtype=self.wire_dtype,
                allow_lossy_wire=self.allow_lossy_wire,
                aggregator=self.aggregator,
                client_overrides=self.client_overrides,
            )
        except ValidationError as e:
            raise ConfigError(_first_error(e), {"errors": _error_list(e)}) from e

    def repetition_seeds(self) -> List[int]:
        """seed + i for repetition i."""
        return [self.seed + i for i in range(self.repetitions)]

    def to_manifest(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _error_list(e: ValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()]


def _first_error(e: ValidationError) -> str:
    errors = _error_list(e)
    return f"Invalid configuration: {errors[0]}" if errors else "Invalid configuration"


_ALIASES = {
    "lr": "learning_rate",
    "classes": "num_classes",
    "epochs": "local_epochs",
    "csv": "csv_path",
    "c": "participation",
    "out": "output_dir",
}

_LIST_KEYS = {"blob_counts"}


def normalise_key(key: str) -> str:
    k = key.strip().lower().replace("-", "_")
    if k.startswith("fedleaf_"):
        k = k[len("fedleaf_"):]
    return _ALIASES.get(k, k)


def parse_override(spec: str) -> Tuple[int, Dict[str, str]]:
    """
    Parse 'RANK:key=value[,key=value]' into (rank, {key: value}).

    Example: '2:lr=0.01,epochs=2'
    """
    rank_part, sep, body = spec.partition(":")
    if not sep:
        raise ConfigError(f"override must look like RANK:key=value, got {spec!r}")
    try:
        rank = int(rank_part)
    except ValueError as e:
        raise ConfigError(f"override rank must be an integer, got {rank_part!r}") from e
    values: Dict[str, str] = {}
    for item in filter(None, (p.strip() for p in body.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override entry must be key=value, got {item!r}")
        values[normalise_key(key)] = value.strip()
    return rank, values


def _normalise(raw: Mapping[str, Any]) -> Dict[str, Any]:
    data: Dict[str, Any] = {}
    for key, value in raw.items():
        if value is None:
            continue
        k = normalise_key(key)
        if k in _LIST_KEYS and isinstance(value, str):
            try:
                value = [int(v) for v in value.replace(";", ",").split(",") if v.strip()]
            except ValueError as e:
                raise ConfigError(f"{k} must be a comma-separated list of integers") from e
        data[k] = value
    return data


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    client_overrides: Optional[List[str]] = None,
) -> RunConfig:
    """
    Build a RunConfig from an optional KEY=value file and flag overrides.

    Precedence: flags > file > Settings/environment > field defaults.

    Raises:
        ConfigError: missing file, unknown key or invalid value.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        data.update(_normalise(dotenv_values(p)))
    data.update(_normalise(overrides or {}))

    per_client: Dict[int, Dict[str, str]] = {}
    for spec in client_overrides or []:
        rank, values = parse_override(spec)
        per_client.setdefault(rank, {}).update(values)
    if per_client:
        data["client_overrides"] = per_client

    unknown = set(data) - set(RunConfig.model_fields)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    try:
        cfg = RunConfig(**data)
    except (ValidationError, ValueError) as e:
        if isinstance(e, ValidationError):
            raise ConfigError(_first_error(e), {"errors": _error_list(e)}) from e
        raise ConfigError(str(e)) from e
    # surfaces FedConfig-level errors (lossy wire, override ranks) before anything runs
    cfg.fed_config()
    return cfg
