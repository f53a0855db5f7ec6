"""
Federation domain models.

Includes:
- DType — element width shared by compute and wire
- ModelParams — flat, canonically ordered parameter vector (the exchanged w)
- SplitSpec / ClientShard — dataset split fractions and one client's partition
- ClientOverrides / FedConfig — round, local-training and wire settings
- RoundPlan / ClientUpdateResult / RoundRecord — per-round server state
- TrafficSnapshot — metered byte counts
- ConfusionMatrix / ClassMetrics / MetricsReport — evaluation results
- FederationResult — everything a finished run returns

Principles:
- Pydantic v2 with validation & computed fields
- Frozen where the value is exchanged between server and clients
- numpy arrays carried as arbitrary types, never dumped to JSON directly
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    field_validator,
    model_validator,
)

# Guards floor() against products like 0.29 * 100 == 28.999999999999996.
FLOOR_EPSILON = 1e-9


def floor_product(fraction: float, count: int) -> int:
    """floor(fraction * count), robust to binary rounding just below an integer."""
    return int(math.floor(fraction * count + FLOOR_EPSILON))


class DType(str, Enum):
    """IEEE-754 element width used for training and on the wire."""

    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def width(self) -> int:
        """Bytes per element."""
        return 4 if self == DType.FLOAT32 else 8

    @property
    def wire_code(self) -> int:
        """Frame header dtype byte."""
        return 1 if self == DType.FLOAT32 else 2

    @property
    def numpy_dtype(self) -> np.dtype:
        """Little-endian numpy dtype."""
        return np.dtype("<f4") if self == DType.FLOAT32 else np.dtype("<f8")

    @classmethod
    def from_wire(cls, code: int) -> DType:
        if code == 1:
            return cls.FLOAT32
        if code == 2:
            return cls.FLOAT64
        raise ValueError(f"Unknown wire dtype code: {code}")

    @classmethod
    def from_string(cls, value: str) -> DType:
        """Accepts 'float32', 'f32', '32', 'float64', 'f64', '64'."""
        v = (value or "").strip().lower()
        if v in ("float32", "f32", "32", "fp32"):
            return cls.FLOAT32
        if v in ("float64", "f64", "64", "fp64", "double"):
            return cls.FLOAT64
        raise ValueError(f"Unknown dtype: {value!r}")


class ModelParams(BaseModel):
    """Flat parameter vector in canonical layer order, plus its dtype tag."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    arch_name: str
    dtype: DType
    values: np.ndarray

    @model_validator(mode="before")
    @classmethod
    def cast_values(cls, data: Any) -> Any:
        if isinstance(data, dict) and "values" in data and "dtype" in data:
            dtype = data["dtype"]
            if not isinstance(dtype, DType):
                dtype = DType.from_string(str(dtype))
            data = dict(data)
            data["values"] = np.ascontiguousarray(
                np.asarray(data["values"]).reshape(-1), dtype=dtype.numpy_dtype
            )
        return data

    @field_validator("values")
    @classmethod
    def validate_finite(cls, v: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(v)):
            raise ValueError("ModelParams values must be finite")
        return v

    @computed_field
    @property
    def param_count(self) -> int:
        return int(self.values.size)

    @property
    def nbytes(self) -> int:
        """Serialized size at this dtype."""
        return self.param_count * self.dtype.width

    def astype(self, dtype: DType) -> ModelParams:
        """Copy converted to another element width."""
        if dtype == self.dtype:
            return self
        return ModelParams(arch_name=self.arch_name, dtype=dtype, values=self.values)

    def to_log_dict(self) -> Dict[str, Any]:
        return {
            "arch": self.arch_name,
            "dtype": self.dtype.value,
            "param_count": self.param_count,
        }

    def __str__(self) -> str:
        return f"ModelParams({self.arch_name}, {self.param_count} x {self.dtype.value})"


class SplitSpec(BaseModel):
    """Train/validation/test fractions."""

    model_config = ConfigDict(frozen=True)

    train_frac: float = Field(default=0.8, ge=0.0, le=1.0)
    val_frac: float = Field(default=0.1, ge=0.0, le=1.0)
    test_frac: float = Field(default=0.1, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def validate_sum(self) -> SplitSpec:
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"Split fractions must sum to 1 (got {total})")
        return self


class ClientShard(BaseModel):
    """One client's partition P_k of the training indices."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    client_id: int = Field(ge=1, description="Client rank k")
    indices: np.ndarray

    @field_validator("indices", mode="before")
    @classmethod
    def validate_indices(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.int64).reshape(-1)
        if np.any(v < 0):
            raise ValueError("Shard indices must be non-negative")
        return v

    @computed_field
    @property
    def n_k(self) -> int:
        return int(self.indices.size)

    def to_manifest(self, include_indices: bool = False) -> Dict[str, Any]:
        data: Dict[str, Any] = {"client_id": self.client_id, "n_k": self.n_k}
        if include_indices:
            data["indices"] = self.indices.tolist()
        return data


class ClientOverrides(BaseModel):
    """Per-client local-training settings; unset fields use the federation default."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: Optional[float] = Field(default=None, ge=0.0)
    momentum: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    local_epochs: Optional[int] = Field(default=None, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)


class LocalTrainingPlan(BaseModel):
    """Resolved local-training settings for one client."""

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(ge=0.0)
    momentum: float = Field(ge=0.0, lt=1.0)
    local_epochs: int = Field(ge=1)
    batch_size: int = Field(ge=1)


class FedConfig(BaseModel):
    """Federated-averaging run settings; defaults follow the experimental setup table."""

    model_config = ConfigDict(frozen=True)

    num_clients: int = Field(default=2, ge=1, description="K")
    participation: float = Field(default=1.0, gt=0.0, le=1.0, description="C")
    rounds: int = Field(default=50, ge=1, description="T")
    local_epochs: int = Field(default=1, ge=1, description="E")
    batch_size: int = Field(default=32, ge=1, description="B")
    learning_rate: float = Field(default=0.001, ge=0.0, description="eta")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="mu")
    num_classes: int = Field(default=4, ge=2)
    seed: int = Field(default=0, ge=0)
    split: SplitSpec = Field(default_factory=SplitSpec)
    compute_dtype: DType = DType.FLOAT32
    wire_dtype: DType = DType.FLOAT32
    allow_lossy_wire: bool = False
    aggregator: str = "fedavg"
    client_overrides: Dict[int, ClientOverrides] = Field(default_factory=dict)

    @model_validator(mode="after")
    def validate_config(self) -> FedConfig:
        lossy = self.compute_dtype.width > self.wire_dtype.width
        if lossy and not self.allow_lossy_wire:
            raise ValueError(
                f"Sending {self.compute_dtype.value} weights over a "
                f"{self.wire_dtype.value} wire is lossy; set allow_lossy_wire"
            )
        for rank in self.client_overrides:
            if not 1 <= rank <= self.num_clients:
                raise ValueError(f"Override for unknown client rank {rank}")
        return self

    @computed_field
    @property
    def clients_per_round(self) -> int:
        """m = max(floor(C * K), 1)."""
        return max(floor_product(self.participation, self.num_clients), 1)

    @computed_field
    @property
    def world_size(self) -> int:
        return self.num_clients + 1

    @property
    def lossy_wire(self) -> bool:
        return self.compute_dtype.width > self.wire_dtype.width

    def plan_for(self, client_id: int) -> LocalTrainingPlan:
        """Local-training settings for one client, overrides applied."""
        o = self.client_overrides.get(client_id, ClientOverrides())
        return LocalTrainingPlan(
            learning_rate=self.learning_rate if o.learning_rate is None else o.learning_rate,
            momentum=self.momentum if o.momentum is None else o.momentum,
            local_epochs=self.local_epochs if o.local_epochs is None else o.local_epochs,
            batch_size=self.batch_size if o.batch_size is None else o.batch_size,
        )


class RoundPlan(BaseModel):
    """Sampled clients S_t for round t."""

    model_config = ConfigDict(frozen=True)

    round: int = Field(ge=1)
    client_ids: List[int] = Field(min_length=1)

    @field_validator("client_ids")
    @classmethod
    def validate_distinct(cls, v: List[int]) -> List[int]:
        if len(set(v)) != len(v):
            raise ValueError("Sampled client ids must be distinct")
        return v

    @computed_field
    @property
    def m(self) -> int:
        return len(self.client_ids)

    def to_log_dict(self) -> Dict[str, Any]:
        return {"round": self.round, "m": self.m, "sampled": list(self.client_ids)}


class ClientUpdateResult(BaseModel):
    """What a client returns to the server at the end of local training."""

    model_config = ConfigDict(frozen=True)

    client_id: int = Field(ge=1)
    round: int = Field(ge=1)
    n_k: int = Field(ge=1)
    params: ModelParams
    local_loss: float = Field(ge=0.0)
    wall_time_s: float = Field(default=0.0, ge=0.0)

    def to_log_dict(self) -> Dict[str, Any]:
        return {
            "client_id": self.client_id,
            "round": self.round,
            "n_k": self.n_k,
            "local_loss": round(self.local_loss, 6),
            "wall_time_s": round(self.wall_time_s, 4),
            **self.params.to_log_dict(),
        }


class RoundRecord(BaseModel):
    """History entry for one completed round."""

    round: int
    sampled: List[int]
    n_samples: int
    global_loss: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None
    traffic_bytes: int = 0
    wall_time_s: float = 0.0

    def to_row(self) -> Dict[str, Any]:
        """Flat row for CSV output."""
        return {
            "round": self.round,
            "sampled": " ".join(str(c) for c in self.sampled),
            "n_samples": self.n_samples,
            "global_loss": f"{self.global_loss:.6f}",
            "val_loss": "" if self.val_loss is None else f"{self.val_loss:.6f}",
            "val_accuracy": "" if self.val_accuracy is None else f"{self.val_accuracy:.6f}",
            "traffic_bytes": self.traffic_bytes,
            "wall_time_s": f"{self.wall_time_s:.6f}",
        }

    def to_log_dict(self) -> Dict[str, Any]:
        return self.model_dump()


class TrafficSnapshot(BaseModel):
    """Metered byte counts of one endpoint."""

    total_bytes: int = 0
    downlink_bytes: int = 0
    uplink_bytes: int = 0
    frames: int = 0
    per_round: Dict[int, int] = Field(default_factory=dict)

    def round_bytes(self, round_: int) -> int:
        return self.per_round.get(round_, 0)


class ConfusionMatrix(BaseModel):
    """C x C counts; rows are true classes, columns predicted classes."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    class_names: List[str]
    counts: np.ndarray

    @field_validator("counts", mode="before")
    @classmethod
    def coerce_counts(cls, v: Any) -> np.ndarray:
        return np.asarray(v, dtype=np.int64)

    @model_validator(mode="after")
    def validate_counts(self) -> ConfusionMatrix:
        c = len(self.class_names)
        if self.counts.shape != (c, c):
            raise ValueError(f"Counts shape {self.counts.shape} does not match {c} classes")
        if np.any(self.counts < 0):
            raise ValueError("Counts must be non-negative")
        return self

    @computed_field
    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @computed_field
    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        """Samples per true class (row sums)."""
        return self.counts.sum(axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist()}


class ClassMetrics(BaseModel):
    """One-vs-rest scores for a single class."""

    class_name: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    degenerate: bool = False

    @computed_field
    @property
    def support(self) -> int:
        return self.tp + self.fn


class MetricsReport(BaseModel):
    """Macro-averaged classification metrics plus loss and training time."""

    accuracy: float = Field(ge=0.0, le=1.0)
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    micro_precision: float = Field(ge=0.0, le=1.0)
    micro_recall: float = Field(ge=0.0, le=1.0)
    per_class: List[ClassMetrics] = Field(default_factory=list)
    loss: Optional[float] = Field(default=None, ge=0.0)
    eval_loss: Optional[float] = Field(default=None, ge=0.0)
    training_time_min: Optional[float] = Field(default=None, ge=0.0)
    warnings: List[str] = Field(default_factory=list)

    def to_log_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "accuracy": round(self.accuracy, 6),
            "precision": round(self.precision, 6),
            "recall": round(self.recall, 6),
            "f1": round(self.f1, 6),
        }
        if self.loss is not None:
            data["loss"] = round(self.loss, 6)
        if self.training_time_min is not None:
            data["training_time_min"] = round(self.training_time_min, 4)
        return data

    def __str__(self) -> str:
        return (
            f"acc={self.accuracy:.4f} P={self.precision:.4f} "
            f"R={self.recall:.4f} F1={self.f1:.4f}"
        )


class FederationResult(BaseModel):
    """Outcome of run_federation."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    arch_name: str
    rounds: List[RoundRecord]
    final_params: ModelParams
    confusion: ConfusionMatrix
    metrics: MetricsReport
    eval_split: str
    traffic: TrafficSnapshot
    training_time_s: float = Field(ge=0.0)


__all__ = [
    "DType",
    "ModelParams",
    "SplitSpec",
    "ClientShard",
    "ClientOverrides",
    "LocalTrainingPlan",
    "FedConfig",
    "RoundPlan",
    "ClientUpdateResult",
    "RoundRecord",
    "TrafficSnapshot",
    "ConfusionMatrix",
    "ClassMetrics",
    "MetricsReport",
    "FederationResult",
    "floor_product",
]
