"""
Pydantic models for the monitoring API, error records and run manifests.
"""

from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from app.__version__ import __version__


class FederationPhase(str, Enum):
    """Lifecycle of a federation as seen by the monitor."""
    IDLE = "idle"
    WAITING_FOR_CLIENTS = "waiting_for_clients"
    TRAINING = "training"
    EVALUATING = "evaluating"
    FINISHED = "finished"
    FAILED = "failed"


class StatusResponse(BaseModel):
    """Live progress of the current run."""
    run_id: Optional[str] = None
    phase: FederationPhase = FederationPhase.IDLE
    arch: Optional[str] = None
    current_round: int = 0
    total_rounds: int = 0
    connected_clients: int = 0
    expected_clients: int = 0
    last_val_accuracy: Optional[float] = None
    last_global_loss: Optional[float] = None
    traffic_bytes: int = 0
    error: Optional[str] = None


class ErrorDetail(BaseModel):
    message: str
    type: str
    code: Optional[str] = None
    details: Optional[Dict[str, Any]] = None


class ErrorResponse(BaseModel):
    """Standardized error wrapper."""
    error: ErrorDetail


class HealthResponse(BaseModel):
    """Health check."""
    status: Literal["healthy"]
    service: str = "fedleaf"
    version: str = __version__


class RunManifest(BaseModel):
    """
    Everything needed to reproduce a run bit-identically: configuration,
    seed, class order, architecture, dtypes and partition sizes.
    """
    run_id: str
    version: str
    seed: int
    repetition: int = 0
    config: Dict[str, Any]
    arch: Dict[str, Any]
    class_names: List[str]
    partition: Dict[str, Any]
    compute_dtype: str
    wire_dtype: str
    lossy_wire: bool = False
    eval_split: str = "test"
    predicted_traffic_bytes: int = Field(ge=0)
    metered_traffic_bytes: int = Field(ge=0)
