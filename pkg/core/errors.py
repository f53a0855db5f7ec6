"""
Exception hierarchy for fedleaf.

Every error carries a stable machine-readable ``code`` so the CLI and the
monitoring API can emit the same error record.
"""

from typing import Any, Dict, Optional


class FedLeafError(Exception):
    """Base class for all fedleaf errors."""

    code: str = "fedleaf_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(message)

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable error record."""
        record: Dict[str, Any] = {
            "message": self.message,
            "type": type(self).__name__,
            "code": self.code,
        }
        if self.details:
            record["details"] = self.details
        return record


class ShapeError(FedLeafError):
    """Tensor or layer shapes do not line up."""

    code = "shape_mismatch"


class NonFiniteError(FedLeafError):
    """NaN or Inf produced where finite values are required."""

    code = "non_finite"


class EngineStateError(FedLeafError):
    """Numerical engine used out of order (e.g. backward before forward)."""

    code = "engine_state"


class ArchitectureError(FedLeafError):
    """Inconsistent descriptor, unknown architecture, or unbuildable model."""

    code = "architecture"


class DataError(FedLeafError):
    """Dataset loading, splitting or partitioning failed."""

    code = "data"


class FederationError(FedLeafError):
    """A federated round could not complete."""

    code = "federation"


class ProtocolError(FedLeafError):
    """Malformed frame, unexpected message, or lost connection."""

    code = "protocol"


class StatisticsError(FedLeafError):
    """A statistic is undefined for the given input."""

    code = "statistics"


class ConfigError(FedLeafError):
    """Invalid run configuration."""

    code = "config"


__all__ = [
    "FedLeafError",
    "ShapeError",
    "NonFiniteError",
    "EngineStateError",
    "ArchitectureError",
    "DataError",
    "FederationError",
    "ProtocolError",
    "StatisticsError",
    "ConfigError",
]
