"""
FastAPI endpoints for the federation monitor.
"""
from fastapi import APIRouter, Depends, HTTPException, status
from fastapi.responses import Response
from typing import Optional
import logging

from app.api.schemas import HealthResponse, StatusResponse
from app.services.federation_service import FederationService
from app.services.observability import get_metrics
from app.config import settings
from app.__version__ import __version__

logger = logging.getLogger(__name__)

router = APIRouter()

# Global FederationService instance (set by the monitor before serving).
_federation_service: Optional[FederationService] = None


def get_federation_service() -> FederationService:
    """Dependency to get the federation service."""
    if _federation_service is None:
        logger.critical("Federation service is not initialized")
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="Federation service not initialized"
        )
    return _federation_service


def set_federation_service(service: Optional[FederationService]):
    """Set the global federation service instance."""
    global _federation_service
    _federation_service = service


@router.get("/health", response_model=HealthResponse)
async def health_check() -> HealthResponse:
    """Liveness only; the monitor has no upstream dependencies."""
    return HealthResponse(
        status="healthy",
        service=settings.service_name,
        version=__version__
    )


@router.get("/status", response_model=StatusResponse)
async def federation_status(
    service: FederationService = Depends(get_federation_service)
) -> StatusResponse:
    """Phase, round progress, connected clients, latest accuracy and traffic."""
    return service.status()


@router.get("/metrics")
async def metrics() -> Response:
    """
    Prometheus metrics endpoint.

    Returns metrics in Prometheus exposition format.
    """
    metrics_data = get_metrics()
    return Response(
        content=metrics_data,
        media_type="text/plain; version=0.0.4"
    )
