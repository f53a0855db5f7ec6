"""
Read-only monitoring API for a running federation.

create_app builds the FastAPI application; MonitorServer runs it with
uvicorn on the same event loop as the federation server.
"""

import asyncio
import logging
from contextlib import asynccontextmanager
from typing import Optional

import uvicorn
from fastapi import FastAPI

from app.__version__ import __version__
from app.api.endpoints import router, set_federation_service
from app.config import settings
from app.services.federation_service import FederationService

logger = logging.getLogger(__name__)


def create_app(service: Optional[FederationService] = None) -> FastAPI:
    """
    Create and configure the FastAPI application.

    Args:
        service: Federation whose status is exposed; /status answers 503 without one.
    """

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        set_federation_service(service)
        logger.info(f"Starting {settings.service_name} monitor v{__version__}")
        yield
        set_federation_service(None)
        logger.info("Monitor stopped")

    app = FastAPI(
        title=settings.service_name,
        description="Status and metrics of a federated-averaging run.",
        version=__version__,
        lifespan=lifespan,
    )
    app.include_router(router)

    @app.get("/")
    async def root():
        """Root endpoint with service information."""
        return {
            "service": settings.service_name,
            "version": __version__,
            "status": "operational",
            "endpoints": {
                "health": "/health",
                "status": "/status",
                "metrics": "/metrics",
            },
        }

    return app


class MonitorServer:
    """uvicorn.Server running as a task on the current loop."""

    def __init__(self, service: FederationService, port: int, host: Optional[str] = None):
        config = uvicorn.Config(
            create_app(service),
            host=host or settings.monitor_host,
            port=port,
            log_config=None,
            lifespan="on",
        )
        self.server = uvicorn.Server(config)
        self._task: Optional[asyncio.Task] = None

    async def __aenter__(self) -> "MonitorServer":
        self._task = asyncio.create_task(self.server.serve())
        logger.info("Monitor listening", extra={"port": self.server.config.port})
        return self

    async def __aexit__(self, exc_type, exc, tb) -> None:
        self.server.should_exit = True
        if self._task is not None:
            await self._task
