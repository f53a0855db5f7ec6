"""
Observability module: Configures structured JSON logging and Prometheus metrics.

This module provides:
1.  Structured JSON logging setup with run/round/rank correlation.
2.  Prometheus metrics definitions for rounds, client updates, frames and traffic.
3.  A context manager tracking rounds in progress.
4.  Utility functions to record metrics from round records and metered frames.
"""

import json
import logging
import sys
from contextvars import ContextVar
from typing import Optional

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, generate_latest

from app.config import settings
from core.models import MetricsReport, RoundRecord

run_id_ctx: ContextVar[Optional[str]] = ContextVar("run_id", default=None)
round_ctx: ContextVar[Optional[int]] = ContextVar("round", default=None)
rank_ctx: ContextVar[Optional[int]] = ContextVar("rank", default=None)

metrics_registry = CollectorRegistry()

fed_rounds_total = Counter(
    "fed_rounds_total",
    "Completed federated rounds",
    ["role"],
    registry=metrics_registry,
)

fed_round_duration_seconds = Histogram(
    "fed_round_duration_seconds",
    "Wall time of one federated round",
    buckets=[0.01, 0.05, 0.1, 0.25, 0.5, 1, 2.5, 5, 10, 30, 60],
    registry=metrics_registry,
)

fed_client_updates_total = Counter(
    "fed_client_updates_total",
    "Local updates returned by clients",
    ["status"],  # 'ok' or 'error'
    registry=metrics_registry,
)

fed_traffic_bytes_total = Counter(
    "fed_traffic_bytes_total",
    "Metered frame bytes",
    ["role", "direction"],  # direction: 'downlink' (server->client) or 'uplink'
    registry=metrics_registry,
)

fed_frames_total = Counter(
    "fed_frames_total",
    "Metered frames",
    ["role", "msg_type"],
    registry=metrics_registry,
)

fed_connected_clients = Gauge(
    "fed_connected_clients",
    "Clients that completed JOIN",
    registry=metrics_registry,
)

fed_active_rounds = Gauge(
    "fed_active_rounds",
    "Rounds currently in progress",
    registry=metrics_registry,
)

fed_global_accuracy = Gauge(
    "fed_global_accuracy",
    "Accuracy of the global model on the latest evaluated split",
    registry=metrics_registry,
)

fed_global_loss = Gauge(
    "fed_global_loss",
    "Sample-weighted client loss of the latest round",
    registry=metrics_registry,
)


class RunContextFilter(logging.Filter):
    """Injects run_id, round and rank from context variables unless the call site set them."""

    def filter(self, record):
        if not hasattr(record, "run_id"):
            record.run_id = run_id_ctx.get() or "none"
        if not hasattr(record, "round"):
            record.round = round_ctx.get()
        if not hasattr(record, "rank"):
            record.rank = rank_ctx.get()
        return True


_RESERVED = frozenset(
    (
        "args", "asctime", "created", "exc_info", "exc_text", "filename", "funcName",
        "levelname", "levelno", "lineno", "module", "msecs", "message", "msg", "name",
        "pathname", "process", "processName", "relativeCreated", "stack_info", "thread",
        "threadName", "taskName",
    )
)


class JsonFormatter(logging.Formatter):
    """Formats log records as a single-line JSON string."""

    def format(self, record):
        log_data = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "run_id": getattr(record, "run_id", "none"),
            "round": getattr(record, "round", None),
            "rank": getattr(record, "rank", None),
            "message": record.getMessage(),
        }

        extra = {
            k: v for k, v in record.__dict__.items()
            if k not in log_data and k not in _RESERVED
        }
        log_data.update(extra)

        if record.exc_info:
            log_data["exc_info"] = self.formatException(record.exc_info)

        return json.dumps(log_data, default=str)


def setup_logging(level: Optional[str] = None):
    """
    Configures the root logger for structured JSON logging.
    Removes existing handlers and adds a new one with the JsonFormatter.
    """
    logger = logging.getLogger()
    level_name = (level or settings.log_level).upper()
    logger.setLevel(getattr(logging, level_name, logging.INFO))

    for h in logger.handlers[:]:
        logger.removeHandler(h)

    handler = logging.StreamHandler(sys.stdout)
    handler.addFilter(RunContextFilter())
    handler.setFormatter(JsonFormatter())

    logger.addHandler(handler)

    # Silence overly verbose loggers
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)


def track_round_metrics(record: RoundRecord, role: str = "server"):
    """Record Prometheus metrics for a completed round."""
    fed_rounds_total.labels(role=role).inc()
    fed_round_duration_seconds.observe(record.wall_time_s)
    fed_global_loss.set(record.global_loss)
    if record.val_accuracy is not None:
        fed_global_accuracy.set(record.val_accuracy)


def track_final_metrics(report: MetricsReport):
    fed_global_accuracy.set(report.accuracy)
    if report.loss is not None:
        fed_global_loss.set(report.loss)


def track_frame(role: str, direction: str, msg_type: str, nbytes: int):
    """Count one metered frame."""
    fed_traffic_bytes_total.labels(role=role, direction=direction).inc(nbytes)
    fed_frames_total.labels(role=role, msg_type=msg_type).inc()


def get_metrics() -> bytes:
    """
    Get Prometheus metrics in text format.

    Returns:
        Metrics in Prometheus exposition format
    """
    return generate_latest(metrics_registry)


class RoundTimer:
    """
    Brackets a round's client exchange and counts it as active. Round
    durations reach the histogram through track_round_metrics.

    Usage:
        with RoundTimer():
            # ... run the round ...
    """

    def __enter__(self):
        fed_active_rounds.inc()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        fed_active_rounds.dec()
