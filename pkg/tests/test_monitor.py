import pytest
from fastapi.testclient import TestClient

from app.__version__ import __version__
from app.api.schemas import HealthResponse
from app.config import load_run_config
from app.monitor import create_app
from app.services.federation_service import FederationService
from app.services.observability import RoundTimer, metrics_registry
from conftest import fixed_clock


@pytest.fixture
def service(tmp_path):
    cfg = load_run_config(overrides={"rounds": 1, "repetitions": 1, "output_dir": str(tmp_path), "log_level": "ERROR"})
    return FederationService(cfg, clock=fixed_clock)


def test_health():
    with TestClient(create_app()) as client:
        response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy", "service": "fedleaf", "version": __version__}


def test_status_without_federation():
    with TestClient(create_app()) as client:
        response = client.get("/status")
    assert response.status_code == 503


def test_status_before_and_after_a_run(service):
    with TestClient(create_app(service)) as client:
        idle = client.get("/status").json()
        service.simulate()
        done = client.get("/status").json()
    assert idle["phase"] == "idle"
    assert idle["expected_clients"] == 2
    assert idle["total_rounds"] == 1
    assert done["phase"] == "finished"
    assert done["current_round"] == 1
    assert done["run_id"] == "run00-seed0"


def test_metrics_exposition(service):
    service.simulate()
    with TestClient(create_app(service)) as client:
        response = client.get("/metrics")
    assert response.status_code == 200
    body = response.text
    assert "fed_rounds_total" in body
    assert "fed_traffic_bytes_total" in body


def test_root_lists_endpoints():
    with TestClient(create_app()) as client:
        data = client.get("/").json()
    assert data["status"] == "operational"
    assert set(data["endpoints"]) == {"health", "status", "metrics"}


def test_health_response_reports_package_version():
    assert HealthResponse(status="healthy").version == __version__


def test_round_timer_counts_active_rounds():
    before = metrics_registry.get_sample_value("fed_active_rounds")
    with RoundTimer():
        assert metrics_registry.get_sample_value("fed_active_rounds") == before + 1
    assert metrics_registry.get_sample_value("fed_active_rounds") == before
