"""Tests for the report API"""
import pytest
from fastapi.testclient import TestClient

from app.analysis.verdicts import make_verdict
from app.main import app
from app.services.report_writer import ReportWriter

API = "/api/v1"


@pytest.fixture
def client(output_dir):
    writer = ReportWriter(output_dir, "h1")
    writer.write(make_verdict("kernel_bound", "linear", True, {"max_bound": 3.1}, {"bound": 21.99}, "h1"))
    writer.write(make_verdict("field_decay", "simulate", False, {}, {}, "h1"))
    with TestClient(app) as client:
        yield client


def test_root(client) -> None:
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["health"] == f"{API}/health"


def test_health(client, output_dir) -> None:
    body = client.get(f"{API}/health").json()
    assert body["status"] == "healthy"
    assert body["reports_available"] is True
    assert body["report_dir"] == str(output_dir / "reports")


def test_stats_count_reports_on_disk(client) -> None:
    body = client.get(f"{API}/stats").json()
    assert (body["total"], body["passed"], body["failed"]) == (2, 1, 1)
    assert body["config_hashes"] == ["h1"]


def test_list_reports(client) -> None:
    body = client.get(f"{API}/reports").json()
    assert body["count"] == 2
    assert [r["tag"] for r in body["reports"]] == ["field_decay", "kernel_bound"]


def test_get_report(client) -> None:
    body = client.get(f"{API}/reports/kernel_bound").json()
    assert body["status"] == "PASS"
    assert body["measured"] == {"max_bound": 3.1}


def test_missing_report(client) -> None:
    response = client.get(f"{API}/reports/nothing_here")
    assert response.status_code == 404
    assert "nothing_here" in response.json()["detail"]


def test_invalid_tag(client) -> None:
    assert client.get(f"{API}/reports/.hidden").status_code == 400


def test_empty_output_dir(output_dir) -> None:
    with TestClient(app) as client:
        assert client.get(f"{API}/health").json()["reports_available"] is False
        assert client.get(f"{API}/reports").json() == {"reports": [], "count": 0}
