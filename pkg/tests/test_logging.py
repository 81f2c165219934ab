"""Tests for the structured log formatter"""
import json
import logging

from app.core.logging import JSONFormatter, get_logger


def _record(**extra) -> logging.LogRecord:
    record = logging.LogRecord("app.test", logging.INFO, __file__, 1, "hello %s", ("world",), None)
    for key, value in extra.items():
        setattr(record, key, value)
    return record


def test_json_formatter_fields() -> None:
    payload = json.loads(JSONFormatter().format(_record()))
    assert payload["message"] == "hello world"
    assert payload["level"] == "INFO"
    assert payload["logger"] == "app.test"
    assert payload["timestamp"].endswith("Z")


def test_json_formatter_extras() -> None:
    payload = json.loads(JSONFormatter().format(_record(config_hash="abc", sim_time=2.5, step=10, other="x")))
    assert payload["config_hash"] == "abc"
    assert payload["sim_time"] == 2.5
    assert payload["step"] == 10
    assert "other" not in payload


def test_get_logger_name() -> None:
    assert get_logger("app.physics").name == "app.physics"
