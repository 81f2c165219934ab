"""Tests for settings, config hashing and run-config loading"""
import json
from pathlib import Path

import pytest

from app.core.config import Settings, canonical_json, config_hash, load_run_config
from app.core.exceptions import ConfigError
from app.models.schemas import RunConfig


def test_hash_stable_under_key_reordering() -> None:
    """Reordering keys must not change the hash."""
    a = {"solver": {"mu": 1, "t_end": 10.0}, "seed": None}
    b = {"seed": None, "solver": {"t_end": 10.0, "mu": 1}}
    assert canonical_json(a) == canonical_json(b)
    assert config_hash(a) == config_hash(b)


def test_hash_changes_with_content() -> None:
    assert config_hash({"mu": 1}) != config_hash({"mu": -1})


def test_run_config_hash_ignores_output_location() -> None:
    base = RunConfig()
    moved = RunConfig(output_dir="/elsewhere", threads=4)
    assert base.config_hash() == moved.config_hash()
    assert base.config_hash() != RunConfig(seed=7).config_hash()


def test_load_run_config_round_trip(tmp_path) -> None:
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"initial_data": {"amplitude": 0.05}, "solver": {"mu": -1}}), encoding="utf-8")
    config = load_run_config(path)
    assert config.initial_data.amplitude == 0.05
    assert config.solver.mu == -1


def test_malformed_json_reports_line_and_column(tmp_path) -> None:
    path = tmp_path / "bad.json"
    path.write_text('{\n  "solver": {"mu": 1,}\n}', encoding="utf-8")
    with pytest.raises(ConfigError, match="line 2, column"):
        load_run_config(path)


def test_unknown_key_reports_field_path(tmp_path) -> None:
    path = tmp_path / "typo.json"
    path.write_text(json.dumps({"solver": {"mesh_node": 32}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="solver.mesh_node"):
        load_run_config(path)


def test_missing_file() -> None:
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/run.json")


def test_invalid_mu_rejected(tmp_path) -> None:
    path = tmp_path / "mu.json"
    path.write_text(json.dumps({"solver": {"mu": 2}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="solver.mu"):
        load_run_config(path)


def test_deterministic_forces_single_job() -> None:
    assert Settings(threads=8, deterministic=True).n_jobs == 1
    assert Settings(threads=8, deterministic=False).n_jobs == 8
    assert Settings(allowed_origins="a, b").allowed_origins_list == ["a", "b"]


def test_example_config_is_valid() -> None:
    config = load_run_config(Path(__file__).resolve().parents[1] / "config" / "example_run.json")
    assert config.solver.schedule()[-1] <= config.solver.t_end
    assert config.policy.n_max == 2


def test_compose_dockerfiles_exist() -> None:
    root = Path(__file__).resolve().parents[1]
    compose = (root / "docker-compose.yml").read_text()
    dockerfiles = [line.split(":", 1)[1].strip() for line in compose.splitlines()
                   if line.strip().startswith("dockerfile:")]
    assert dockerfiles
    for name in dockerfiles:
        assert (root / name).is_file()
