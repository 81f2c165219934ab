"""Shared fixtures"""
import numpy as np
import pytest

from app.core.config import settings
from app.models.schemas import InitialDataSpec, SolverConfig
from app.services.stats_service import stats_service


@pytest.fixture
def gaussian_spec() -> InitialDataSpec:
    return InitialDataSpec()


@pytest.fixture
def shifted_spec() -> InitialDataSpec:
    return InitialDataSpec(x_center=(0.4, 0.3, 0.2), v_center=(0.3, 0.2, 0.1))


@pytest.fixture
def bump_spec() -> InitialDataSpec:
    return InitialDataSpec(family="bump", x_widths=(1.5, 1.5, 1.5), v_widths=(1.0, 1.0, 1.0))


@pytest.fixture
def small_solver() -> SolverConfig:
    """Coarse solver settings for fast integration tests"""
    return SolverConfig(
        mesh_nodes=16, particles_x=4, particles_v=4, t_end=4.0,
        snapshot_times=[1.0, 2.0, 4.0], dt_factor=0.05, dt_max=0.5,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def output_dir(tmp_path, monkeypatch):
    """Point settings.output_dir at a temporary directory"""
    monkeypatch.setattr(settings, "output_dir", str(tmp_path))
    return tmp_path


@pytest.fixture(autouse=True)
def fresh_stats():
    stats_service.reset()
    yield
    stats_service.reset()
