"""Tests for snapshot persistence"""
import numpy as np
import pytest

from app.core.exceptions import ConfigMismatchError
from app.physics.integrator import run
from app.services.snapshot_store import SnapshotStore


@pytest.fixture
def disk_store(tmp_path, gaussian_spec, small_solver):
    return run(gaussian_spec.scaled(0.05), small_solver, config_hash="abc", directory=tmp_path / "store")


def test_store_round_trip(tmp_path, disk_store) -> None:
    loaded = SnapshotStore.load(tmp_path / "store")
    assert loaded.times == disk_store.times
    assert loaded.mu == 1
    assert loaded.config_hash == "abc"
    original = disk_store.get(2.0)
    restored = loaded.get(2.0)
    np.testing.assert_array_equal(restored.positions, original.positions)
    np.testing.assert_array_equal(restored.grad_phi.stack(), original.grad_phi.stack())
    assert restored.rho.geometry.matches(original.rho.geometry)
    assert len(loaded.conserved_frame()) == 3


def test_ensemble_at_snapshot(disk_store) -> None:
    ensemble = disk_store.ensemble(4.0)
    assert ensemble.time == 4.0
    assert ensemble.total_mass == pytest.approx(float(np.sum(disk_store.weights)))
    np.testing.assert_allclose(ensemble.z_mod(), ensemble.initial_positions, atol=1e-9)


def test_lookup(disk_store) -> None:
    assert disk_store.window(1.5, 4.0) == [2.0, 4.0]
    assert disk_store.horizon == 4.0
    with pytest.raises(KeyError):
        disk_store.get(3.0)


def test_snapshots_must_increase(gaussian_spec, small_solver) -> None:
    store = run(gaussian_spec.scaled(0.05), small_solver)
    with pytest.raises(ValueError):
        store.add(store.get(2.0))


def test_require_hash(disk_store) -> None:
    disk_store.require_hash("abc")
    disk_store.require_hash("")
    with pytest.raises(ConfigMismatchError):
        disk_store.require_hash("def")


def test_missing_store(tmp_path) -> None:
    with pytest.raises(FileNotFoundError):
        SnapshotStore.load(tmp_path / "nowhere")
