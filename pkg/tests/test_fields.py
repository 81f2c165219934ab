"""Tests for grid fields and particle ensembles"""
import numpy as np
import pytest

from app.core.exceptions import GridError
from app.models.fields import (
    GridGeometry, ParticleEnsemble, ScalarField3, VectorField3, VGrid, require_same_geometry,
)


@pytest.fixture
def geometry() -> GridGeometry:
    return GridGeometry.centered((0.0, 0.0, 0.0), 2.0, 9)


def test_centered_geometry(geometry) -> None:
    assert geometry.spacing == pytest.approx(0.5)
    assert geometry.origin == (-2.0, -2.0, -2.0)
    np.testing.assert_allclose(geometry.upper, [2.0, 2.0, 2.0])
    assert geometry.size == 729
    assert geometry.points().shape == (729, 3)


def test_geometry_rejects_bad_spacing() -> None:
    with pytest.raises(GridError):
        GridGeometry((0.0, 0.0, 0.0), 0.0, (4, 4, 4))
    with pytest.raises(GridError):
        GridGeometry((0.0, 0.0, 0.0), 1.0, (1, 4, 4))


def test_require_same_geometry(geometry) -> None:
    require_same_geometry(geometry, GridGeometry.centered((0.0, 0.0, 0.0), 2.0, 9))
    with pytest.raises(GridError):
        require_same_geometry(geometry, GridGeometry.centered((0.0, 0.0, 0.0), 2.0, 11))


def test_vgrid_covers() -> None:
    grid = VGrid(extent=3.0, nodes_per_axis=7)
    assert grid.covers(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
    assert not grid.covers(np.array([-4.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0]))


def test_linear_function_interpolates_exactly(geometry, rng) -> None:
    field = ScalarField3.from_function(geometry, lambda x, y, z: 1.0 + 2.0 * x - y + 0.5 * z)
    points = rng.uniform(-1.9, 1.9, size=(50, 3))
    expected = 1.0 + 2.0 * points[:, 0] - points[:, 1] + 0.5 * points[:, 2]
    np.testing.assert_allclose(field.interpolate(points), expected, atol=1e-12)


def test_interpolation_outside(geometry) -> None:
    field = ScalarField3.zeros(geometry)
    outside = np.array([[3.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(GridError):
        field.interpolate(outside)
    values = field.interpolate(outside, outside="nan")
    assert np.isnan(values[0])
    assert values[1] == 0.0


def test_field_rejects_nonfinite(geometry) -> None:
    values = np.zeros(geometry.shape)
    values[0, 0, 0] = np.nan
    with pytest.raises(GridError):
        ScalarField3(geometry, values)
    with pytest.raises(GridError):
        ScalarField3(geometry, np.zeros((3, 3, 3)))


def test_from_coordinates_requires_uniform_spacing() -> None:
    axis = np.linspace(0.0, 1.0, 5)
    field = ScalarField3.from_coordinates(axis, axis, axis, np.ones(125))
    assert field.geometry.spacing == pytest.approx(0.25)
    with pytest.raises(GridError):
        ScalarField3.from_coordinates(np.array([0.0, 0.1, 0.3]), axis, axis, np.ones(75))
    with pytest.raises(GridError):
        ScalarField3.from_coordinates(np.linspace(0.0, 2.0, 5), axis, axis, np.ones(125))


def test_save_and_load(tmp_path, geometry, rng) -> None:
    field = ScalarField3(geometry, rng.normal(size=geometry.shape))
    path = tmp_path / "field.bin"
    field.save(path)
    loaded = ScalarField3.load(path)
    assert loaded.geometry.matches(geometry)
    np.testing.assert_array_equal(loaded.values, field.values)


def test_truncated_payload_rejected(geometry) -> None:
    payload = ScalarField3.zeros(geometry).to_bytes()
    with pytest.raises(GridError):
        ScalarField3.from_bytes(payload[:-8])


def test_field_frame_columns(geometry) -> None:
    frame = ScalarField3.zeros(geometry).to_frame()
    assert list(frame.columns) == ["x", "y", "z", "value"]
    assert len(frame) == geometry.size


def test_vector_field_norm(geometry) -> None:
    values = np.zeros((3,) + geometry.shape)
    values[0] = 3.0
    values[1] = 4.0
    field = VectorField3.from_array(geometry, values)
    assert field.sup() == pytest.approx(5.0)
    assert field.node_values().shape == (geometry.size, 3)
    assert (field - field).sup() == 0.0
    assert field.scaled(2.0).sup() == pytest.approx(10.0)


def test_ensemble_weights_are_frozen(rng) -> None:
    ensemble = ParticleEnsemble.from_arrays(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), np.ones(8))
    assert ensemble.count == 8
    assert ensemble.total_mass == pytest.approx(8.0)
    with pytest.raises(ValueError):
        ensemble.weights[0] = 2.0
    with pytest.raises(ValueError):
        ensemble.initial_positions[0, 0] = 1.0


def test_ensemble_rejects_bad_mu(rng) -> None:
    with pytest.raises(ValueError):
        ParticleEnsemble.from_arrays(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(2), mu=0)


def test_modified_coordinates_of_free_particles() -> None:
    x = np.array([[1.0, 0.0, 0.0]])
    v = np.array([[0.5, 0.0, 0.0]])
    ensemble = ParticleEnsemble(x + 2.0 * v, v, np.ones(1), x, v, time=2.0)
    np.testing.assert_allclose(ensemble.z_mod(), x)
    np.testing.assert_allclose(ensemble.v_mod(), v)
    copy = ensemble.copy()
    copy.positions[0, 0] = 10.0
    assert ensemble.positions[0, 0] == pytest.approx(2.0)
