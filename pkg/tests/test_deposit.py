"""Tests for particle deposit and gather kernels"""
import numpy as np
import pytest

from app.core.exceptions import ParticleOutsideMeshError
from app.models.fields import GridGeometry, ScalarField3, VectorField3
from app.physics.deposit import deposit, gather, gather_vector


@pytest.fixture
def geometry() -> GridGeometry:
    return GridGeometry.centered((0.0, 0.0, 0.0), 2.0, 9)


@pytest.mark.parametrize("kernel", ["CIC", "TSC"])
def test_deposit_conserves_mass_and_center(geometry, rng, kernel) -> None:
    positions = rng.uniform(-1.5, 1.5, size=(200, 3))
    masses = rng.uniform(0.5, 1.5, size=200)
    rho = deposit(positions, masses, geometry, kernel=kernel)
    volume = geometry.cell_volume
    assert rho.values.sum() * volume == pytest.approx(masses.sum(), rel=1e-12)
    first_moment = (rho.values.ravel() * volume) @ geometry.points()
    np.testing.assert_allclose(first_moment, masses @ positions, rtol=1e-10, atol=1e-10)


def test_particle_on_node_hits_one_node(geometry) -> None:
    rho = deposit(np.array([[0.5, -1.0, 0.0]]), np.array([2.0]), geometry)
    assert np.count_nonzero(rho.values) == 1
    assert rho.values[5, 2, 4] == pytest.approx(2.0 / geometry.cell_volume)


def test_particle_outside_mesh(geometry) -> None:
    positions = np.array([[0.0, 0.0, 0.0], [2.5, 0.0, 0.0]])
    with pytest.raises(ParticleOutsideMeshError) as excinfo:
        deposit(positions, np.ones(2), geometry, time=3.0)
    assert excinfo.value.particle == 1
    rho = deposit(positions, np.ones(2), geometry, outside="drop")
    assert rho.values.sum() * geometry.cell_volume == pytest.approx(1.0)


def test_tsc_needs_interior_stencil(geometry) -> None:
    with pytest.raises(ParticleOutsideMeshError):
        deposit(np.array([[1.9, 0.0, 0.0]]), np.ones(1), geometry, kernel="TSC")
    with pytest.raises(ValueError):
        deposit(np.zeros((1, 3)), np.ones(1), geometry, kernel="NGP")


def test_cic_gather_is_exact_for_linear_fields(geometry, rng) -> None:
    field = ScalarField3.from_function(geometry, lambda x, y, z: 2.0 * x - 3.0 * y + z + 1.0)
    positions = rng.uniform(-1.9, 1.9, size=(30, 3))
    expected = 2.0 * positions[:, 0] - 3.0 * positions[:, 1] + positions[:, 2] + 1.0
    np.testing.assert_allclose(gather(field, positions), expected, atol=1e-12)


def test_gather_vector_shape(geometry) -> None:
    field = VectorField3.zeros(geometry)
    assert gather_vector(field, np.zeros((4, 3))).shape == (4, 3)
