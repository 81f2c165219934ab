"""Tests for the leapfrog integrator and field sampling"""
import numpy as np
import pytest

from app.core.exceptions import NumericalError
from app.models.fields import ParticleEnsemble
from app.models.schemas import SolverConfig
from app.physics.integrator import (
    LeapfrogIntegrator, RadialMassProfile, direct_field, field_along_ray, field_sup_series, run,
)


@pytest.fixture
def weak_store(gaussian_spec, small_solver):
    return run(gaussian_spec.scaled(0.05), small_solver, config_hash="abc")


def _pair(mu: int = 1) -> ParticleEnsemble:
    positions = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    velocities = np.array([[0.0, 0.3, 0.0], [0.0, -0.3, 0.0]])
    return ParticleEnsemble.from_arrays(positions, velocities, np.array([1.0, 1.0]), mu=mu)


def test_radial_profile_of_one_shell() -> None:
    profile = RadialMassProfile(np.array([1.0]), np.array([2.0]))
    potential, radial = profile.evaluate(np.array([0.5, 2.0]))
    np.testing.assert_allclose(potential, [-2.0 / (4 * np.pi), -1.0 / (4 * np.pi)])
    np.testing.assert_allclose(radial, [0.0, 2.0 / (16 * np.pi)])


def test_direct_field_of_point_mass() -> None:
    phi, grad = direct_field(np.array([[2.0, 0.0, 0.0]]), np.zeros((1, 3)), np.ones(1))
    assert phi[0] == pytest.approx(-1.0 / (8 * np.pi))
    np.testing.assert_allclose(grad[0], [1.0 / (16 * np.pi), 0.0, 0.0])
    # a particle does not feel itself
    phi, grad = direct_field(np.zeros((1, 3)), np.zeros((1, 3)), np.ones(1))
    assert phi[0] == 0.0


def test_attraction_sign() -> None:
    config = SolverConfig(force_path="direct")
    for mu in (1, -1):
        integrator = LeapfrogIntegrator(config, _pair(mu))
        accel = integrator.acceleration(_pair(mu))
        # mu = +1 pulls the particle at x = 1 toward the origin
        assert np.sign(accel[0, 0]) == -mu


def test_step_is_time_reversible() -> None:
    config = SolverConfig(force_path="direct", softening=0.1)
    start = _pair()
    integrator = LeapfrogIntegrator(config, start)
    forward = integrator.step(start, 0.1)
    back = integrator.step(forward, -0.1)
    np.testing.assert_allclose(back.positions, start.positions, atol=1e-13)
    np.testing.assert_allclose(back.velocities, start.velocities, atol=1e-13)
    assert back.time == pytest.approx(0.0, abs=1e-15)


def test_modified_coordinates_are_discrete_invariants() -> None:
    config = SolverConfig(force_path="direct", softening=0.1)
    ensemble = _pair()
    integrator = LeapfrogIntegrator(config, ensemble)
    for _ in range(20):
        ensemble = integrator.step(ensemble, 0.05)
    np.testing.assert_allclose(ensemble.z_mod(), ensemble.initial_positions, atol=1e-12)
    np.testing.assert_allclose(ensemble.v_mod(), ensemble.initial_velocities, atol=1e-12)
    assert np.max(np.abs(ensemble.modified.w_corr)) > 0.0


def test_changed_weights_are_rejected() -> None:
    ensemble = _pair()
    integrator = LeapfrogIntegrator(SolverConfig(force_path="direct"), ensemble)
    ensemble.weights = np.array([1.0, 2.0])
    with pytest.raises(NumericalError):
        integrator.step(ensemble, 0.1)


def test_schedule_must_not_go_back() -> None:
    ensemble = _pair()
    ensemble.time = 2.0
    integrator = LeapfrogIntegrator(SolverConfig(force_path="direct"), ensemble)
    with pytest.raises(ValueError):
        integrator.advance(ensemble, [1.0])


def test_run_records_every_snapshot(weak_store, small_solver) -> None:
    assert weak_store.times == [1.0, 2.0, 4.0]
    assert weak_store.config_hash == "abc"
    frame = weak_store.conserved_frame()
    assert list(frame["t"]) == [1.0, 2.0, 4.0]
    np.testing.assert_allclose(frame["mass"], frame["mass"].iloc[0], rtol=1e-14)
    energy = frame["energy"].to_numpy()
    assert np.max(np.abs(energy - energy[0])) < 1e-2 * np.max(np.abs(frame["kinetic"]))
    for column in ("momentum_x", "momentum_y", "momentum_z"):
        assert np.max(np.abs(frame[column])) < 1e-10 * frame["mass"].iloc[0]


def test_run_keeps_modified_invariants(weak_store) -> None:
    last = weak_store.modified_log[-1]
    assert last["z_mod_drift"] < 1e-9
    assert last["v_mod_drift"] < 1e-12
    assert last["phi_corr_max"] > 0.0


def test_field_off_is_free_streaming(gaussian_spec, small_solver) -> None:
    config = small_solver.model_copy(update={"field_off": True})
    store = run(gaussian_spec, config)
    snapshot = store.get(4.0)
    expected = store.initial_positions + 4.0 * store.initial_velocities
    np.testing.assert_allclose(snapshot.positions, expected, atol=1e-12)
    np.testing.assert_array_equal(snapshot.phi_corr, 0.0)
    # fields are still recorded
    assert snapshot.grad_phi.sup() > 0.0


def test_field_along_ray(weak_store) -> None:
    series = field_along_ray(weak_store, (0.5, 0.0, 0.0))
    assert series.values.shape == (3, 3)
    assert not series.truncated
    signed = field_along_ray(weak_store, (0.5, 0.0, 0.0), signed=True)
    np.testing.assert_allclose(signed.values, -series.values)
    with pytest.raises(ValueError):
        field_along_ray(weak_store, (0.5, 0.0, 0.0), derivative_order=(1, 1, 0))


def test_field_sup_series(weak_store) -> None:
    times, values = field_sup_series(weak_store)
    np.testing.assert_array_equal(times, [1.0, 2.0, 4.0])
    assert np.all(values > 0.0)
