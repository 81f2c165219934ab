"""Tests for analytic initial data and quadrature seeding"""
import numpy as np
import pytest

from app.core.exceptions import ConfigError, UnsupportedDerivativeOrderError
from app.models.schemas import InitialDataSpec, PolynomialTerm
from app.physics.initial_data import (
    derivative_orders, evaluate_f0, seed_particles, support_box, weighted_norm,
)


def test_gaussian_peak(gaussian_spec) -> None:
    assert evaluate_f0(gaussian_spec, np.zeros(3), np.zeros(3)) == pytest.approx(1.0)
    assert evaluate_f0(gaussian_spec.scaled(0.05), np.zeros(3), np.zeros(3)) == pytest.approx(0.05)


def test_zero_amplitude_is_identically_zero(gaussian_spec) -> None:
    x = np.ones((4, 3))
    np.testing.assert_array_equal(evaluate_f0(gaussian_spec.scaled(0.0), x, x), np.zeros(4))


@pytest.mark.parametrize("dx, dv", [((1, 0, 0), (0, 0, 0)), ((0, 0, 0), (0, 1, 0)), ((0, 0, 1), (1, 0, 0))])
def test_derivative_matches_finite_difference(shifted_spec, dx, dv) -> None:
    x = np.array([0.3, -0.2, 0.5])
    v = np.array([0.1, 0.4, -0.3])
    h = 1e-5
    # difference along one axis of the mixed derivative
    if sum(dx) and sum(dv):
        shift = np.array(dv, dtype=float) * h
        expected = (
            evaluate_f0(shifted_spec, x, v + shift, dx, (0, 0, 0))
            - evaluate_f0(shifted_spec, x, v - shift, dx, (0, 0, 0))
        ) / (2 * h)
    elif sum(dx):
        shift = np.array(dx, dtype=float) * h
        expected = (evaluate_f0(shifted_spec, x + shift, v) - evaluate_f0(shifted_spec, x - shift, v)) / (2 * h)
    else:
        shift = np.array(dv, dtype=float) * h
        expected = (evaluate_f0(shifted_spec, x, v + shift) - evaluate_f0(shifted_spec, x, v - shift)) / (2 * h)
    assert evaluate_f0(shifted_spec, x, v, dx, dv) == pytest.approx(expected, rel=1e-6)


def test_polynomial_prefactor_derivative() -> None:
    spec = InitialDataSpec(polynomial_prefactor=(PolynomialTerm(powers=(1, 0, 0, 0, 0, 0), coefficient=2.0),))
    x = np.array([0.5, 0.0, 0.0])
    v = np.zeros(3)
    # d/dx1 of 2 x1 e^{-x1^2} is 2 (1 - 2 x1^2) e^{-x1^2}
    expected = 2.0 * (1.0 - 2.0 * 0.25) * np.exp(-0.25)
    assert evaluate_f0(spec, x, v, (1, 0, 0)) == pytest.approx(expected, rel=1e-12)


def test_bump_vanishes_outside_support(bump_spec) -> None:
    assert evaluate_f0(bump_spec, np.array([1.6, 0.0, 0.0]), np.zeros(3)) == 0.0
    assert evaluate_f0(bump_spec, np.zeros(3), np.zeros(3)) == pytest.approx(1.0)


def test_derivative_order_cap(gaussian_spec) -> None:
    with pytest.raises(UnsupportedDerivativeOrderError):
        evaluate_f0(gaussian_spec, np.zeros(3), np.zeros(3), (3, 0, 0), (0, 4, 0))
    with pytest.raises(ValueError):
        evaluate_f0(gaussian_spec, np.zeros(3), np.zeros(3), (-1, 0, 0))


def test_support_box(gaussian_spec, bump_spec) -> None:
    lower, upper = support_box(gaussian_spec)
    np.testing.assert_allclose(upper, 6.0)
    np.testing.assert_allclose(lower, -6.0)
    lower, upper = support_box(bump_spec)
    np.testing.assert_allclose(upper[:3], 1.5)
    with pytest.raises(ConfigError):
        support_box(InitialDataSpec(truncation=None))


def test_seeded_mass_is_exact_for_gaussian(gaussian_spec) -> None:
    ensemble = seed_particles(gaussian_spec, 4, 4)
    assert ensemble.count == 4 ** 6
    assert ensemble.total_mass == pytest.approx(np.pi ** 3, rel=1e-12)
    np.testing.assert_allclose(ensemble.momentum(), 0.0, atol=1e-12)


def test_seeding_is_deterministic(shifted_spec) -> None:
    first = seed_particles(shifted_spec, 4, 5)
    second = seed_particles(shifted_spec, 4, 5)
    np.testing.assert_array_equal(first.positions, second.positions)
    np.testing.assert_array_equal(first.weights, second.weights)


def test_seeding_needs_four_nodes(gaussian_spec) -> None:
    with pytest.raises(ValueError):
        seed_particles(gaussian_spec, 3, 4)


def test_uniform_rule_mass(bump_spec) -> None:
    ensemble = seed_particles(bump_spec, 8, 8, rule_x="uniform", rule_v="uniform")
    gauss = seed_particles(bump_spec, 8, 8)
    assert ensemble.total_mass == pytest.approx(gauss.total_mass, rel=5e-2)


def test_derivative_orders() -> None:
    assert derivative_orders(0) == [(0,) * 6]
    assert len(derivative_orders(1)) == 7
    assert len(derivative_orders(2)) == 28


def test_weighted_norm_of_unit_gaussian(gaussian_spec) -> None:
    report = weighted_norm(gaussian_spec, 0, 0, 0, sampler_resolution=9)
    assert report.value == pytest.approx(1.0)
    assert report.sample_count == 9 ** 6


def test_weighted_norm_grows_with_order(gaussian_spec) -> None:
    low = weighted_norm(gaussian_spec, 0, 2, 2, sampler_resolution=9).value
    high = weighted_norm(gaussian_spec, 2, 2, 2, sampler_resolution=9).value
    assert high > low > 0.0
    with pytest.raises(UnsupportedDerivativeOrderError):
        weighted_norm(gaussian_spec, 7, 0, 0)
