"""Tests for the free-space Poisson solver and kernel bounds"""
import numpy as np
import pytest

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.models.fields import GridGeometry, ScalarField3
from app.physics.poisson import (
    gaussian_charge_field, gaussian_charge_potential, gradient, kernel_bound_check,
    kernel_integral, laplacian, relative_residual, scaled_kernel_bound_check, solve_freespace,
    solve_freespace_with_report,
)


def _gaussian_source(nodes: int, half_extent: float = 5.0) -> ScalarField3:
    geometry = GridGeometry.centered((0.0, 0.0, 0.0), half_extent, nodes)
    return ScalarField3.from_function(geometry, lambda x, y, z: np.exp(-(x * x + y * y + z * z)))


def test_gaussian_potential_at_origin() -> None:
    assert float(gaussian_charge_potential(np.array(0.0))) == pytest.approx(-0.5)
    assert float(gaussian_charge_potential(np.array(1e-8))) == pytest.approx(-0.5, rel=1e-10)


def test_gaussian_field_is_potential_derivative() -> None:
    r = np.array([0.5, 1.0, 2.0])
    h = 1e-6
    numeric = (gaussian_charge_potential(r + h) - gaussian_charge_potential(r - h)) / (2 * h)
    np.testing.assert_allclose(gaussian_charge_field(r), numeric, rtol=1e-7)
    # far field carries the total mass pi^{3/2}
    assert float(gaussian_charge_field(np.array(10.0))) == pytest.approx(np.pi ** 1.5 / (400.0 * np.pi), rel=1e-10)


def test_spectral_solve_matches_exact_potential() -> None:
    rho = _gaussian_source(33)
    phi, report = solve_freespace_with_report(rho)
    points = rho.geometry.points()
    r = np.linalg.norm(points, axis=1)
    exact = gaussian_charge_potential(r)
    error = np.max(np.abs(phi.values.ravel() - exact))
    assert error < 3e-2 * 0.5
    assert report.boundary_ratio < 1e-6
    assert report.method == "spectral"


def test_potential_decays_like_point_mass() -> None:
    rho = _gaussian_source(33)
    phi = solve_freespace(rho)
    corner = rho.geometry.points()[-1]
    r = np.linalg.norm(corner)
    assert phi.values[-1, -1, -1] == pytest.approx(-np.pi ** 1.5 / (4 * np.pi * r), rel=2e-2)


def test_direct_and_spectral_agree() -> None:
    rho = _gaussian_source(8, half_extent=3.0)
    spectral = solve_freespace(rho, method="spectral")
    direct = solve_freespace(rho, method="direct")
    np.testing.assert_allclose(direct.values, spectral.values, rtol=1e-9, atol=1e-12)


def test_direct_solver_size_limit(monkeypatch) -> None:
    monkeypatch.setattr(settings, "direct_poisson_max_nodes", 4)
    with pytest.raises(ConfigError):
        solve_freespace(_gaussian_source(8), method="direct")


def test_zero_source_and_unknown_method() -> None:
    rho = ScalarField3.zeros(GridGeometry.centered((0.0, 0.0, 0.0), 1.0, 5))
    assert solve_freespace(rho).sup() == 0.0
    with pytest.raises(ValueError):
        solve_freespace(_gaussian_source(8), method="multigrid")


def test_laplacian_of_quadratic() -> None:
    geometry = GridGeometry.centered((0.0, 0.0, 0.0), 1.0, 9)
    phi = ScalarField3.from_function(geometry, lambda x, y, z: x * x + 2 * y * y - z * z)
    np.testing.assert_allclose(laplacian(phi).values[1:-1, 1:-1, 1:-1], 4.0, rtol=1e-10)
    source = ScalarField3(geometry, np.full(geometry.shape, 4.0))
    assert relative_residual(phi, source) < 1e-10
    assert relative_residual(phi, ScalarField3.zeros(geometry)) == 0.0


def test_gradient_of_linear_field() -> None:
    geometry = GridGeometry.centered((0.0, 0.0, 0.0), 1.0, 9)
    phi = ScalarField3.from_function(geometry, lambda x, y, z: 3 * x - y + 0.5 * z)
    grad = gradient(phi)
    np.testing.assert_allclose(grad.components[0].values, 3.0, atol=1e-12)
    np.testing.assert_allclose(grad.components[1].values, -1.0, atol=1e-12)
    np.testing.assert_allclose(grad.components[2].values, 0.5, atol=1e-12)


def test_kernel_integral_at_origin() -> None:
    assert kernel_integral((0.0, 0.0, 0.0)) == pytest.approx(2.0 * np.pi)
    assert kernel_integral((1e-7, 0.0, 0.0)) == pytest.approx(2.0 * np.pi, rel=1e-5)
    assert kernel_integral((0.0, 0.0, 0.0), t=1.0) == pytest.approx(np.pi / 2.0)


@pytest.mark.parametrize("x", [(0.5, 0.0, 0.0), (1.0, 1.0, 0.0), (3.0, -2.0, 4.0), (20.0, 0.0, 0.0)])
def test_kernel_bounds(x) -> None:
    assert 0.0 < kernel_bound_check(x) <= 7.0 * np.pi
    for t in (1.0, 10.0, 100.0):
        assert 0.0 < scaled_kernel_bound_check(x, t) <= 7.0 * np.pi


def test_scaled_kernel_needs_positive_time() -> None:
    with pytest.raises(ValueError):
        scaled_kernel_bound_check((0.0, 0.0, 0.0), 0.0)
