"""Tests for compactly supported test functions"""
import numpy as np
import pytest

from app.physics.test_functions import ProductBump, VelocityBump, bump_integral


def test_bump_integral() -> None:
    # integral of exp(-1/(1 - s^2)) over (-1, 1) is 0.443993816168...
    assert bump_integral() == pytest.approx(np.e * 0.443993816168, rel=1e-9)


def test_velocity_bump_support() -> None:
    chi = VelocityBump(center=(1.0, 0.0, 0.0), radius=0.5)
    assert float(chi(np.array([1.0, 0.0, 0.0]))) == pytest.approx(1.0)
    assert float(chi(np.array([1.6, 0.0, 0.0]))) == 0.0
    lower, upper = chi.support()
    np.testing.assert_allclose(lower, [0.5, -0.5, -0.5])
    np.testing.assert_allclose(upper, [1.5, 0.5, 0.5])
    assert chi.integral() == pytest.approx((0.5 * bump_integral()) ** 3)


def test_velocity_bump_derivative() -> None:
    chi = VelocityBump(radius=2.0)
    v = np.array([0.3, -0.4, 0.2])
    h = 1e-6
    step = np.array([0.0, h, 0.0])
    numeric = (float(chi(v + step)) - float(chi(v - step))) / (2 * h)
    assert float(chi(v, (0, 1, 0))) == pytest.approx(numeric, rel=1e-6)


def test_product_bump_x_integral() -> None:
    chi = ProductBump(x_radius=2.0, v_center=(0.5, 0.0, 0.0))
    assert chi.x_integral((0.5, 0.0, 0.0)) == pytest.approx((2.0 * bump_integral()) ** 3)
    assert chi.x_integral((2.0, 0.0, 0.0)) == 0.0


def test_product_bump_rule_integrates_the_bump() -> None:
    chi = ProductBump()
    points, weights = chi.x_rule(24)
    assert weights.sum() == pytest.approx(8.0)
    values = chi(points, np.zeros_like(points))
    assert weights @ values == pytest.approx(chi.x_integral((0.0, 0.0, 0.0)), rel=1e-3)
