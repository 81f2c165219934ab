"""Tests for modified characteristics"""
import json
from fractions import Fraction

import numpy as np
import pytest

from app.analysis.characteristics import (
    antiderivatives, build_next_order, eval_XV, first_order, invert_modification,
    modification_jacobian, zero_characteristics,
)
from app.analysis.fitting import PolyhomogeneousFit
from app.models.fields import VectorField3, VGrid
from app.models.schemas import BasisTerm

GRID = VGrid(extent=3.0, nodes_per_axis=7)
G = np.array([0.1, -0.2, 0.05])


def _constant(vector) -> VectorField3:
    geometry = GRID.geometry
    values = np.stack([np.full(geometry.shape, c) for c in vector])
    return VectorField3.from_array(geometry, values)


def _force_fit(terms) -> PolyhomogeneousFit:
    """Fit whose every coefficient is a constant vector"""
    cells = GRID.geometry.size
    basis = [term for term, _ in terms]
    coefficients = np.stack([np.tile(vector, (cells, 1)) for _, vector in terms])
    return PolyhomogeneousFit(
        basis=basis, coefficients=coefficients, stderr=np.zeros_like(coefficients),
        residual=np.zeros((cells, 3)), condition=1.0, window=(10.0, 100.0),
        v_points=GRID.geometry.points(), grid=GRID,
    )


@pytest.mark.parametrize("q", [1, 2, 3, 4])
@pytest.mark.parametrize("p", [0, 1, 2, 3])
def test_antiderivatives_differentiate_back(q, p) -> None:
    assert antiderivatives.verify((q, p))


def test_antiderivative_entries() -> None:
    assert antiderivatives[(1, 0)] == {(0, 1): Fraction(1)}
    assert antiderivatives[(2, 0)] == {(1, 0): Fraction(-1)}
    with pytest.raises(ValueError):
        antiderivatives[(0, 1)]


def test_zero_order_is_identity() -> None:
    mc = zero_characteristics(GRID)
    X, V = eval_XV(mc, 10.0, (0.5, 0.0, 0.0), (0.2, 0.1, 0.0))
    np.testing.assert_array_equal(X, [0.5, 0.0, 0.0])
    np.testing.assert_array_equal(V, [0.2, 0.1, 0.0])


def test_eval_domain() -> None:
    mc = zero_characteristics(GRID)
    with pytest.raises(ValueError):
        eval_XV(mc, 1.5, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        eval_XV(mc, 2.0, (3.0, 0.0, 0.0), (0.0, 0.0, 0.0))


@pytest.mark.parametrize("mu", [1, -1])
def test_first_order_closed_form(mu) -> None:
    mc = first_order(_constant(G), GRID, mu=mu)
    t = 20.0
    X, V = eval_XV(mc, t, (0.5, 0.0, 0.0), (0.2, 0.1, 0.0))
    np.testing.assert_allclose(X, np.array([0.5, 0.0, 0.0]) + mu * np.log(t) * G, atol=1e-12)
    np.testing.assert_allclose(V, np.array([0.2, 0.1, 0.0]) + mu * G / t, atol=1e-12)


def test_next_order_from_limit_force_only() -> None:
    mc = first_order(VectorField3.zeros(GRID.geometry), GRID)
    nxt = build_next_order(mc, _force_fit([(BasisTerm(0, (0, 0, 0), 0), G)]))
    assert nxt.order == 2
    assert not nxt.x_tables and not nxt.v_tables
    np.testing.assert_allclose(nxt.phi_inf_grad.node_values()[0], G)


def test_next_order_tables_integrate_the_force() -> None:
    H = np.array([0.3, 0.0, -0.1])
    mc = first_order(_constant(G), GRID)
    fit = _force_fit([(BasisTerm(0, (0, 0, 0), 0), G), (BasisTerm(1, (0, 0, 0), 0), H)])
    nxt = build_next_order(mc, fit)
    key = BasisTerm(1, (0, 0, 0), 0)
    # d/dt X picks H/t^2 and d/dt V picks -H/t^3
    np.testing.assert_allclose(nxt.x_tables[key].node_values()[0], -H)
    np.testing.assert_allclose(nxt.v_tables[key].node_values()[0], 0.5 * H)
    t, h = 20.0, 1e-4
    x, v = (0.0, 0.0, 0.0), (0.1, 0.0, 0.0)
    dX = (eval_XV(nxt, t + h, x, v)[0] - eval_XV(nxt, t - h, x, v)[0]) / (2 * h)
    np.testing.assert_allclose(dX, G / t + H / t ** 2, rtol=1e-6)


def test_next_order_rejects_high_order_fit() -> None:
    mc = first_order(_constant(G), GRID)
    with pytest.raises(ValueError):
        build_next_order(mc, _force_fit([(BasisTerm(2, (0, 0, 0), 0), G)]))


def test_inversion_recovers_free_coordinates() -> None:
    mc = first_order(_constant(G), GRID)
    t = 10.0
    a, b = np.array([1.0, 0.0, 0.5]), np.array([0.3, -0.2, 0.1])
    X, V = eval_XV(mc, t, a, b)
    x, v = invert_modification(mc, t, X + t * V, V)
    np.testing.assert_allclose(x, a, atol=1e-8)
    np.testing.assert_allclose(v, b, atol=1e-8)


def test_inversion_domain() -> None:
    mc = first_order(_constant(G), GRID)
    with pytest.raises(ValueError):
        invert_modification(mc, 2.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        invert_modification(mc, 10.0, (8.0, 0.0, 0.0), (0.0, 0.0, 0.0))


def test_jacobian_of_constant_shift_is_one() -> None:
    mc = first_order(_constant(G), GRID)
    det = modification_jacobian(mc, 10.0, np.array([[0.5, 0.0, 0.0]]), np.array([[0.1, 0.2, 0.0]]))
    assert det[0] == pytest.approx(1.0, rel=1e-6)


def test_save_tables(tmp_path) -> None:
    mc = build_next_order(
        first_order(_constant(G), GRID),
        _force_fit([(BasisTerm(0, (0, 0, 0), 0), G), (BasisTerm(1, (0, 0, 0), 0), G)]),
    )
    mc.save(tmp_path)
    header = json.loads((tmp_path / "characteristics.json").read_text())
    assert header["order"] == 2
    assert header["x_terms"] == ["q=1,alpha=000,p=0"]
    frame = mc.to_frame()
    assert len(frame) == 2 * GRID.geometry.size
    assert (tmp_path / "characteristics.csv").exists()
