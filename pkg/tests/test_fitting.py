"""Tests for polyhomogeneous fits, decay rates and peel-off"""
import numpy as np
import pytest

from app.analysis.fitting import (
    FitSamples, basis_values, fit_constant_plus_log_over_t, fit_polyhomogeneous, peel_off,
    power_columns, rate_fit,
)
from app.core.exceptions import IllConditionedFitError, PeelOffDivergedError
from app.models.schemas import BasisTerm, ExpansionOrderPolicy

TIMES = np.geomspace(10.0, 1000.0, 12)
BASIS = [BasisTerm(0, (0, 0, 0), 0), BasisTerm(1, (0, 0, 0), 0), BasisTerm(1, (0, 0, 0), 1)]


def _samples(values: np.ndarray) -> FitSamples:
    return FitSamples(TIMES, np.zeros((len(TIMES), 3)), values, np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))


def _series(a: float, b: float, c: float) -> np.ndarray:
    return a + b / TIMES + c * np.log(TIMES) / TIMES


def test_basis_values() -> None:
    term = BasisTerm(2, (1, 0, 0), 1)
    positions = np.array([[2.0, 0.0, 0.0]])
    assert basis_values(term, np.array([np.e]), positions)[0] == pytest.approx(2.0 / np.e ** 2)
    with pytest.raises(ValueError):
        basis_values(term, np.array([np.e]))


def test_polyhomogeneous_fit_recovers_coefficients() -> None:
    values = np.stack([_series(1.0, 2.0, -0.5), _series(-3.0, 0.5, 4.0)], axis=1)
    fit = fit_polyhomogeneous(_samples(values), ExpansionOrderPolicy(n_max=1), basis=BASIS)
    np.testing.assert_allclose(fit.coefficients[:, 0, 0], [1.0, 2.0, -0.5], rtol=1e-8)
    np.testing.assert_allclose(fit.coefficients[:, 1, 0], [-3.0, 0.5, 4.0], rtol=1e-8)
    assert fit.order == 1
    assert fit.residual_norm < 1e-10
    assert fit.window == (pytest.approx(10.0), pytest.approx(1000.0))
    evaluated = fit.evaluate(TIMES, np.zeros((len(TIMES), 3)))
    np.testing.assert_allclose(evaluated[:, :, 0], values, atol=1e-10)


def test_missing_samples_use_masked_fit() -> None:
    values = np.stack([_series(1.0, 2.0, -0.5), _series(-3.0, 0.5, 4.0)], axis=1)
    values[3, 1] = np.nan
    fit = fit_polyhomogeneous(_samples(values), ExpansionOrderPolicy(n_max=1), basis=BASIS)
    np.testing.assert_allclose(fit.coefficients[:, 1, 0], [-3.0, 0.5, 4.0], rtol=1e-8)


def test_fit_refusals() -> None:
    values = _series(1.0, 2.0, 3.0)[:, None].repeat(2, axis=1)
    with pytest.raises(IllConditionedFitError):
        fit_polyhomogeneous(_samples(values), ExpansionOrderPolicy(n_max=1), basis=BASIS,
                            condition_threshold=1.0)
    with pytest.raises(ValueError):
        fit_polyhomogeneous(_samples(values), ExpansionOrderPolicy(n_max=1),
                            basis=[BasisTerm(1, (1, 0, 0), 1)])
    short = FitSamples(TIMES[:4], np.zeros((4, 3)), values[:4], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        fit_polyhomogeneous(short, ExpansionOrderPolicy(n_max=1), basis=BASIS)


def test_fit_frame_columns() -> None:
    values = np.stack([_series(1.0, 2.0, -0.5), _series(-3.0, 0.5, 4.0)], axis=1)
    frame = fit_polyhomogeneous(_samples(values), ExpansionOrderPolicy(n_max=1), basis=BASIS).to_frame()
    assert len(frame) == 6
    assert {"q", "alpha", "p", "coefficient", "stderr"} <= set(frame.columns)


@pytest.mark.parametrize("model, series, exponent, log_power", [
    ("pure_power", lambda t: 5.0 * t ** -2.0, -2.0, None),
    ("power_with_log", lambda t: np.log(t) / t, -1.0, 1),
    ("power_with_log_sq", lambda t: np.log(t) ** 2 * t ** -1.5, -1.5, 2),
])
def test_rate_fit_models(model, series, exponent, log_power) -> None:
    times = np.geomspace(4.0, 400.0, 10)
    report = rate_fit(times, series(times), model=model, quantity="synthetic")
    assert report.exponent == pytest.approx(exponent, abs=1e-9)
    assert report.log_power == log_power
    assert report.residual < 1e-9
    assert not report.vacuous


def test_rate_fit_vacuous_and_errors() -> None:
    times = np.geomspace(2.0, 200.0, 8)
    assert rate_fit(times, np.zeros(8)).vacuous
    with pytest.raises(ValueError):
        rate_fit(times[:5], np.ones(5))
    with pytest.raises(ValueError):
        rate_fit(np.linspace(2.0, 10.0, 8), np.ones(8))
    with pytest.raises(ValueError):
        rate_fit(times, -np.ones(8))
    with pytest.raises(ValueError):
        rate_fit(np.geomspace(0.5, 50.0, 8), np.ones(8), model="power_with_log")
    with pytest.raises(ValueError):
        rate_fit(times, np.ones(8), model="exponential")


def test_peel_off_is_order_independent_on_exact_data() -> None:
    times = np.geomspace(10.0, 1000.0, 10)
    values = 2.0 + 3.0 / times + 5.0 / times ** 2
    columns = power_columns(times, [0, 1, 2])
    for order in ([0, 1, 2], [2, 1, 0]):
        result = peel_off(values, columns, order)
        assert result.coefficients[0] == pytest.approx(2.0, rel=1e-9)
        assert result.coefficients[1] == pytest.approx(3.0, rel=1e-7)
        assert result.coefficients[2] == pytest.approx(5.0, rel=1e-5)
        assert result.residuals[-1] < 1e-9


def test_peel_off_rejects_bad_order() -> None:
    times = np.geomspace(10.0, 1000.0, 10)
    with pytest.raises(ValueError):
        peel_off(np.ones(10), power_columns(times, [0, 1]), [0])


def test_peel_off_divergence() -> None:
    constant = np.ones(10)
    tilted = np.ones(10) + 1e-4 * np.arange(10)
    # nearly collinear columns: the first stage removes far more than the series holds
    with pytest.raises(PeelOffDivergedError):
        peel_off(constant - tilted, {"constant": constant, "tilted": tilted})


def test_constant_plus_log_over_t() -> None:
    times = np.geomspace(10.0, 1000.0, 8)
    values = np.stack([0.5 + 2.0 * np.log(times) / times, -1.0 + 0.0 * times], axis=1)
    a, b, rms = fit_constant_plus_log_over_t(times, values)
    np.testing.assert_allclose(a, [0.5, -1.0], atol=1e-12)
    np.testing.assert_allclose(b, [2.0, 0.0], atol=1e-10)
    assert np.all(rms < 1e-12)
