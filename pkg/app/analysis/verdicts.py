"""Pass/fail checks turning asymptotic statements into verdict reports"""
from datetime import datetime
from itertools import product
from math import comb, factorial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import CoverageError, GridError
from app.core.logging import get_logger
from app.models.fields import ScalarField3, VGrid, require_same_geometry
from app.models.schemas import (
    BasisTerm, InitialDataSpec, RateFitReport, TailComparison, TailEntry, Verdict,
    VerdictStatus, WeakConvergenceReport, multi_indices,
)
from app.physics.free_transport import linear_tail_gamma_coefficients, linear_weak_series, monomial
from app.physics.poisson import derivative, gradient, solve_freespace
from app.physics.test_functions import ProductBump, VelocityBump
from app.analysis.characteristics import ModifiedCharacteristics, modified_profile_average
from app.analysis.extractor import SelfSimilarExpansion, spatial_average
from app.analysis.fitting import PolyhomogeneousFit, peel_off, power_columns, rate_fit
from app.services.snapshot_store import SnapshotStore

logger = get_logger(__name__)

MIN_PARTICLES_IN_SUPPORT = 64


def make_verdict(tag: str, suite: str, passed: bool, measured: dict, tolerances: dict,
                 config_hash: str, detail: Optional[str] = None, vacuous: bool = False) -> Verdict:
    if vacuous:
        status = VerdictStatus.VACUOUS
    else:
        status = VerdictStatus.PASS if passed else VerdictStatus.FAIL
    verdict = Verdict(
        tag=tag, suite=suite, status=status, measured=measured, tolerances=tolerances,
        config_hash=config_hash, timestamp=datetime.utcnow().isoformat() + "Z", detail=detail,
    )
    logger.info(f"{tag}: {status.value}", extra={"tag": tag, "suite": suite, "config_hash": config_hash})
    return verdict


# ---------------------------------------------------------------------------
# Increments
# ---------------------------------------------------------------------------

def doubling_pairs(times: Sequence[float], rtol: float = 1e-6) -> List[Tuple[float, float]]:
    """(t, 2t) pairs available in a time list"""
    times = sorted(times)
    pairs = []
    for t in times:
        for s in times:
            if abs(s - 2.0 * t) <= rtol * s:
                pairs.append((t, s))
                break
    return pairs


def cauchy_increments(series: Dict[float, float]) -> Tuple[np.ndarray, np.ndarray]:
    """(t, |s(2t) - s(t)|) over every doubling pair of the series"""
    pairs = doubling_pairs(list(series))
    times = np.asarray([t for t, _ in pairs])
    increments = np.asarray([abs(series[s] - series[t]) for t, s in pairs])
    return times, increments


def increment_rate(series: Dict[float, float], model: str, quantity: str) -> RateFitReport:
    times, increments = cauchy_increments(series)
    return rate_fit(times, increments, model, quantity)


# ---------------------------------------------------------------------------
# Tails
# ---------------------------------------------------------------------------

def tail_key(p: int, q: int, gamma: Sequence[int]) -> str:
    return f"p={p},q={q},gamma={''.join(str(g) for g in gamma)}"


def _decompose(coefficients: np.ndarray, x_points: np.ndarray, order: int) -> Tuple[List[tuple], np.ndarray]:
    """Least squares of c(x_j) = sum_{|gamma| <= order} b_gamma x_j^gamma"""
    gammas = [g for k in range(order + 1) for g in multi_indices(k)]
    design = np.stack([monomial(x_points, g) for g in gammas], axis=1)
    if design.shape[0] < design.shape[1]:
        raise ValueError(
            f"Tail decomposition of order {order} needs {design.shape[1]} x points, got {design.shape[0]}"
        )
    solution, _, rank, _ = np.linalg.lstsq(design, coefficients, rcond=None)
    if rank < design.shape[1]:
        raise ValueError("x points do not separate the monomials x^gamma")
    return gammas, solution


def tail_table(spec: InitialDataSpec, density: Callable[[float, np.ndarray], float], n: int,
               x_points: Sequence[Sequence[float]], window: Tuple[float, float],
               points: int = 12, times: Optional[Sequence[float]] = None) -> TailComparison:
    """
    Compare the predicted linear tail of t^3 rho(t, x) with peeled fits.

    At each x the series is peeled in the powers t^{-k}, k <= n + 2; the coefficients
    c_k(x) are then decomposed into b_{k, gamma} x^gamma across the x points.

    Raises:
        PeelOffDivergedError: Residual grew during peel-off
    """
    x_points = np.asarray(x_points, dtype=float)
    if np.any(np.linalg.norm(x_points, axis=1) > 1.0):
        raise ValueError("tail_table needs |x| <= 1 at every sample point")
    if times is None:
        times = np.geomspace(window[0], window[1], points)
    times = np.asarray(times, dtype=float)
    columns = power_columns(times, range(n + 3))

    fitted = np.zeros((n + 1, len(x_points)))
    errors = np.zeros((n + 1, len(x_points)))
    for j, x in enumerate(x_points):
        series = np.asarray([density(t, x) for t in times])
        result = peel_off(series, columns)
        for k in range(n + 1):
            fitted[k, j] = result.coefficients[k]
            errors[k, j] = result.stderr[k]

    predicted = linear_tail_gamma_coefficients(spec, n)
    entries = []
    for k in range(n + 1):
        gammas, solution = _decompose(fitted[k], x_points, k)
        _, error_solution = _decompose(errors[k], x_points, k)
        for gamma, value, error in zip(gammas, solution, error_solution):
            expected = predicted.get((k, tuple(gamma)), 0.0)
            deviation = abs(value - expected)
            entries.append(TailEntry(
                key=tail_key(0, k - sum(gamma), gamma),
                predicted=expected, fitted=float(value), deviation=float(deviation),
                relative_deviation=float(deviation / max(abs(expected), 1e-300)) if expected else float(deviation),
                error_bar=float(abs(error)),
            ))
    return TailComparison(order=n, entries=entries)


def _grad_phi_derivatives(field_components, gamma) -> np.ndarray:
    """d^gamma of each component of a gradient field at v = 0"""
    origin = np.zeros((1, 3))
    values = []
    for component in field_components:
        target = derivative(component, gamma) if sum(gamma) else component
        values.append(float(target.interpolate(origin)[0]))
    return np.asarray(values)


def force_tail_table(store: SnapshotStore, force_fit: PolyhomogeneousFit, x_points: Sequence[Sequence[float]],
                     window: Tuple[float, float], n: int = 1) -> TailComparison:
    """
    Compare t^2 grad phi(t, x) at fixed x with the tail predicted from the self-similar
    force coefficients: sum (1/gamma!) d^gamma grad Phi_{p,q}(0) x^gamma log^p(t)/t^{|gamma|+q}.
    """
    if force_fit.grid is None:
        raise ValueError("Force fit must carry its velocity grid")
    times = np.asarray(store.window(*window))
    geometry = force_fit.grid.geometry
    fields = {}
    for term in force_fit.basis:
        coefficient = np.nan_to_num(force_fit.coefficient(term))
        fields[(term.q, term.p)] = [
            ScalarField3(geometry, coefficient[:, c].reshape(geometry.shape)) for c in range(3)
        ]

    powers = [(k, p) for k in range(n + 2) for p in range(k + 1)]
    columns = {key: np.log(times) ** key[1] / times ** key[0] for key in powers}
    entries = []
    for x in np.asarray(x_points, dtype=float):
        series = np.stack([
            s.time ** 2 * s.grad_phi.interpolate(x[None, :])[0] for s in (store.get(t) for t in times)
        ])
        for c in range(3):
            result = peel_off(series[:, c], columns)
            for (k, p) in powers:
                if k > n:
                    continue
                expected = 0.0
                for q in range(k + 1):
                    for gamma in (g for order in range(k - q + 1) for g in multi_indices(order)):
                        if sum(gamma) + q != k or (q, p) not in fields:
                            continue
                        scale = float(np.prod([factorial(g) for g in gamma]))
                        expected += _grad_phi_derivatives(fields[(q, p)], gamma)[c] * monomial(x[None, :], gamma)[0] / scale
                value = result.coefficients[(k, p)]
                deviation = abs(value - expected)
                entries.append(TailEntry(
                    key=f"x={x.tolist()},k={k},p={p},component={c}",
                    predicted=float(expected), fitted=float(value), deviation=float(deviation),
                    relative_deviation=float(deviation / abs(expected)) if expected else float(deviation),
                    error_bar=float(result.stderr[(k, p)]),
                ))
    return TailComparison(order=n, entries=entries)


# ---------------------------------------------------------------------------
# Density and force coefficients
# ---------------------------------------------------------------------------

def density_force_link(density_fit: SelfSimilarExpansion, force_fit: PolyhomogeneousFit,
                       pairs: Sequence[Tuple[int, int]] = ((0, 0), (1, 0), (1, 1)),
                       boundary_cells: int = 2) -> TailComparison:
    """
    Solve Laplacian Phi_{q,p} = F_{q,p} for each density coefficient and compare grad Phi
    with the force coefficient of the same (q, p) on interior nodes.

    Raises:
        GridError: Density and force fits live on different grids
    """
    if force_fit.grid is None:
        raise GridError("Force fit has no velocity grid")
    require_same_geometry(density_fit.grid.geometry, force_fit.grid.geometry)
    geometry = density_fit.grid.geometry
    interior = tuple(slice(boundary_cells, n - boundary_cells) for n in geometry.shape)
    entries = []
    for q, p in pairs:
        if (q, p) not in density_fit.coefficients:
            continue
        term = BasisTerm(q, (0, 0, 0), p)
        if term not in force_fit.basis:
            continue
        grad = gradient(solve_freespace(density_fit.coefficients[(q, p)])).stack()
        fitted = force_fit.coefficient(term).T.reshape((3,) + tuple(geometry.shape))
        fitted_error = force_fit.error_bar(term).T.reshape((3,) + tuple(geometry.shape))
        density_error = density_fit.stderr[(q, p)]
        # potential of the density error bound propagates to a gradient bound
        propagated = gradient(solve_freespace(
            ScalarField3(geometry, np.abs(density_error.values)))).norm()

        predicted_inner = grad[(slice(None),) + interior]
        fitted_inner = fitted[(slice(None),) + interior]
        finite = np.all(np.isfinite(fitted_inner), axis=0)
        if not np.any(finite):
            continue
        diff = np.linalg.norm(predicted_inner - fitted_inner, axis=0)[finite]
        scale = float(np.max(np.linalg.norm(predicted_inner, axis=0)[finite]))
        error_bar = float(
            np.max(np.nan_to_num(np.linalg.norm(fitted_error[(slice(None),) + interior], axis=0))[finite])
            + np.max(propagated[interior][finite])
        )
        deviation = float(np.max(diff))
        entries.append(TailEntry(
            key=f"q={q},p={p}", predicted=scale,
            fitted=float(np.max(np.linalg.norm(fitted_inner, axis=0)[finite])),
            deviation=deviation,
            relative_deviation=deviation / scale if scale > 0 else deviation,
            error_bar=error_bar,
        ))
    return TailComparison(order=max((q for q, _ in pairs), default=0), entries=entries)


# ---------------------------------------------------------------------------
# Weak convergence
# ---------------------------------------------------------------------------

def weak_convergence_test(spec: InitialDataSpec, beta: Sequence[int], v_bar: Sequence[float],
                          test_fn: ProductBump, times: Sequence[float], rate_model: str = "pure_power",
                          exact_limit: Optional[float] = None) -> WeakConvergenceReport:
    """
    Linear weak convergence: the shearing-frame series against its limit, with the
    decay rate of |s(t) - limit|.

    The comparison limit is the one evaluated on the series' own quadrature rule so
    quadrature bias cancels; exact_limit, when given, is only recorded.
    """
    beta = tuple(int(b) for b in beta)
    if sum(beta) > 2:
        raise ValueError(f"|beta| must be <= 2, got {beta}")
    values, limit = linear_weak_series(spec, beta, v_bar, test_fn, times)
    deviations = np.abs(values - limit)
    vacuous = bool(np.all(values == 0.0) and limit == 0.0)
    rate = None if vacuous else rate_fit(times, deviations, rate_model, f"weak beta={beta}")
    scale = abs(exact_limit) if exact_limit else abs(limit)
    return WeakConvergenceReport(
        beta=beta, v_bar=tuple(float(c) for c in v_bar), times=[float(t) for t in times],
        values=values.tolist(), limit=float(limit if exact_limit is None else exact_limit),
        final_deviation=float(deviations[-1]),
        final_relative_deviation=float(deviations[-1] / scale) if scale > 0 else float(deviations[-1]),
        rate=rate, vacuous=vacuous,
    )


def sheared_test_derivative(test_fn: ProductBump, u: np.ndarray, v: np.ndarray,
                            beta: Sequence[int], t: float) -> np.ndarray:
    """
    (-G)^beta of chi(x - t v_bar, v) with G = t grad_x + grad_v, at u = x - t v_bar:
    (-1)^|beta| sum_{gamma <= beta} C(beta, gamma) t^|gamma| d_u^gamma d_v^(beta - gamma) chi(u, v)
    """
    beta = tuple(int(b) for b in beta)
    total = np.zeros(len(u))
    for gamma in product(*(range(b + 1) for b in beta)):
        rest = tuple(b - g for b, g in zip(beta, gamma))
        weight = np.prod([comb(b, g) for b, g in zip(beta, gamma)]) * t ** sum(gamma)
        total += weight * test_fn(u, v, gamma, rest)
    return (-1) ** sum(beta) * total


def nonlinear_weak_series(store: SnapshotStore, beta: Sequence[int], v_bar: Sequence[float],
                          test_fn: ProductBump, v_grid: VGrid, times: Sequence[float],
                          estimator: str = "spatial_average", u_nodes: int = 12) -> np.ndarray:
    """
    Shearing-frame series of a nonlinear run.

    spatial_average: s(t) = integral of chi(u, v_bar + u/t) d^beta Q(t, v_bar + u/t) du with Q
    binned from the snapshot over |x - t v| <= t. particles: s(t) = t^3 sum w_i (-G)^beta chi
    evaluated at the particle in the shearing frame; refuses supports holding too few particles.

    Raises:
        CoverageError: Fewer than 64 particles inside the test support (particles estimator)
    """
    beta = tuple(int(b) for b in beta)
    v_bar = np.asarray(v_bar, dtype=float)
    values = []
    u_points, u_weights = test_fn.x_rule(u_nodes)
    for t in times:
        if estimator == "spatial_average":
            q = spatial_average(store, t, v_grid).field
            if sum(beta):
                q = derivative(q, beta)
            velocities = v_bar + u_points / t
            q_values = q.interpolate(velocities, outside="nan")
            integrand = test_fn(u_points, velocities) * np.nan_to_num(q_values)
            values.append(float(u_weights @ integrand))
        elif estimator == "particles":
            snapshot = store.get(t)
            u = snapshot.positions - t * v_bar
            inside = int(np.sum(test_fn(u, snapshot.velocities) != 0.0))
            if inside < MIN_PARTICLES_IN_SUPPORT:
                raise CoverageError(f"Only {inside} particles inside the test support at t={t:g}")
            chi = sheared_test_derivative(test_fn, u, snapshot.velocities, beta, t)
            values.append(float(t ** 3 * (store.weights @ chi)))
        else:
            raise ValueError(f"Unknown weak estimator: {estimator}")
    return np.asarray(values)


def nonlinear_weak_limit(q_inf: ScalarField3, beta: Sequence[int], v_bar: Sequence[float],
                         test_fn: ProductBump) -> float:
    """d^beta Q_inf(v_bar) times the x-integral of the test function at v_bar"""
    beta = tuple(int(b) for b in beta)
    field = derivative(q_inf, beta) if sum(beta) else q_inf
    value = float(field.interpolate(np.asarray(v_bar, dtype=float)[None, :])[0])
    return value * test_fn.x_integral(v_bar)


def smeared_conservation_law(store: SnapshotStore, mc: ModifiedCharacteristics, t: float,
                             beta: Sequence[int], velocity_test: VelocityBump,
                             time_threshold: float = 4.0, window: float = 0.5) -> float:
    """Integral of A_beta(v) chi(v) dv estimated from the modified profile g_n"""
    return modified_profile_average(
        store, mc, t, velocity_test, (0, 0, 0), beta, jacobian_weighted=True,
        time_threshold=time_threshold, window=window,
    )


# ---------------------------------------------------------------------------
# Modified scattering laws
# ---------------------------------------------------------------------------

def scattering_ordering(store: SnapshotStore, characteristics: Sequence[ModifiedCharacteristics],
                        times: Sequence[float], velocity_tests: Sequence[VelocityBump],
                        time_threshold: float = 4.0, window: float = 0.5
                        ) -> Tuple[Dict[int, Dict[float, float]], Dict[str, bool]]:
    """
    Cauchy increments sup over test cells of |<g_n(2t)> - <g_n(t)>| per order and
    the orderings between consecutive orders at every doubling.

    Returns:
        (increments {order: {t: increment}}, orderings {"g1<g0": bool, ...})
    """
    pairs = doubling_pairs(times)
    increments: Dict[int, Dict[float, float]] = {}
    for mc in characteristics:
        averages = {
            t: np.asarray([
                modified_profile_average(store, mc, t, chi, time_threshold=time_threshold, window=window)
                for chi in velocity_tests
            ])
            for t in sorted({t for pair in pairs for t in pair})
        }
        increments[mc.order] = {t: float(np.max(np.abs(averages[s] - averages[t]))) for t, s in pairs}
    orderings = {}
    orders = sorted(increments)
    for low, high in zip(orders, orders[1:]):
        orderings[f"g{high}<g{low}"] = all(
            increments[high][t] <= increments[low][t] for t in increments[low]
        )
    return increments, orderings


def corrected_average_law(store: SnapshotStore, mc: ModifiedCharacteristics, q_inf: ScalarField3,
                          times: Sequence[float], velocity_test: VelocityBump,
                          time_threshold: float = 4.0, window: float = 0.5
                          ) -> Tuple[RateFitReport, RateFitReport]:
    """
    Increment rates of the plain average of g_1 and of the average corrected by
    1/(1 - mu Laplacian phi_inf(v)/t), using Laplacian phi_inf = Q_inf.

    Returns:
        (uncorrected, corrected)
    """
    def corrected_test(v: np.ndarray, kappa=(0, 0, 0), t: float = 1.0) -> np.ndarray:
        laplacian = np.nan_to_num(q_inf.interpolate(v, outside="nan"))
        return velocity_test(v, kappa) / (1.0 - mc.mu * laplacian / t)

    plain, corrected = {}, {}
    for t in times:
        plain[t] = modified_profile_average(
            store, mc, t, velocity_test, jacobian_weighted=False,
            time_threshold=time_threshold, window=window,
        )
        corrected[t] = modified_profile_average(
            store, mc, t, lambda v, kappa, t=t: corrected_test(v, kappa, t),
            jacobian_weighted=False, time_threshold=time_threshold, window=window,
        )
    return (
        increment_rate(plain, "power_with_log", "uncorrected_average"),
        increment_rate(corrected, "power_with_log_sq", "corrected_average"),
    )


def first_order_density_law(profiles: Dict[float, ScalarField3], q_inf: ScalarField3,
                            phi_inf_grad, mu: int) -> Tuple[RateFitReport, RateFitReport, float]:
    """
    Residual rates of t^3 rho(t, 0) against the zeroth-order profile Q_inf(0) and against
    the first-order formula
        [1 - mu (log t + 1) Q_inf(0)/t] Q_inf(0) - mu (log t + 1) grad phi_inf(0).grad Q_inf(0)/t - M/t
    where the moment M is fitted as the single 1/t coefficient.

    Returns:
        (zeroth-order rate, first-order rate, fitted M)
    """
    origin = np.zeros((1, 3))
    times = np.asarray(sorted(profiles))
    measured = np.asarray([float(profiles[t].interpolate(origin)[0]) for t in times])
    q0 = float(q_inf.interpolate(origin)[0])
    grad_q0 = np.asarray([float(c.interpolate(origin)[0]) for c in gradient(q_inf).components])
    grad_phi0 = phi_inf_grad.interpolate(origin)[0]
    log_term = (np.log(times) + 1.0) / times
    known = (1.0 - mu * log_term * q0) * q0 - mu * log_term * float(grad_phi0 @ grad_q0)
    remainder = measured - known
    inverse = 1.0 / times
    moment = -float(inverse @ remainder / (inverse @ inverse))
    first = np.abs(remainder + moment * inverse)
    zeroth = np.abs(measured - q0)
    return (
        rate_fit(times, zeroth, "power_with_log", "zeroth_order_density"),
        rate_fit(times, first, "power_with_log_sq", "first_order_density"),
        moment,
    )
