"""Exact free-transport solution, moments, conservation laws and weak limits"""
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import comb, factorial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.core.config import settings
from app.core.exceptions import ToleranceNotReachedError
from app.core.logging import get_logger
from app.models.schemas import InitialDataSpec, multi_indices
from app.physics.initial_data import evaluate_f0, space_rule, tensor_rule
from app.physics.test_functions import ProductBump

logger = get_logger(__name__)

Index3 = Tuple[int, int, int]

START_NODES = 16


def expansion_constant(alpha: Sequence[int]) -> Fraction:
    """C_alpha = (-1)^|alpha| / alpha!"""
    denominator = 1
    for a in alpha:
        denominator *= factorial(a)
    return Fraction((-1) ** sum(alpha), denominator)


def multi_factorial(gamma: Sequence[int]) -> int:
    result = 1
    for g in gamma:
        result *= factorial(g)
    return result


def monomial(points: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
    """prod_k points[..., k]^alpha_k"""
    result = np.ones(points.shape[:-1])
    for k, a in enumerate(alpha):
        if a:
            result = result * points[..., k] ** a
    return result


def refine(integrate: Callable[[int], float], label: str, tol: Optional[float] = None,
           max_nodes: Optional[int] = None) -> float:
    """
    Double the nodes per axis from 16 until two successive levels agree within tol.

    Raises:
        ToleranceNotReachedError: Carrying the last estimate
    """
    tol = settings.oracle_tolerance if tol is None else tol
    max_nodes = max_nodes or settings.oracle_max_nodes
    nodes = START_NODES
    previous = integrate(nodes)
    change = float("inf")
    while nodes < max_nodes:
        nodes *= 2
        current = integrate(nodes)
        change = abs(current - previous)
        if change <= tol:
            logger.debug(f"{label}: converged at {nodes} nodes/axis (change {change:.2e})")
            return current
        previous = current
    raise ToleranceNotReachedError(label, estimate=previous, error=change, nodes=nodes)


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def rescaled_density(spec: InitialDataSpec, t: float, x: Sequence[float],
                     tol: Optional[float] = None) -> float:
    """
    t^3 rho(t, x) for t > 0, integrating f_0(y, (x - y)/t) over y.

    The tolerance applies to the rescaled value.
    """
    if t <= 0:
        raise ValueError(f"rescaled_density needs t > 0, got {t}")
    if spec.amplitude == 0.0:
        return 0.0
    x = np.asarray(x, dtype=float)

    def integrate(nodes: int) -> float:
        points, weights = space_rule(spec, "x", nodes)
        return float(weights @ evaluate_f0(spec, points, (x - points) / t))

    return refine(integrate, f"rescaled_density(t={t:g})", tol)


def exact_density(spec: InitialDataSpec, t: float, x: Sequence[float],
                  tol: Optional[float] = None) -> float:
    """
    rho(t, x) = integral of f_0(x - vt, v) dv.

    For t <= 1 the velocity integral is used directly; for t > 1 the substitution
    y = x - vt keeps the integrand resolved.

    Raises:
        ToleranceNotReachedError: Refinement exhausted
    """
    if t < 0:
        raise ValueError(f"exact_density needs t >= 0, got {t}")
    if spec.amplitude == 0.0:
        return 0.0
    tol = settings.oracle_tolerance if tol is None else tol
    x = np.asarray(x, dtype=float)
    if t > 1.0:
        return rescaled_density(spec, t, x, tol * t ** 3) / t ** 3

    def integrate(nodes: int) -> float:
        points, weights = space_rule(spec, "v", nodes)
        return float(weights @ evaluate_f0(spec, x - t * points, points))

    return refine(integrate, f"exact_density(t={t:g})", tol)


def gaussian_density_closed_form(spec: InitialDataSpec, t: float, x: Sequence[float]) -> float:
    """Closed-form rho(t, x) for prefactor-free gaussian data"""
    if spec.family != "gaussian" or spec.polynomial_prefactor:
        raise ValueError("Closed form only available for prefactor-free gaussian data")
    result = spec.amplitude
    for k in range(3):
        a, b = spec.x_widths[k], spec.v_widths[k]
        c, d = spec.x_center[k], spec.v_center[k]
        denom = a * a + b * b * t * t
        result *= np.sqrt(np.pi) * a * b / np.sqrt(denom) * np.exp(-(x[k] - c - d * t) ** 2 / denom)
    return float(result)


# ---------------------------------------------------------------------------
# Moments and conservation laws
# ---------------------------------------------------------------------------

def conservation_law(spec: InitialDataSpec, alpha: Sequence[int], beta: Sequence[int],
                     v: Sequence[float], tol: Optional[float] = None) -> float:
    """
    A^alpha_beta(v) = integral of x^alpha d_v^{alpha + beta} f_0(x, v) dx.

    Raises:
        ToleranceNotReachedError: Refinement exhausted
    """
    alpha = tuple(int(a) for a in alpha)
    beta = tuple(int(b) for b in beta)
    if sum(alpha) + sum(beta) > 4:
        raise ValueError(f"|alpha| + |beta| must be <= 4, got {alpha}, {beta}")
    return _conservation_law(spec, alpha, beta, tuple(float(c) for c in v), tol)


@lru_cache(maxsize=4096)
def _conservation_law(spec: InitialDataSpec, alpha: Index3, beta: Index3,
                      v: Tuple[float, float, float], tol: Optional[float]) -> float:
    if spec.amplitude == 0.0:
        return 0.0
    order = tuple(a + b for a, b in zip(alpha, beta))
    velocity = np.asarray(v)

    def integrate(nodes: int) -> float:
        points, weights = space_rule(spec, "x", nodes)
        values = evaluate_f0(spec, points, velocity, (0, 0, 0), order)
        return float(weights @ (monomial(points, alpha) * values))

    return refine(integrate, f"conservation_law(alpha={alpha}, beta={beta})", tol)


def moment(spec: InitialDataSpec, alpha: Sequence[int], w: Sequence[float],
           tol: Optional[float] = None) -> float:
    """M_alpha(w) = integral of y^alpha d_v^alpha f_0(y, w) dy"""
    return conservation_law(spec, alpha, (0, 0, 0), w, tol)


def _galilean_terms(order: Sequence[int], t: float) -> Dict[Tuple[int, ...], float]:
    """
    Expand (t d_x + d_v)^order applied to f_0(x - vt, v) into derivatives of f_0.

    Returns:
        {(dx1, dx2, dx3, dv1, dv2, dv3): coefficient}
    """
    per_axis = []
    for g in order:
        terms: Dict[Tuple[int, int], int] = {}
        for j in range(g + 1):
            # t^j d_x^j d_v^(g - j), then d_v of the composite picks (-t) d_x each time
            for k in range(g - j + 1):
                key = (j + k, g - j - k)
                # the power of t always equals the x-derivative count
                terms[key] = terms.get(key, 0) + comb(g, j) * comb(g - j, k) * (-1) ** k
        per_axis.append({key: c * t ** key[0] for key, c in terms.items() if c != 0})

    combined: Dict[Tuple[int, ...], float] = {}
    for choice in itertools.product(*[list(axis.items()) for axis in per_axis]):
        dx = tuple(item[0][0] for item in choice)
        dv = tuple(item[0][1] for item in choice)
        coefficient = float(np.prod([item[1] for item in choice]))
        combined[dx + dv] = combined.get(dx + dv, 0.0) + coefficient
    return {key: c for key, c in combined.items() if c != 0.0}


def conservation_law_at_time(spec: InitialDataSpec, alpha: Sequence[int], beta: Sequence[int],
                             v: Sequence[float], t: float, tol: Optional[float] = None) -> float:
    """
    Integral of (x - vt)^alpha (t d_x + d_v)^{alpha + beta} f(t, x, v) dx for the
    free flow f(t, x, v) = f_0(x - vt, v); equals conservation_law for every t.
    """
    if spec.amplitude == 0.0:
        return 0.0
    alpha = tuple(int(a) for a in alpha)
    order = tuple(int(a) + int(b) for a, b in zip(alpha, beta))
    velocity = np.asarray(v, dtype=float)
    terms = _galilean_terms(order, t)

    def integrate(nodes: int) -> float:
        points, weights = space_rule(spec, "x", nodes)
        lab_x = points + t * velocity
        shifted = lab_x - t * velocity
        total = np.zeros(len(points))
        for derivative_order, coefficient in terms.items():
            total += coefficient * evaluate_f0(
                spec, shifted, velocity, derivative_order[:3], derivative_order[3:]
            )
        return float(weights @ (monomial(shifted, alpha) * total))

    return refine(integrate, f"conservation_law_at_time(t={t:g})", tol)


# ---------------------------------------------------------------------------
# Linear expansion
# ---------------------------------------------------------------------------

@dataclass
class ExpansionTerm:
    alpha: Index3
    constant: Fraction
    moment: Callable[[np.ndarray], float]


@dataclass
class LinearExpansion:
    """Sum over |alpha| <= N of C_alpha t^{-|alpha|} M_alpha(x/t)"""
    order: int
    terms: List[ExpansionTerm] = field(default_factory=list)


def build_linear_expansion(spec: InitialDataSpec, order: int,
                           tol: Optional[float] = None) -> LinearExpansion:
    if order < 0:
        raise ValueError(f"Expansion order must be non-negative, got {order}")
    terms = []
    for k in range(order + 1):
        for alpha in multi_indices(k):
            terms.append(ExpansionTerm(
                alpha=tuple(alpha),
                constant=expansion_constant(alpha),
                moment=lambda w, a=tuple(alpha): moment(spec, a, w, tol),
            ))
    return LinearExpansion(order=order, terms=terms)


def linear_expansion_eval(expansion: LinearExpansion, t: float, x: Sequence[float]) -> float:
    """Evaluate the truncated expansion of t^3 rho(t, x)"""
    if t < 2:
        raise ValueError(f"linear_expansion_eval needs t >= 2, got {t}")
    w = tuple(float(c) / t for c in x)
    total = 0.0
    for term in expansion.terms:
        total += float(term.constant) * t ** (-sum(term.alpha)) * term.moment(w)
    return total


def linear_tail_prediction(spec: InitialDataSpec, n: int, x: Sequence[float], t: float) -> float:
    """
    Tail of t^3 rho(t, x) at fixed x: sum over |alpha| <= n, |gamma| <= n - |alpha| of
    (C_alpha / gamma!) A^alpha_gamma(0) x^gamma t^{-|gamma| - |alpha|}.
    """
    if n > 3:
        raise ValueError(f"linear_tail_prediction supports n <= 3, got {n}")
    if t < 2:
        raise ValueError(f"linear_tail_prediction needs t >= 2, got {t}")
    return sum(
        coefficient * t ** (-k)
        for k, coefficient in enumerate(linear_tail_coefficients(spec, n, x))
    )


def linear_tail_gamma_coefficients(spec: InitialDataSpec, n: int) -> Dict[Tuple[int, Index3], float]:
    """b_{k, gamma} = sum over |alpha| = k - |gamma| of C_alpha / gamma! A^alpha_gamma(0)"""
    origin = (0.0, 0.0, 0.0)
    result: Dict[Tuple[int, Index3], float] = {}
    for k in range(n + 1):
        for gamma_order in range(k + 1):
            for gamma in multi_indices(gamma_order):
                value = 0.0
                for alpha in multi_indices(k - gamma_order):
                    value += (
                        float(expansion_constant(alpha)) / multi_factorial(gamma)
                        * conservation_law(spec, alpha, gamma, origin)
                    )
                result[(k, tuple(gamma))] = value
    return result


def linear_tail_coefficients(spec: InitialDataSpec, n: int, x: Sequence[float]) -> List[float]:
    """c_k(x) so that the tail is sum_k c_k(x) t^{-k}"""
    point = np.asarray(x, dtype=float)
    coefficients = [0.0] * (n + 1)
    for (k, gamma), b in linear_tail_gamma_coefficients(spec, n).items():
        coefficients[k] += b * float(monomial(point, gamma))
    return coefficients


def fit_expansion_constants(spec: InitialDataSpec, order: int, times: Sequence[float],
                            xi_points: np.ndarray,
                            density: Optional[Callable[[float, np.ndarray], float]] = None
                            ) -> Tuple[Dict[Index3, float], List[Index3]]:
    """
    Recover C_alpha by least squares of t^3 rho(t, t xi) on the columns
    t^{-|alpha|} M_alpha(xi), including one extra order as nuisance terms.

    Returns:
        (fitted constants for |alpha| <= order, unidentifiable alphas)
    """
    if density is None:
        if spec.family == "gaussian" and not spec.polynomial_prefactor:
            def density(t, x):
                return t ** 3 * gaussian_density_closed_form(spec, t, x)
        else:
            def density(t, x):
                return rescaled_density(spec, t, x)

    xi_points = np.atleast_2d(np.asarray(xi_points, dtype=float))
    alphas = [tuple(a) for k in range(order + 2) for a in multi_indices(k)]
    rows, targets = [], []
    for t in times:
        for xi in xi_points:
            targets.append(density(t, t * xi))
            rows.append([t ** (-sum(a)) * moment(spec, a, tuple(xi)) for a in alphas])
    design = np.asarray(rows)
    targets = np.asarray(targets)

    norms = np.linalg.norm(design, axis=0)
    scale = norms.max() if norms.size else 0.0
    identifiable = norms > 1e-12 * scale if scale > 0 else np.zeros(len(alphas), dtype=bool)
    skipped = [a for a, ok in zip(alphas, identifiable) if not ok and sum(a) <= order]
    if skipped:
        logger.warning(f"Unidentifiable expansion constants skipped: {skipped}")

    columns = design[:, identifiable] / norms[identifiable]
    solution, *_ = np.linalg.lstsq(columns, targets, rcond=None)
    solution = solution / norms[identifiable]
    fitted = {}
    for alpha, value in zip([a for a, ok in zip(alphas, identifiable) if ok], solution):
        if sum(alpha) <= order:
            fitted[alpha] = float(value)
    return fitted, skipped


# ---------------------------------------------------------------------------
# Weak limits
# ---------------------------------------------------------------------------

def linear_weak_limit(spec: InitialDataSpec, beta: Sequence[int], v_bar: Sequence[float],
                      test_fn: ProductBump) -> float:
    """A_beta(v_bar) times the x-integral of test_fn(x, v_bar)"""
    if spec.amplitude == 0.0:
        return 0.0
    return conservation_law(spec, (0, 0, 0), beta, v_bar) * test_fn.x_integral(v_bar)


def _weak_series_value(spec: InitialDataSpec, beta: Index3, v_bar: np.ndarray,
                       test_fn: ProductBump, t: float, y_rule, u_rule, chunk: int) -> float:
    y_points, y_weights = y_rule
    u_points, u_weights = u_rule
    total = 0.0
    for start in range(0, len(y_points), chunk):
        y = y_points[start:start + chunk]
        velocity = v_bar + (u_points[None, :, :] - y[:, None, :]) / t
        f_values = evaluate_f0(spec, y[:, None, :], velocity, (0, 0, 0), beta)
        test_values = test_fn(np.broadcast_to(u_points, velocity.shape), velocity)
        total += float(y_weights[start:start + chunk] @ ((f_values * test_values) @ u_weights))
    return total


def linear_weak_series(spec: InitialDataSpec, beta: Sequence[int], v_bar: Sequence[float],
                       test_fn: ProductBump, times: Sequence[float], y_nodes: int = 10,
                       u_nodes: int = 12, chunk: int = 64) -> Tuple[np.ndarray, float]:
    """
    s(t) = integral of t^3 G^beta f(t, x, v) test_fn(x - t v_bar, v) dx dv for the free flow.

    With y = x - vt and u = x - t v_bar this is the integral of
    d_v^beta f_0(y, v_bar + (u - y)/t) test_fn(u, v_bar + (u - y)/t) du dy.

    Returns:
        (series values, limit evaluated with the same quadrature rule)
    """
    beta = tuple(int(b) for b in beta)
    v_bar = np.asarray(v_bar, dtype=float)
    if spec.amplitude == 0.0:
        return np.zeros(len(times)), 0.0
    y_rule = space_rule(spec, "x", y_nodes)
    u_rule = test_fn.x_rule(u_nodes)
    values = Parallel(n_jobs=settings.n_jobs)(
        delayed(_weak_series_value)(spec, beta, v_bar, test_fn, float(t), y_rule, u_rule, chunk)
        for t in times
    )
    limit = float(
        y_rule[1] @ evaluate_f0(spec, y_rule[0], v_bar, (0, 0, 0), beta)
    ) * float(u_rule[1] @ test_fn(u_rule[0], np.broadcast_to(v_bar, u_rule[0].shape)))
    return np.asarray(values), limit


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def oracle_table(spec: InitialDataSpec, order: int, times: Sequence[float],
                 x_points: Sequence[Sequence[float]]) -> pd.DataFrame:
    """Exact density against the truncated expansion at (t, x) points"""
    expansion = build_linear_expansion(spec, order)

    def row(t: float, x: Sequence[float]) -> dict:
        rho = exact_density(spec, t, x)
        approx = linear_expansion_eval(expansion, t, x) / t ** 3
        return {
            "t": t, "x1": x[0], "x2": x[1], "x3": x[2],
            "rho_exact": rho, f"expansion_{order}": approx, "residual": rho - approx,
        }

    records = [row(float(t), tuple(x)) for t in times for x in x_points]
    return pd.DataFrame.from_records(records)


def geometric_times(window: Tuple[float, float], points: int) -> np.ndarray:
    return np.geomspace(window[0], window[1], points)


def uniform_tensor(extent: float, nodes: int) -> np.ndarray:
    """Points of a uniform tensor grid on [-extent, extent]^3"""
    axis = np.linspace(-extent, extent, nodes)
    return tensor_rule([(axis, np.ones_like(axis))] * 3)[0]
