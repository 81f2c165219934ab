"""Analytic initial data: evaluation, weighted norms and quadrature seeding"""
import itertools
from functools import lru_cache
from math import comb
from typing import List, Optional, Sequence, Tuple

import numpy as np
import sympy as sp
from numpy.polynomial.hermite import hermgauss, hermval
from numpy.polynomial.legendre import leggauss

from app.core.exceptions import ConfigError, UnsupportedDerivativeOrderError
from app.core.logging import get_logger
from app.models.fields import ParticleEnsemble
from app.models.schemas import InitialDataSpec, WeightedNormReport

logger = get_logger(__name__)

MAX_DERIVATIVE_ORDER = 6

# exp(-1/(1 - s^2)) underflows beyond this, so the bump and its derivatives vanish there
_BUMP_EDGE = 1.0 / 700.0


@lru_cache(maxsize=None)
def _bump_derivative(order: int):
    s = sp.Symbol("s", real=True)
    expr = sp.diff(sp.exp(1 - 1 / (1 - s ** 2)), s, order)
    return sp.lambdify(s, expr, "numpy")


def profile_derivative(family: str, s: np.ndarray, order: int) -> np.ndarray:
    """
    Derivative of the one-dimensional profile in its scaled variable.

    gaussian: e^{-s^2}; bump: exp(1 - 1/(1 - s^2)) on |s| < 1.
    """
    s = np.asarray(s, dtype=float)
    if family == "gaussian":
        coeffs = np.zeros(order + 1)
        coeffs[order] = 1.0
        return (-1) ** order * hermval(s, coeffs) * np.exp(-s ** 2)
    if family == "bump":
        out = np.zeros_like(s)
        inside = (1.0 - s ** 2) > _BUMP_EDGE
        if np.any(inside):
            out[inside] = _bump_derivative(order)(s[inside])
        return out
    raise ValueError(f"Unknown profile family: {family}")


def _validate_orders(dx_order: Sequence[int], dv_order: Sequence[int]) -> Tuple[int, ...]:
    order = tuple(int(k) for k in dx_order) + tuple(int(k) for k in dv_order)
    if len(order) != 6 or min(order) < 0:
        raise ValueError(f"Derivative orders must be two non-negative triples, got {order}")
    if sum(order) > MAX_DERIVATIVE_ORDER:
        raise UnsupportedDerivativeOrderError(
            f"Derivative order {sum(order)} exceeds supported maximum {MAX_DERIVATIVE_ORDER}"
        )
    return order


def _monomial_derivative(powers: Sequence[int], gamma: Sequence[int], z: np.ndarray) -> np.ndarray:
    """d^gamma of prod z_k^{powers_k} evaluated on z (..., 6)"""
    result = np.ones(z.shape[:-1])
    for k, (a, g) in enumerate(zip(powers, gamma)):
        if g > a:
            return np.zeros(z.shape[:-1])
        falling = 1
        for j in range(g):
            falling *= a - j
        result = result * falling * z[..., k] ** (a - g)
    return result


def evaluate_f0(spec: InitialDataSpec, x, v, dx_order=(0, 0, 0), dv_order=(0, 0, 0)):
    """
    Evaluate d_x^dx d_v^dv f_0 in closed form.

    Args:
        spec: Initial data
        x: (3,) or (..., 3) positions
        v: (3,) or (..., 3) velocities, broadcast against x
        dx_order: Spatial derivative multi-index
        dv_order: Velocity derivative multi-index

    Returns:
        float for single points, otherwise an array of the broadcast shape

    Raises:
        UnsupportedDerivativeOrderError: Total order above 6
    """
    order = _validate_orders(dx_order, dv_order)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    x, v = np.broadcast_arrays(x, v)
    scalar = x.ndim == 1
    z = np.concatenate([x, v], axis=-1)
    if spec.amplitude == 0.0:
        result = np.zeros(z.shape[:-1])
        return float(result) if scalar else result

    centers = np.asarray(spec.x_center + spec.v_center)
    widths = np.asarray(spec.x_widths + spec.v_widths)
    s = (z - centers) / widths

    # per-axis profile derivatives of every order up to the requested one
    cache = {}

    def axis_factor(k: int, m: int) -> np.ndarray:
        if (k, m) not in cache:
            cache[(k, m)] = profile_derivative(spec.family, s[..., k], m) / widths[k] ** m
        return cache[(k, m)]

    if not spec.polynomial_prefactor:
        result = np.full(z.shape[:-1], spec.amplitude)
        for k in range(6):
            result = result * axis_factor(k, order[k])
    else:
        result = np.zeros(z.shape[:-1])
        for gamma in itertools.product(*[range(m + 1) for m in order]):
            poly = np.zeros(z.shape[:-1])
            for term in spec.polynomial_prefactor:
                poly = poly + term.coefficient * _monomial_derivative(term.powers, gamma, z)
            if not np.any(poly):
                continue
            factor = float(np.prod([comb(m, g) for m, g in zip(order, gamma)]))
            profile = np.ones(z.shape[:-1])
            for k in range(6):
                profile = profile * axis_factor(k, order[k] - gamma[k])
            result = result + factor * poly * profile
        result = spec.amplitude * result

    return float(result) if scalar else result


def support_box(spec: InitialDataSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Phase-space box outside which f_0 vanishes (or is truncated).

    Returns:
        (lower, upper), each of shape (6,)

    Raises:
        ConfigError: gaussian family without a truncation
    """
    centers = np.asarray(spec.x_center + spec.v_center)
    widths = np.asarray(spec.x_widths + spec.v_widths)
    if spec.family == "bump":
        half = widths
    elif spec.truncation is None:
        raise ConfigError("Gaussian initial data without truncation has no finite support box")
    else:
        half = spec.truncation * widths
    return centers - half, centers + half


def axis_rule(spec: InitialDataSpec, axis: int, nodes: int, rule: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-dimensional quadrature rule for the plain measure along a phase-space axis.

    Args:
        spec: Initial data
        axis: 0-2 spatial, 3-5 velocity
        nodes: Number of nodes
        rule: "gauss" (Gauss-Hermite for gaussian, Gauss-Legendre for bump) or "uniform"

    Returns:
        (nodes, weights) so that sum(w * g(nodes)) approximates the integral of g
    """
    center = (spec.x_center + spec.v_center)[axis]
    width = (spec.x_widths + spec.v_widths)[axis]
    if rule == "gauss":
        if spec.family == "gaussian":
            s, w = hermgauss(nodes)
            return center + width * s, width * w * np.exp(s ** 2)
        s, w = leggauss(nodes)
        return center + width * s, width * w
    if rule == "uniform":
        lower, upper = support_box(spec)
        step = (upper[axis] - lower[axis]) / nodes
        return lower[axis] + step * (np.arange(nodes) + 0.5), np.full(nodes, step)
    raise ValueError(f"Unknown quadrature rule: {rule}")


def tensor_rule(rules: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor product of 1-D rules; returns (points (n, d), weights (n,))"""
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    weight_grids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([w.ravel() for w in weight_grids], axis=1), axis=1)
    return points, weights


def space_rule(spec: InitialDataSpec, space: str, nodes: int, rule: str = "gauss"):
    """Tensor rule over the x (space="x") or v (space="v") factor"""
    offset = 0 if space == "x" else 3
    return tensor_rule([axis_rule(spec, offset + k, nodes, rule) for k in range(3)])


def seed_particles(spec: InitialDataSpec, nodes_per_axis_x: int, nodes_per_axis_v: int,
                   rule_x: str = "gauss", rule_v: str = "gauss", mu: int = 1,
                   jitter: float = 0.0, seed: Optional[int] = None) -> ParticleEnsemble:
    """
    Place particles on a deterministic tensor quadrature of phase space.

    Args:
        spec: Initial data
        nodes_per_axis_x: Nodes per spatial axis (>= 4)
        nodes_per_axis_v: Nodes per velocity axis (>= 4)
        rule_x: Quadrature rule in x
        rule_v: Quadrature rule in v
        mu: Sign of the interaction
        jitter: Uniform-rule node jitter as a fraction of the spacing
        seed: Random seed used only for jitter

    Returns:
        ParticleEnsemble with weight_i = f_0(x_i, v_i) * quadrature weight

    Raises:
        ConfigError: Infinite support box
    """
    if nodes_per_axis_x < 4 or nodes_per_axis_v < 4:
        raise ValueError("seed_particles needs at least 4 nodes per axis")
    support_box(spec)

    rules = []
    for axis in range(6):
        rule = rule_x if axis < 3 else rule_v
        nodes = nodes_per_axis_x if axis < 3 else nodes_per_axis_v
        rules.append(axis_rule(spec, axis, nodes, rule))

    x_points, x_weights = tensor_rule(rules[:3])
    v_points, v_weights = tensor_rule(rules[3:])

    if jitter > 0.0:
        rng = np.random.default_rng(seed)
        if rule_x == "uniform":
            x_points = x_points + rng.uniform(-jitter, jitter, x_points.shape) * x_weights[:1] ** (1 / 3)
        if rule_v == "uniform":
            v_points = v_points + rng.uniform(-jitter, jitter, v_points.shape) * v_weights[:1] ** (1 / 3)
        if rule_x != "uniform" and rule_v != "uniform":
            logger.warning("Sampler jitter ignored: no uniform rule selected")

    positions = np.repeat(x_points, len(v_points), axis=0)
    velocities = np.tile(v_points, (len(x_points), 1))
    quad_weights = np.outer(x_weights, v_weights).ravel()
    weights = evaluate_f0(spec, positions, velocities) * quad_weights

    logger.info(
        f"Seeded {len(weights)} particles ({rule_x}/{rule_v}), total mass {weights.sum():.10g}"
    )
    return ParticleEnsemble(positions, velocities, weights, positions, velocities, mu=mu)


def derivative_orders(N: int) -> List[Tuple[int, ...]]:
    """All (beta, kappa) six-indices with total order <= N"""
    return [
        order for order in itertools.product(range(N + 1), repeat=6)
        if sum(order) <= N
    ]


def _sample_box(spec: InitialDataSpec) -> Tuple[np.ndarray, np.ndarray]:
    if spec.family == "gaussian" and spec.truncation is None:
        centers = np.asarray(spec.x_center + spec.v_center)
        widths = np.asarray(spec.x_widths + spec.v_widths)
        return centers - 6.0 * widths, centers + 6.0 * widths
    return support_box(spec)


def weighted_norm(spec: InitialDataSpec, N: int, N_x: int, N_v: int,
                  sampler_resolution: int = 17, chunk: int = 256) -> WeightedNormReport:
    """
    Sampled weighted norm: sum over |beta| + |kappa| <= N of
    sup <x>^N_x <v>^N_v |d_x^beta d_v^kappa f_0| on a tensor grid.

    Args:
        spec: Initial data
        N: Derivative order (<= 6)
        N_x: Spatial weight exponent
        N_v: Velocity weight exponent
        sampler_resolution: Sample points per axis
        chunk: x-points evaluated per batch when the full product grid is needed

    Returns:
        WeightedNormReport
    """
    if N > MAX_DERIVATIVE_ORDER:
        raise UnsupportedDerivativeOrderError(
            f"Weighted norm order {N} exceeds supported maximum {MAX_DERIVATIVE_ORDER}"
        )
    lower, upper = _sample_box(spec)
    axes = [np.linspace(lower[k], upper[k], sampler_resolution) for k in range(6)]
    x_points, _ = tensor_rule([(a, np.ones_like(a)) for a in axes[:3]])
    v_points, _ = tensor_rule([(a, np.ones_like(a)) for a in axes[3:]])
    x_weight = (1.0 + np.sum(x_points ** 2, axis=1)) ** (N_x / 2.0)
    v_weight = (1.0 + np.sum(v_points ** 2, axis=1)) ** (N_v / 2.0)
    sample_count = len(x_points) * len(v_points)

    total = 0.0
    if spec.amplitude > 0.0:
        separable = not spec.polynomial_prefactor
        for order in derivative_orders(N):
            dx, dv = order[:3], order[3:]
            if separable:
                # the product structure makes the sup factor into x and v sups
                fx = evaluate_f0(spec.model_copy(update={"amplitude": 1.0}),
                                 x_points, np.asarray(spec.v_center), dx, (0, 0, 0))
                gv = evaluate_f0(spec.model_copy(update={"amplitude": 1.0}),
                                 np.asarray(spec.x_center), v_points, (0, 0, 0), dv)
                sup_x = np.max(x_weight * np.abs(fx))
                sup_v = np.max(v_weight * np.abs(gv))
                total += spec.amplitude * sup_x * sup_v
            else:
                best = 0.0
                for start in range(0, len(x_points), chunk):
                    xs = x_points[start:start + chunk]
                    values = evaluate_f0(spec, xs[:, None, :], v_points[None, :, :], dx, dv)
                    weighted = x_weight[start:start + chunk, None] * v_weight[None, :] * np.abs(values)
                    best = max(best, float(np.max(weighted)))
                total += best

    logger.debug(f"Weighted norm N={N} N_x={N_x} N_v={N_v}: {total:.6e} ({sample_count} samples)")
    return WeightedNormReport(
        N=N, N_x=N_x, N_v=N_v, value=float(total),
        sample_count=sample_count, resolution=sampler_resolution,
    )
