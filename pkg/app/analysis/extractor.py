"""Extraction of spatial averages, asymptotic fields and self-similar expansions from snapshot stores"""
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple

import numpy as np

from app.core.logging import get_logger
from app.models.fields import ScalarField3, VectorField3, VGrid, require_same_geometry
from app.models.schemas import BasisTerm, ExpansionOrderPolicy
from app.physics.deposit import deposit
from app.physics.poisson import gradient, solve_freespace
from app.analysis.fitting import FitSamples, fit_constant_plus_log_over_t, fit_polyhomogeneous
from app.services.snapshot_store import SnapshotStore

if TYPE_CHECKING:
    from app.analysis.characteristics import ModifiedCharacteristics

logger = get_logger(__name__)


@dataclass
class SpatialAverage:
    """Q(t, v) on the nodes of a velocity grid; covered marks cells holding particles"""
    time: float
    field: ScalarField3
    covered: np.ndarray
    counts: np.ndarray
    binned_mass: float
    total_mass: float

    @property
    def coverage(self) -> float:
        return float(np.mean(self.covered))


def bin_velocities(velocities: np.ndarray, weights: np.ndarray, v_grid: VGrid,
                   time: float = 0.0) -> SpatialAverage:
    """
    Sum particle weights per velocity cell (nearest node) divided by the cell volume.

    Particles outside the grid are dropped and their mass reported.
    """
    geometry = v_grid.geometry
    index = np.rint(geometry.index_coordinates(velocities)).astype(np.int64)
    shape = np.asarray(geometry.shape)
    inside = np.all((index >= 0) & (index < shape), axis=1)
    flat = np.ravel_multi_index(tuple(index[inside].T), geometry.shape)
    mass = np.bincount(flat, weights=weights[inside], minlength=geometry.size)
    counts = np.bincount(flat, minlength=geometry.size)
    total = float(np.sum(weights))
    binned = float(np.sum(weights[inside]))
    if not np.all(inside):
        logger.warning(
            f"{int(np.sum(~inside))} particles outside the velocity grid at t={time:g} "
            f"(mass {total - binned:.3e} dropped)"
        )
    return SpatialAverage(
        time=time,
        field=ScalarField3(geometry, (mass / geometry.cell_volume).reshape(geometry.shape)),
        covered=(counts > 0).reshape(geometry.shape),
        counts=counts.reshape(geometry.shape),
        binned_mass=binned,
        total_mass=total,
    )


def profile_weights(store: SnapshotStore, t: float, profile_radius: Optional[float] = None) -> np.ndarray:
    """
    Particle weights with the particles outside |x - t v| <= profile_radius zeroed.

    profile_radius defaults to t; pass np.inf to keep every particle.
    """
    radius = t if profile_radius is None else profile_radius
    if np.isinf(radius):
        return store.weights
    snapshot = store.get(t)
    keep = np.linalg.norm(snapshot.positions - t * snapshot.velocities, axis=1) <= radius
    return np.where(keep, store.weights, 0.0)


def spatial_average(store: SnapshotStore, t: float, v_grid: VGrid,
                    profile_radius: Optional[float] = None) -> SpatialAverage:
    """
    Estimate Q(t, v) = integral of f(t, x, v) dx by binning particles on their velocity.

    Args:
        store: Snapshot store
        t: Snapshot time
        v_grid: Velocity grid; cells centered on the nodes
        profile_radius: Keep only particles with |x - t v| <= profile_radius (default t)

    Returns:
        SpatialAverage
    """
    weights = profile_weights(store, t, profile_radius)
    return bin_velocities(store.get(t).velocities, weights, v_grid, t)


@dataclass
class QInfinity:
    """Extrapolated Q_infinity with error bar and the fitted log(t)/t coefficient"""
    field: ScalarField3
    error_bar: ScalarField3
    slope: ScalarField3
    times: Tuple[float, ...]
    last_value: ScalarField3
    previous_value: Optional[ScalarField3] = None


def estimate_Q_infty(store: SnapshotStore, window: Tuple[float, float], v_grid: VGrid,
                     profile_radius: Optional[float] = None) -> QInfinity:
    """
    Fit Q(t, v) = Q_inf(v) + c(v) log(t)/t per cell over the window. Each Q(t) keeps the
    particles with |x - t v| <= profile_radius (default t).

    Raises:
        ValueError: Fewer than 3 snapshots in the window
        RankDeficientFitError: Degenerate time samples
    """
    times = store.window(*window)
    if len(times) < 3:
        raise ValueError(f"estimate_Q_infty needs at least 3 snapshots in {window}, got {len(times)}")
    averages = [spatial_average(store, t, v_grid, profile_radius).field for t in times]
    series = np.stack([a.values.ravel() for a in averages])
    value, slope, residual = fit_constant_plus_log_over_t(np.asarray(times), series)
    geometry = v_grid.geometry
    half = min(times, key=lambda s: abs(s - times[-1] / 2.0))
    logger.info(f"Q_inf extrapolated from {len(times)} snapshots in [{times[0]:g}, {times[-1]:g}]")
    return QInfinity(
        field=ScalarField3(geometry, value.reshape(geometry.shape)),
        error_bar=ScalarField3(geometry, residual.reshape(geometry.shape)),
        slope=ScalarField3(geometry, slope.reshape(geometry.shape)),
        times=tuple(times),
        last_value=averages[-1],
        previous_value=averages[times.index(half)] if half != times[-1] else None,
    )


def asymptotic_field(q_inf: ScalarField3, method: str = "centered") -> Tuple[ScalarField3, VectorField3]:
    """Solve Laplacian_v phi_inf = Q_inf in velocity space; returns (phi_inf, grad_v phi_inf)"""
    phi = solve_freespace(q_inf)
    return phi, gradient(phi, method)


def self_similar_profile(store: SnapshotStore, t: float, xi_grid: VGrid, kernel: str = "CIC",
                         profile_radius: Optional[float] = None) -> ScalarField3:
    """t^3 rho(t, t xi) from a deposit of the particles in xi = x/t, restricted as in profile_weights"""
    if t <= 0:
        raise ValueError(f"self_similar_profile needs t > 0, got {t}")
    snapshot = store.get(t)
    weights = profile_weights(store, t, profile_radius)
    return deposit(snapshot.positions / t, weights, xi_grid.geometry, kernel, t, outside="drop")


@dataclass
class SelfSimilarExpansion:
    """Coefficients [rho]_{q,p}(xi) of t^3 rho(t, t xi) = sum log^p(t)/t^q [rho]_{q,p}(xi)"""
    order: int
    coefficients: Dict[Tuple[int, int], ScalarField3]
    stderr: Dict[Tuple[int, int], ScalarField3]
    window: Tuple[float, float]
    residual: float
    condition: float
    grid: VGrid

    def evaluate(self, t: float) -> ScalarField3:
        total = ScalarField3.zeros(self.grid.geometry)
        for (q, p), coefficient in self.coefficients.items():
            total = total + coefficient.scaled(np.log(t) ** p / t ** q)
        return total


def fit_self_similar_expansion(profiles: Dict[float, ScalarField3], policy: ExpansionOrderPolicy,
                               grid: VGrid, condition_threshold: Optional[float] = None
                               ) -> SelfSimilarExpansion:
    """
    Fit t^3 rho(t, t xi) profiles in the basis log^p(t)/t^q, p <= q <= n.

    The residual is the sup over the window and grid of |t^3 rho - expansion|.
    """
    times = sorted(profiles)
    for t in times:
        require_same_geometry(profiles[t].geometry, grid.geometry)
    basis_policy = policy.with_order(policy.n_max, max_alpha=0)
    samples = FitSamples(
        times=np.asarray(times),
        positions=np.zeros((len(times), 3)),
        values=np.stack([profiles[t].values.ravel() for t in times]),
        v_points=grid.geometry.points(),
        grid=grid,
    )
    fit = fit_polyhomogeneous(samples, basis_policy, condition_threshold=condition_threshold)
    geometry = grid.geometry
    coefficients, stderr = {}, {}
    for term in fit.basis:
        coefficients[(term.q, term.p)] = ScalarField3(geometry, fit.coefficient(term)[:, 0].reshape(geometry.shape))
        stderr[(term.q, term.p)] = ScalarField3(geometry, fit.error_bar(term)[:, 0].reshape(geometry.shape))
    predicted = fit.evaluate(samples.times, samples.positions)[:, :, 0]
    residual = float(np.max(np.abs(samples.values[:, :, 0] - predicted)))
    return SelfSimilarExpansion(
        order=policy.n_max, coefficients=coefficients, stderr=stderr,
        window=fit.window, residual=residual, condition=fit.condition, grid=grid,
    )


def force_samples_along_characteristics(store: SnapshotStore, mc: Optional["ModifiedCharacteristics"],
                                        x_points: Sequence[Sequence[float]], v_grid: VGrid,
                                        window: Tuple[float, float]) -> FitSamples:
    """
    Samples of t^2 grad phi(t, X_n + t V_n) at (t, x) rows for every v-grid node.

    Without characteristics the point is x + t v. Rows with |x| > t are skipped;
    points outside the field mesh are NaN.
    """
    from app.analysis.characteristics import eval_XV_batch

    times = store.window(*window)
    v_points = v_grid.geometry.points()
    rows_t, rows_x, values = [], [], []
    for t in times:
        snapshot = store.get(t)
        for x in x_points:
            x = np.asarray(x, dtype=float)
            if np.linalg.norm(x) > t:
                continue
            xs = np.broadcast_to(x, v_points.shape)
            if mc is None:
                points = xs + t * v_points
            else:
                X, V = eval_XV_batch(mc, t, xs, v_points)
                points = X + t * V
            sample = snapshot.grad_phi.interpolate(points, outside="nan")
            rows_t.append(t)
            rows_x.append(x)
            values.append(t ** 2 * sample)
    if not values:
        raise ValueError(f"No snapshots in window {window}")
    return FitSamples(
        times=np.asarray(rows_t), positions=np.asarray(rows_x),
        values=np.stack(values), v_points=v_points, grid=v_grid,
    )


def self_similar_force_samples(store: SnapshotStore, v_grid: VGrid,
                               window: Tuple[float, float]) -> FitSamples:
    """t^2 grad phi(t, t v) at x = 0"""
    return force_samples_along_characteristics(store, None, [(0.0, 0.0, 0.0)], v_grid, window)


def self_similar_force_basis(order: int) -> Sequence[BasisTerm]:
    """(q, 0, p) terms with p <= q <= order"""
    return [BasisTerm(q, (0, 0, 0), p) for q in range(order + 1) for p in range(q + 1)]
