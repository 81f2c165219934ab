"""Kick-drift-kick particle integrator for the Vlasov-Poisson characteristics"""
import time as timer
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.exceptions import NumericalError
from app.core.logging import get_logger
from app.models.fields import (
    GridGeometry, ParticleEnsemble, ScalarField3, Snapshot, VectorField3,
)
from app.models.schemas import InitialDataSpec, SolverConfig
from app.physics.deposit import deposit, gather, gather_vector
from app.physics.initial_data import seed_particles
from app.physics.poisson import derivative, gradient, solve_freespace

if TYPE_CHECKING:
    from app.services.snapshot_store import SnapshotStore

logger = get_logger(__name__)

FOUR_PI = 4.0 * np.pi


@dataclass
class FieldSample:
    """grad(phi) and phi at the particles, plus node fields when requested"""
    grad: np.ndarray
    phi: np.ndarray
    rho: Optional[ScalarField3] = None
    phi_mesh: Optional[ScalarField3] = None
    grad_mesh: Optional[VectorField3] = None


class RadialMassProfile:
    """
    Gauss-law field of concentric shells around a center.

    Shells sharing a radius act as one shell, and each shell feels half of its own
    mass, which makes force and potential energy consistent.
    """

    def __init__(self, radii: np.ndarray, weights: np.ndarray):
        scale = float(np.max(radii)) if radii.size else 1.0
        # symmetric quadratures produce equal radii up to rounding
        keys = np.round(radii / max(scale, 1e-300), 12) * scale
        order = np.argsort(keys, kind="stable")
        self.radii = keys[order]
        sorted_weights = weights[order]
        self.enclosed = np.concatenate([[0.0], np.cumsum(sorted_weights)])
        inverse = np.where(self.radii > 0, sorted_weights / np.where(self.radii > 0, self.radii, 1.0), 0.0)
        self.outer = np.concatenate([np.cumsum(inverse[::-1])[::-1], [0.0]])
        self.scale = scale

    def evaluate(self, radii: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            (potential, radial derivative of the potential) at the given radii
        """
        keys = np.round(radii / max(self.scale, 1e-300), 12) * self.scale
        left = np.searchsorted(self.radii, keys, side="left")
        right = np.searchsorted(self.radii, keys, side="right")
        strict = self.enclosed[left]
        shell = self.enclosed[right] - strict
        safe = np.where(radii > 0, radii, 1.0)
        potential = np.where(radii > 0, -(strict / safe + self.outer[left]) / FOUR_PI,
                             -self.outer[right] / FOUR_PI)
        radial = np.where(radii > 0, (strict + 0.5 * shell) / (FOUR_PI * safe ** 2), 0.0)
        return potential, radial


def direct_field(points: np.ndarray, sources: np.ndarray, weights: np.ndarray,
                 softening: float = 0.0, chunk: int = 512) -> Tuple[np.ndarray, np.ndarray]:
    """
    Softened pairwise potential and gradient; coincident pairs contribute nothing.

    Returns:
        (phi (m,), grad phi (m, 3))
    """
    phi = np.zeros(len(points))
    grad = np.zeros((len(points), 3))
    eps2 = softening ** 2
    for start in range(0, len(points), chunk):
        diff = points[start:start + chunk, None, :] - sources[None, :, :]
        d2 = np.sum(diff ** 2, axis=-1) + eps2
        inv = np.where(d2 > 0, 1.0 / np.sqrt(np.where(d2 > 0, d2, 1.0)), 0.0)
        phi[start:start + chunk] = -(inv @ weights) / FOUR_PI
        grad[start:start + chunk] = np.einsum("ijk,ij,j->ik", diff, inv ** 3, weights) / FOUR_PI
    return phi, grad


def center_of_mass_line(ensemble: ParticleEnsemble) -> Tuple[np.ndarray, np.ndarray]:
    """Initial center of mass and its (conserved) velocity"""
    mass = ensemble.total_mass
    if mass <= 0.0:
        return np.zeros(3), np.zeros(3)
    com = ensemble.weights @ ensemble.initial_positions / mass
    velocity = ensemble.weights @ ensemble.initial_velocities / mass
    return com, velocity


class LeapfrogIntegrator:
    """
    Kick-drift-kick leapfrog with a self-consistent field.

    The modified weights are advanced with the trapezoid rule on the kick samples:
    phi_corr += dt/2 (t_n a_n + t_{n+1} a_{n+1}) and w_corr -= dt/2 (a_n + a_{n+1}),
    so x - t v + phi_corr and v + w_corr are invariants of the discrete flow.
    """

    def __init__(self, config: SolverConfig, initial: ParticleEnsemble):
        self.config = config
        self.mu = initial.mu
        self.com, self.com_velocity = center_of_mass_line(initial)
        self.x_spread = float(np.max(np.abs(initial.initial_positions - self.com), initial=0.0))
        self.v_spread = float(np.max(np.abs(initial.initial_velocities - self.com_velocity), initial=0.0))
        self._weights = initial.weights.copy()
        self._cache: Optional[Tuple[float, np.ndarray, np.ndarray]] = None

    # -- geometry ---------------------------------------------------------

    def center(self, t: float) -> np.ndarray:
        return self.com + t * self.com_velocity

    def half_extent(self, t: float) -> float:
        cfg = self.config
        if cfg.extent_policy == "fixed":
            return cfg.half_extent
        base = max(cfg.half_extent, cfg.extent_margin * self.x_spread)
        return base + cfg.extent_margin * self.v_spread * abs(t)

    def geometry(self, t: float) -> GridGeometry:
        return GridGeometry.centered(self.center(t), self.half_extent(t), self.config.mesh_nodes)

    def dt_at(self, t: float) -> float:
        return min(self.config.dt_max, self.config.dt_factor * max(t, 1.0))

    # -- fields -----------------------------------------------------------

    def field(self, positions: np.ndarray, t: float, with_mesh: bool = False) -> FieldSample:
        """Evaluate the field of the particles along the configured force path"""
        cfg = self.config
        weights = self._weights
        path = cfg.force_path
        geometry = self.geometry(t) if (with_mesh or path == "particle_mesh") else None
        rho = deposit(positions, weights, geometry, cfg.deposit, t) if geometry is not None else None

        if path == "particle_mesh":
            phi_mesh = solve_freespace(rho, cfg.poisson_method, settings.threads)
            grad_mesh = gradient(phi_mesh, cfg.gradient_method)
            return FieldSample(
                grad=gather_vector(grad_mesh, positions, cfg.deposit, t),
                phi=gather(phi_mesh, positions, cfg.deposit, t),
                rho=rho, phi_mesh=phi_mesh, grad_mesh=grad_mesh,
            )

        if path == "spherical_gauss":
            center = self.center(t)
            rel = positions - center
            radii = np.linalg.norm(rel, axis=1)
            profile = RadialMassProfile(radii, weights)
            phi, radial = profile.evaluate(radii)
            safe = np.where(radii > 0, radii, 1.0)[:, None]
            grad = radial[:, None] * rel / safe
            sample = FieldSample(grad=grad, phi=phi, rho=rho)
            if with_mesh:
                nodes = geometry.points() - center
                node_radii = np.linalg.norm(nodes, axis=1)
                node_phi, node_radial = profile.evaluate(node_radii)
                node_safe = np.where(node_radii > 0, node_radii, 1.0)[:, None]
                node_grad = node_radial[:, None] * nodes / node_safe
                sample.phi_mesh = ScalarField3(geometry, node_phi.reshape(geometry.shape))
                sample.grad_mesh = VectorField3.from_array(
                    geometry, node_grad.T.reshape((3,) + tuple(geometry.shape))
                )
            return sample

        if path == "direct":
            phi, grad = direct_field(positions, positions, weights, cfg.softening)
            sample = FieldSample(grad=grad, phi=phi, rho=rho)
            if with_mesh:
                node_phi, node_grad = direct_field(geometry.points(), positions, weights, cfg.softening)
                sample.phi_mesh = ScalarField3(geometry, node_phi.reshape(geometry.shape))
                sample.grad_mesh = VectorField3.from_array(
                    geometry, node_grad.T.reshape((3,) + tuple(geometry.shape))
                )
            return sample

        raise ValueError(f"Unknown force path: {path}")

    def acceleration(self, ensemble: ParticleEnsemble) -> np.ndarray:
        """a = -mu grad(phi) at the particles (zero with field_off), cached per state"""
        if self._cache is not None:
            cached_time, cached_positions, cached = self._cache
            if cached_time == ensemble.time and np.array_equal(cached_positions, ensemble.positions):
                return cached
        if self.config.field_off:
            accel = np.zeros_like(ensemble.positions)
        else:
            accel = -self.mu * self.field(ensemble.positions, ensemble.time).grad
        self._cache = (ensemble.time, ensemble.positions.copy(), accel)
        return accel

    # -- stepping ---------------------------------------------------------

    def _check_weights(self, ensemble: ParticleEnsemble) -> None:
        if ensemble.weights.flags.writeable or not np.array_equal(ensemble.weights, self._weights):
            raise NumericalError("Particle weights changed after seeding")

    def step(self, ensemble: ParticleEnsemble, dt: float) -> ParticleEnsemble:
        """One kick-drift-kick step of size dt (negative dt runs backwards)"""
        self._check_weights(ensemble)
        t0 = ensemble.time
        t1 = t0 + dt
        a0 = self.acceleration(ensemble)

        nxt = ensemble.copy()
        half = ensemble.velocities + 0.5 * dt * a0
        nxt.positions = ensemble.positions + dt * half
        nxt.time = t1
        a1 = self.acceleration(nxt)
        nxt.velocities = half + 0.5 * dt * a1

        nxt.modified.phi_corr = ensemble.modified.phi_corr + 0.5 * dt * (t0 * a0 + t1 * a1)
        nxt.modified.w_corr = ensemble.modified.w_corr - 0.5 * dt * (a0 + a1)
        return nxt

    # -- diagnostics ------------------------------------------------------

    def conserved(self, ensemble: ParticleEnsemble, sample: Optional[FieldSample] = None) -> Dict[str, float]:
        """Mass, momentum and energy E = sum w|v|^2/2 + (mu/2) sum w phi(x)"""
        if sample is None:
            sample = self.field(ensemble.positions, ensemble.time)
        kinetic = ensemble.kinetic_energy()
        potential = 0.5 * self.mu * float(ensemble.weights @ sample.phi)
        momentum = ensemble.momentum()
        return {
            "mass": ensemble.total_mass,
            "momentum_x": float(momentum[0]),
            "momentum_y": float(momentum[1]),
            "momentum_z": float(momentum[2]),
            "kinetic": kinetic,
            "potential": potential,
            "energy": kinetic + potential,
        }

    @staticmethod
    def modified_stats(ensemble: ParticleEnsemble) -> Dict[str, float]:
        z_drift = np.max(np.abs(ensemble.z_mod() - ensemble.initial_positions), initial=0.0)
        v_drift = np.max(np.abs(ensemble.v_mod() - ensemble.initial_velocities), initial=0.0)
        phi_max = float(np.max(np.abs(ensemble.modified.phi_corr), initial=0.0))
        stats = {
            "z_mod_drift": float(z_drift),
            "v_mod_drift": float(v_drift),
            "phi_corr_max": phi_max,
            "w_corr_max": float(np.max(np.abs(ensemble.modified.w_corr), initial=0.0)),
        }
        if ensemble.time > 1.0:
            stats["phi_corr_over_log_t"] = phi_max / np.log(ensemble.time)
        return stats

    def snapshot(self, ensemble: ParticleEnsemble, step: int) -> Snapshot:
        sample = self.field(ensemble.positions, ensemble.time, with_mesh=True)
        return Snapshot(
            time=ensemble.time,
            step=step,
            positions=ensemble.positions.copy(),
            velocities=ensemble.velocities.copy(),
            phi_corr=ensemble.modified.phi_corr.copy(),
            w_corr=ensemble.modified.w_corr.copy(),
            rho=sample.rho,
            phi=sample.phi_mesh,
            grad_phi=sample.grad_mesh,
            conserved=self.conserved(ensemble, sample),
            modified_stats=self.modified_stats(ensemble),
        )

    def advance(self, ensemble: ParticleEnsemble, schedule: Sequence[float],
                on_snapshot=None, step: int = 0) -> Tuple[ParticleEnsemble, int]:
        """Step through the schedule, landing exactly on every snapshot time"""
        for target in schedule:
            if target < ensemble.time - 1e-12:
                raise ValueError(f"Snapshot time {target} lies before current time {ensemble.time}")
            while ensemble.time < target - 1e-12 * max(1.0, target):
                dt = min(self.dt_at(ensemble.time), target - ensemble.time)
                ensemble = self.step(ensemble, dt)
                step += 1
                logger.debug("step", extra={"sim_time": ensemble.time, "step": step})
            ensemble.time = float(target)
            if on_snapshot is not None:
                on_snapshot(self.snapshot(ensemble, step))
        return ensemble, step


def run(spec: InitialDataSpec, config: SolverConfig, store: Optional["SnapshotStore"] = None,
        config_hash: str = "", seed: Optional[int] = None,
        directory: Optional[Union[str, Path]] = None) -> "SnapshotStore":
    """
    Seed particles and integrate to t_end, recording every scheduled snapshot.

    Args:
        spec: Initial data
        config: Solver configuration
        store: Destination store (a fresh in-memory store when omitted)
        config_hash: Hash of the generating run configuration
        seed: Sampler jitter seed
        directory: Persist a fresh store there instead of keeping it in memory

    Returns:
        SnapshotStore holding the snapshots and the conserved-quantity log

    Raises:
        ParticleOutsideMeshError: Particle left the deposit mesh
    """
    from app.services.snapshot_store import SnapshotStore

    ensemble = seed_particles(
        spec, config.particles_x, config.particles_v, config.rule_x, config.rule_v,
        mu=config.mu, jitter=config.sampler_jitter, seed=seed,
    )
    if store is None:
        store = SnapshotStore.from_ensemble(ensemble, config_hash=config_hash, directory=directory)
    integrator = LeapfrogIntegrator(config, ensemble)
    schedule = config.schedule()
    started = timer.perf_counter()
    logger.info(
        f"Integrating {ensemble.count} particles to t={schedule[-1]:g} "
        f"({config.force_path}, mu={config.mu}, {len(schedule)} snapshots)",
        extra={"config_hash": config_hash},
    )
    try:
        _, steps = integrator.advance(ensemble, schedule, on_snapshot=store.add)
    finally:
        store.save_metadata()
    logger.info(
        f"Integration finished after {steps} steps",
        extra={"config_hash": config_hash, "sim_time": store.horizon,
               "elapsed_ms": round(1000 * (timer.perf_counter() - started), 1)},
    )
    return store


@dataclass
class RaySeries:
    """t^{2+|kappa|} grad d^kappa phi(t, t v) along one self-similar ray"""
    velocity: Tuple[float, float, float]
    derivative: Tuple[int, int, int]
    times: np.ndarray
    values: np.ndarray
    truncated: bool = False


def field_along_ray(store: "SnapshotStore", v: Sequence[float],
                    derivative_order: Sequence[int] = (0, 0, 0), signed: bool = False) -> RaySeries:
    """
    Interpolated field along x = t v for every snapshot.

    Args:
        store: Snapshot store
        v: Ray velocity
        derivative_order: Extra spatial derivative kappa, |kappa| <= 1
        signed: Return the acceleration -mu t^{2+|kappa|} grad d^kappa phi instead

    Returns:
        RaySeries; truncated is set when the ray leaves the mesh
    """
    kappa = tuple(int(k) for k in derivative_order)
    if sum(kappa) > 1 or min(kappa) < 0:
        raise ValueError(f"derivative_order must have |kappa| <= 1, got {kappa}")
    velocity = np.asarray(v, dtype=float)
    times: List[float] = []
    values: List[np.ndarray] = []
    truncated = False
    for snapshot in store:
        point = snapshot.time * velocity
        field = snapshot.grad_phi
        if not field.geometry.contains(point[None, :])[0]:
            truncated = True
            logger.warning(f"Ray v={velocity.tolist()} leaves the mesh at t={snapshot.time:g}; series truncated")
            break
        if sum(kappa):
            field = VectorField3(tuple(derivative(c, kappa) for c in field.components))
        value = snapshot.time ** (2 + sum(kappa)) * field.interpolate(point[None, :])[0]
        if signed:
            value = -store.mu * value
        times.append(snapshot.time)
        values.append(value)
    return RaySeries(
        velocity=tuple(float(c) for c in velocity), derivative=kappa,
        times=np.asarray(times), values=np.asarray(values).reshape(-1, 3), truncated=truncated,
    )


def field_sup_series(store: "SnapshotStore") -> Tuple[np.ndarray, np.ndarray]:
    """(times, t^2 max_x |grad phi|) over the snapshots"""
    times = np.asarray(store.times)
    values = np.asarray([s.time ** 2 * s.grad_phi.sup() for s in store])
    return times, values
