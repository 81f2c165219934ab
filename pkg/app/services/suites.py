"""Suite orchestration: one pipeline per CLI subcommand"""
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.exceptions import NumericalError
from app.core.logging import get_logger
from app.models.fields import GridGeometry, ScalarField3, VectorField3, VGrid
from app.models.schemas import RunConfig, TailComparison, Verdict, multi_indices
from app.physics.free_transport import (
    build_linear_expansion, conservation_law, conservation_law_at_time, expansion_constant,
    fit_expansion_constants, gaussian_density_closed_form, geometric_times, linear_expansion_eval,
    linear_weak_limit, oracle_table, rescaled_density, uniform_tensor,
)
from app.physics.initial_data import weighted_norm
from app.physics.integrator import field_along_ray, field_sup_series, run
from app.physics.poisson import (
    gaussian_charge_potential, gradient, kernel_bound_check, relative_residual,
    derivative, scaled_kernel_bound_check, solve_freespace, solve_freespace_with_report,
)
from app.physics.test_functions import ProductBump, VelocityBump
from app.analysis.characteristics import (
    ModifiedCharacteristics, build_next_order, eval_XV_batch, first_order, zero_characteristics,
)
from app.analysis.extractor import (
    QInfinity, asymptotic_field, estimate_Q_infty, fit_self_similar_expansion,
    force_samples_along_characteristics, self_similar_force_basis, self_similar_force_samples,
    self_similar_profile,
)
from app.analysis.fitting import PolyhomogeneousFit, fit_polyhomogeneous, rate_fit
from app.analysis.verdicts import (
    corrected_average_law, density_force_link, first_order_density_law, force_tail_table,
    make_verdict, nonlinear_weak_limit, nonlinear_weak_series, scattering_ordering,
    smeared_conservation_law, tail_table, weak_convergence_test,
)
from app.services.report_writer import ReportWriter
from app.services.snapshot_store import SnapshotStore

logger = get_logger(__name__)

STORE_SUBDIR = "store"
KERNEL_BOUND = 7.0 * np.pi
CONSERVED_MASS_RTOL = 1e-10


@dataclass
class Extraction:
    """Asymptotic objects extracted once per store"""
    v_grid: VGrid
    window: tuple
    q_inf: QInfinity
    phi_inf: ScalarField3
    grad_inf: VectorField3
    force_fit: PolyhomogeneousFit
    characteristics: List[ModifiedCharacteristics] = field(default_factory=list)
    profiles: Dict[float, ScalarField3] = field(default_factory=dict)


def _tail_within(comparison: TailComparison, rtol: float, factor: float = 0.0) -> bool:
    """Every entry within rtol of its prediction, floored at 1% of the largest prediction"""
    scale = max((abs(e.predicted) for e in comparison.entries), default=0.0)
    floor = 1e-2 * scale
    return all(
        e.deviation <= rtol * max(abs(e.predicted), floor) + factor * (e.error_bar or 0.0)
        for e in comparison.entries
    )


def _growth(series: np.ndarray) -> float:
    """Largest value of a nonnegative series relative to its first value"""
    first, peak = float(series[0]), float(np.max(series))
    if first > 0.0:
        return peak / first
    return 1.0 if peak == 0.0 else float("inf")


def _interior(shape, cells: int = 2):
    return tuple(slice(cells, n - cells) for n in shape)


class SuiteRunner:
    """Runs the verdict suites of one run configuration"""

    def __init__(self, config: RunConfig, output_dir: Optional[str] = None):
        self.config = config
        self.config_hash = config.config_hash()
        self.output_dir = Path(output_dir or config.output_dir or settings.output_dir)
        self.writer = ReportWriter(self.output_dir, self.config_hash)
        self.spec = config.initial_data
        self.suite = config.suite
        self._store: Optional[SnapshotStore] = None
        self._extraction: Optional[Extraction] = None

    @property
    def vacuous(self) -> bool:
        return self.spec.amplitude == 0.0

    @property
    def store_dir(self) -> Path:
        return self.output_dir / STORE_SUBDIR

    def _verdict(self, tag: str, suite: str, passed: bool, measured: dict, tolerances: dict,
                 detail: Optional[str] = None, vacuous: bool = False) -> Verdict:
        verdict = make_verdict(tag, suite, passed, measured, tolerances, self.config_hash,
                               detail=detail, vacuous=vacuous or self.vacuous)
        self.writer.write(verdict)
        return verdict

    def _guarded(self, tag: str, suite: str, check: Callable[[], Verdict]) -> Verdict:
        """Oracle failures become FAIL verdicts instead of aborting the suite"""
        started = time.perf_counter()
        try:
            verdict = check()
        except NumericalError as e:
            logger.error(f"{tag} failed numerically: {str(e)}", exc_info=True,
                         extra={"tag": tag, "suite": suite})
            verdict = self._verdict(tag, suite, False, {}, {}, detail=f"{type(e).__name__}: {str(e)}")
        logger.info(
            f"{tag} done", extra={"tag": tag, "suite": suite,
                                  "elapsed_ms": round(1000 * (time.perf_counter() - started), 1)},
        )
        return verdict

    def _propagating(self, tag: str, check: Callable[[], Verdict]) -> Verdict:
        try:
            return check()
        except NumericalError as e:
            logger.error(f"{tag} aborted: {str(e)}", exc_info=True, extra={"tag": tag})
            raise NumericalError(f"[{tag}] {str(e)}") from e

    # ------------------------------------------------------------------
    # linear
    # ------------------------------------------------------------------

    @property
    def shifted_spec(self):
        return self.spec.model_copy(update={
            "x_center": self.suite.linear_x_center, "v_center": self.suite.linear_v_center,
        })

    def _density(self, spec):
        if spec.family == "gaussian" and not spec.polynomial_prefactor:
            return lambda t, x: t ** 3 * gaussian_density_closed_form(spec, t, x)
        return lambda t, x: rescaled_density(spec, t, x)

    def linear(self) -> List[Verdict]:
        logger.info("Linear suite started", extra={"suite": "linear", "config_hash": self.config_hash})
        checks = [
            ("linear_expansion_order", self._linear_expansion_order),
            ("conservation_drift", self._conservation_drift),
            ("expansion_constants", self._expansion_constants),
            ("linear_tails", self._linear_tails),
            ("weak_limit_linear", self._weak_limit_linear),
            ("kernel_bound", self._kernel_bound),
            ("poisson_radial", self._poisson_radial),
        ]
        return [self._guarded(tag, "linear", check) for tag, check in checks]

    def _linear_expansion_order(self) -> Verdict:
        spec = self.shifted_spec
        density = self._density(spec)
        times = geometric_times(self.suite.linear_window, self.suite.linear_points)
        x = self.suite.linear_x
        exact = np.asarray([density(t, x) for t in times])
        slopes, passed, frames = {}, True, []
        for order in range(4):
            expansion = build_linear_expansion(spec, order)
            residual = np.abs(exact - np.asarray([linear_expansion_eval(expansion, t, x) for t in times]))
            report = rate_fit(times, residual, "pure_power", f"expansion_{order}") if not self.vacuous else None
            if report is not None:
                slopes[str(order)] = report.exponent
                passed &= abs(report.exponent + (order + 1)) <= self.suite.slope_slack
            frames.append(pd.DataFrame({"t": times, "order": order, "residual": residual}))
        self.writer.write_series("linear_expansion_residuals", pd.concat(frames, ignore_index=True))
        self.writer.write_series("oracle_table", oracle_table(spec, 1, times[:3], [x]))
        return self._verdict(
            "linear_expansion_order", "linear", passed, {"slopes": slopes},
            {"expected": {str(n): -(n + 1) for n in range(4)}, "slope_slack": self.suite.slope_slack},
        )

    def _conservation_drift(self) -> Verdict:
        v = self.suite.conservation_v
        drifts = {}
        values = {}
        for total in range(4):
            for a_order in range(total + 1):
                for alpha in multi_indices(a_order):
                    for beta in multi_indices(total - a_order):
                        reference = conservation_law(self.spec, alpha, beta, v)
                        series = [conservation_law_at_time(self.spec, alpha, beta, v, t)
                                  for t in self.suite.conservation_times]
                        key = f"alpha={''.join(map(str, alpha))},beta={''.join(map(str, beta))}"
                        values[key] = (reference, series)
        scale = max((abs(r) for r, _ in values.values()), default=0.0)
        for key, (reference, series) in values.items():
            denominator = max(abs(reference), 1e-3 * scale) if scale > 0 else 1.0
            drifts[key] = max(abs(s - reference) for s in series) / denominator
        worst = max(drifts.values(), default=0.0)
        return self._verdict(
            "conservation_drift", "linear", worst <= self.suite.conservation_rtol,
            {"max_relative_drift": worst, "laws": len(drifts)},
            {"rtol": self.suite.conservation_rtol, "times": self.suite.conservation_times},
        )

    def _expansion_constants(self) -> Verdict:
        spec = self.shifted_spec
        times = geometric_times(self.suite.constants_window, self.suite.constants_points)
        fitted, skipped = fit_expansion_constants(spec, 3, times, uniform_tensor(1.0, 5), self._density(spec))
        deviations = {}
        for alpha, value in fitted.items():
            expected = float(expansion_constant(alpha))
            deviations["".join(map(str, alpha))] = abs(value - expected) / abs(expected)
        worst = max(deviations.values(), default=0.0)
        return self._verdict(
            "expansion_constants", "linear", worst <= self.suite.constants_rtol and not skipped,
            {"relative_deviation": deviations, "skipped": ["".join(map(str, a)) for a in skipped]},
            {"rtol": self.suite.constants_rtol},
        )

    def _linear_tails(self) -> Verdict:
        spec = self.shifted_spec
        comparison = tail_table(spec, self._density(spec), self.suite.tail_order,
                                self.suite.tail_x_points, self.suite.tail_window)
        return self._verdict(
            "linear_tails", "linear", _tail_within(comparison, self.suite.tail_rtol),
            comparison.model_dump(), {"rtol": self.suite.tail_rtol},
        )

    def _weak_test_function(self) -> ProductBump:
        return ProductBump(
            self.suite.weak_test_x_center, self.suite.weak_test_x_radius,
            self.suite.weak_test_v_center, self.suite.weak_test_v_radius,
        )

    def _weak_limit_linear(self) -> Verdict:
        test_fn = self._weak_test_function()
        times = geometric_times(self.suite.weak_window, self.suite.weak_points)
        reports, passed = {}, True
        scale = abs(linear_weak_limit(self.spec, (0, 0, 0), self.suite.weak_v_bar, test_fn))
        for beta in self.suite.weak_betas:
            exact = linear_weak_limit(self.spec, beta, self.suite.weak_v_bar, test_fn)
            report = weak_convergence_test(self.spec, beta, self.suite.weak_v_bar, test_fn, times,
                                           exact_limit=exact)
            key = "".join(map(str, beta))
            reports[key] = report.model_dump()
            if report.vacuous:
                continue
            if abs(exact) > 1e-12 * max(scale, 1e-300):
                passed &= report.final_relative_deviation <= self.suite.weak_rtol
                passed &= report.rate is not None and abs(report.rate.exponent + 1.0) <= self.suite.slope_slack
            else:
                # zero limit: the series itself must be small against the beta = 0 limit
                passed &= abs(report.values[-1]) <= self.suite.weak_rtol * scale
            self.writer.write_series(f"weak_linear_{key}", pd.DataFrame({"t": times, "s": report.values}))
        return self._verdict(
            "weak_limit_linear", "linear", passed, {"reports": reports},
            {"rtol": self.suite.weak_rtol, "slope_slack": self.suite.slope_slack},
        )

    def _kernel_bound(self) -> Verdict:
        rng = np.random.default_rng(self.config.seed or 0)
        directions = rng.normal(size=(self.suite.kernel_samples, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        points = directions * rng.uniform(0.0, self.suite.kernel_sample_extent, size=(self.suite.kernel_samples, 1))
        unscaled = [kernel_bound_check(x) for x in points]
        at_origin = kernel_bound_check((0.0, 0.0, 0.0))
        # scaled_kernel_bound_check already multiplies by t^2
        scaled = {str(t): max(scaled_kernel_bound_check(x, t) for x in points) for t in (1.0, 10.0, 100.0)}
        passed = (
            max(unscaled) <= KERNEL_BOUND
            and abs(at_origin - 2.0 * np.pi) <= 1e-4
            and all(value <= KERNEL_BOUND for value in scaled.values())
        )
        return self._verdict(
            "kernel_bound", "linear", passed,
            {"max_unscaled": max(unscaled), "at_origin": at_origin, "max_scaled_times_t2": scaled},
            {"bound": KERNEL_BOUND, "origin_value": 2.0 * np.pi, "origin_atol": 1e-4},
            vacuous=False,
        )

    def _poisson_radial(self) -> Verdict:
        geometry = GridGeometry.centered((0.0, 0.0, 0.0), self.suite.poisson_half_extent, self.suite.poisson_nodes)
        rho = ScalarField3.from_function(geometry, lambda x, y, z: np.exp(-(x ** 2 + y ** 2 + z ** 2)))
        phi, report = solve_freespace_with_report(rho, workers=settings.n_jobs)
        r = np.sqrt(sum(m ** 2 for m in geometry.mesh()))
        exact = gaussian_charge_potential(r)
        inner = _interior(geometry.shape)
        error = float(np.max(np.abs(phi.values - exact)[inner]) / np.max(np.abs(exact)))
        point = np.array([[3.0, 0.0, 0.0]])
        monopole = -np.pi ** 1.5 / (4.0 * np.pi * 3.0)
        far = float(phi.interpolate(point)[0])
        monopole_error = abs(far - monopole) / abs(monopole)
        residual = relative_residual(phi, rho)
        passed = error <= 1e-2 and monopole_error <= 1e-2 and residual <= 1e-2
        return self._verdict(
            "poisson_radial", "linear", passed,
            {"linf_relative": error, "monopole_relative": monopole_error, "residual": residual,
             "boundary_ratio": report.boundary_ratio},
            {"linf": 1e-2, "monopole": 1e-2, "residual": 1e-2}, vacuous=False,
        )

    # ------------------------------------------------------------------
    # simulate
    # ------------------------------------------------------------------

    def simulate(self) -> List[Verdict]:
        solver = self.config.solver
        norm = weighted_norm(self.spec, 2, 2, 2, sampler_resolution=9)
        logger.info(f"Initial weighted norm {norm.value:.3e}", extra={"suite": "simulate"})
        store = self._run_to_disk()
        self._store = store
        verdicts = [
            self._guarded("solver_conservation", "simulate", lambda: self._solver_conservation(store)),
            self._guarded("force_decay", "simulate", lambda: self._force_decay(store)),
            self._guarded("modified_weights", "simulate", lambda: self._modified_weights(store)),
        ]
        if solver.field_off:
            verdicts.append(self._guarded("field_off_corrections", "simulate",
                                          lambda: self._field_off_corrections(store)))
        if self.suite.free_flight_check:
            verdicts.append(self._guarded("free_flight_limit", "simulate", self._free_flight_limit))
        if self.suite.convergence_study:
            verdicts.append(self._guarded("energy_convergence", "simulate", self._energy_convergence))
        return verdicts

    def _run_to_disk(self) -> SnapshotStore:
        return run(self.spec, self.config.solver, config_hash=self.config_hash,
                   seed=self.config.seed, directory=self.store_dir)

    def _solver_conservation(self, store: SnapshotStore) -> Verdict:
        frame = store.conserved_frame()
        mass0 = float(frame["mass"].iloc[0])
        mass_drift = float(np.max(np.abs(frame["mass"] - mass0))) / max(mass0, 1e-300)
        momentum = frame[["momentum_x", "momentum_y", "momentum_z"]].to_numpy()
        momentum_drift = float(np.max(np.abs(momentum - momentum[0]))) / max(mass0, 1e-300)
        energy = frame["energy"].to_numpy()
        energy_drift = float(np.max(np.abs(energy - energy[0])) / max(abs(energy[0]), 1e-300))
        modified = pd.DataFrame.from_records(store.modified_log)
        self.writer.write_series("conserved", frame)
        self.writer.write_series("modified_weights", modified)
        passed = mass_drift <= CONSERVED_MASS_RTOL and momentum_drift <= 1e-8
        return self._verdict(
            "solver_conservation", "simulate", passed,
            {"mass_drift": mass_drift, "momentum_drift": momentum_drift, "energy_drift": energy_drift,
             "z_mod_drift": float(modified["z_mod_drift"].max()), "v_mod_drift": float(modified["v_mod_drift"].max())},
            {"mass_rtol": CONSERVED_MASS_RTOL, "momentum_atol_per_mass": 1e-8},
        )

    def _force_decay(self, store: SnapshotStore) -> Verdict:
        times, sups = field_sup_series(store)
        keep = times >= self.config.policy.fit_window[0]
        self.writer.write_series("force_sup", pd.DataFrame({"t": times, "t2_sup_grad_phi": sups}))
        report = rate_fit(times[keep], sups[keep], "power_with_log", "t2_sup_grad_phi")
        passed = bool(np.all(np.isfinite(sups))) and abs(report.exponent) <= self.suite.slope_slack
        return self._verdict(
            "force_decay", "simulate", passed, {"rate": report.model_dump(), "max": float(np.max(sups))},
            {"exponent_abs_max": self.suite.slope_slack},
        )

    def _modified_weights(self, store: SnapshotStore) -> Verdict:
        """z_mod drift grows at most like log t and v_mod drift stays bounded over the window"""
        modified = pd.DataFrame.from_records(store.modified_log)
        lower, upper = self.suite.modified_weight_window
        rows = modified[(modified["t"] >= lower) & (modified["t"] <= upper) & (modified["t"] > 1.0)]
        tolerances = {"z_mod_log_growth_max": self.suite.z_mod_log_growth_max,
                      "v_mod_growth_max": self.suite.v_mod_growth_max, "window": [lower, upper]}
        if len(rows) < 2:
            return self._verdict(
                "modified_weights", "simulate", True, {"snapshots": len(rows)}, tolerances,
                detail=f"Fewer than 2 snapshots in [{lower:g}, {upper:g}]", vacuous=True,
            )
        log_t = np.log(rows["t"].to_numpy())
        z_drift = rows["z_mod_drift"].to_numpy()
        v_drift = rows["v_mod_drift"].to_numpy()
        slope, intercept = np.polyfit(log_t, z_drift, 1)
        z_growth = _growth(z_drift / log_t)
        v_growth = _growth(v_drift)
        passed = z_growth <= self.suite.z_mod_log_growth_max and v_growth <= self.suite.v_mod_growth_max
        return self._verdict(
            "modified_weights", "simulate", passed,
            {"z_mod_log_slope": float(slope), "z_mod_log_intercept": float(intercept),
             "z_mod_over_log_t_max": float(np.max(z_drift / log_t)), "z_mod_log_growth": z_growth,
             "v_mod_drift_max": float(np.max(v_drift)), "v_mod_growth": v_growth,
             "snapshots": len(rows)},
            tolerances, vacuous=not (np.any(z_drift) or np.any(v_drift)),
        )

    def _field_off_corrections(self, store: SnapshotStore) -> Verdict:
        modified = pd.DataFrame.from_records(store.modified_log)
        phi_max = float(modified["phi_corr_max"].max())
        w_max = float(modified["w_corr_max"].max())
        return self._verdict(
            "field_off_corrections", "simulate", phi_max == 0.0 and w_max == 0.0,
            {"phi_corr_max": phi_max, "w_corr_max": w_max}, {"expected": 0.0}, vacuous=False,
        )

    def _free_flight_limit(self) -> Verdict:
        t_end = self.suite.free_flight_t_end
        solver = self.config.solver.model_copy(update={"t_end": t_end, "snapshot_times": [t_end]})
        displacements = {}
        for amplitude in (self.suite.free_flight_amplitude, 0.5 * self.suite.free_flight_amplitude):
            store = run(self.spec.scaled(amplitude), solver, config_hash=self.config_hash, seed=self.config.seed)
            snapshot = store.get(t_end)
            free = store.initial_positions + t_end * store.initial_velocities
            displacements[amplitude] = float(np.max(np.linalg.norm(snapshot.positions - free, axis=1)))
        large, small = displacements.values()
        ratio = large / small if small > 0 else float("inf")
        return self._verdict(
            "free_flight_limit", "simulate", 1.8 <= ratio <= 2.2,
            {"displacements": {str(k): v for k, v in displacements.items()}, "ratio": ratio},
            {"ratio_range": [1.8, 2.2]},
        )

    def _energy_convergence(self) -> Verdict:
        t_end = self.suite.energy_check_t_end
        drifts = []
        for factor in (1.0, 0.5):
            solver = self.config.solver.model_copy(update={
                "t_end": t_end, "snapshot_times": [0.0, t_end],
                "dt_factor": factor * self.config.solver.dt_factor,
                "dt_max": factor * self.config.solver.dt_max,
            })
            frame = run(self.spec, solver, config_hash=self.config_hash, seed=self.config.seed).conserved_frame()
            energy = frame["energy"].to_numpy()
            drifts.append(float(abs(energy[-1] - energy[0]) / max(abs(energy[0]), 1e-300)))
        ratio = drifts[0] / drifts[1] if drifts[1] > 0 else float("inf")
        return self._verdict(
            "energy_convergence", "simulate", drifts[0] < self.suite.energy_rtol and ratio >= 4.0,
            {"drift": drifts[0], "drift_half_dt": drifts[1], "ratio": ratio},
            {"rtol": self.suite.energy_rtol, "min_ratio": 4.0},
        )

    # ------------------------------------------------------------------
    # extraction shared by scattering, tails and weak
    # ------------------------------------------------------------------

    def load_store(self) -> SnapshotStore:
        if self._store is None:
            store = SnapshotStore.load(self.store_dir)
            store.require_hash(self.config_hash)
            self._store = store
        return self._store

    def extraction(self) -> Extraction:
        if self._extraction is not None:
            return self._extraction
        store = self.load_store()
        policy = self.config.policy
        v_grid = VGrid(self.suite.v_grid_extent, self.suite.v_grid_nodes)
        window = (policy.fit_window[0], min(policy.fit_window[1], store.horizon))
        threshold = settings.condition_threshold

        q_inf = estimate_Q_infty(store, window, v_grid)
        phi_inf, grad_inf = asymptotic_field(q_inf.field, self.config.solver.gradient_method)
        order = max(policy.n_max, 1)
        force_fit = fit_polyhomogeneous(
            self_similar_force_samples(store, v_grid, window), policy.with_order(order, max_alpha=0),
            basis=self_similar_force_basis(order), condition_threshold=threshold,
        )

        characteristics = [zero_characteristics(v_grid, store.mu), first_order(grad_inf, v_grid, store.mu)]
        for k in range(1, policy.n_max):
            mc = characteristics[-1]
            samples = force_samples_along_characteristics(store, mc, self.suite.force_x_points, v_grid, window)
            fit = fit_polyhomogeneous(samples, policy.with_order(k), condition_threshold=threshold)
            characteristics.append(build_next_order(mc, fit))
        for mc in characteristics:
            mc.save(self.output_dir / "characteristics", stem=f"order_{mc.order}")

        profiles = {t: self_similar_profile(store, t, v_grid) for t in store.window(*window)}
        self._extraction = Extraction(
            v_grid=v_grid, window=window, q_inf=q_inf, phi_inf=phi_inf, grad_inf=grad_inf,
            force_fit=force_fit, characteristics=characteristics, profiles=profiles,
        )
        self.writer.write_series("q_infinity", q_inf.field.to_frame())
        self.writer.write_series("force_fit", force_fit.to_frame())
        logger.info(
            f"Extraction done on window {window} with {len(characteristics)} characteristic orders",
            extra={"config_hash": self.config_hash},
        )
        return self._extraction

    # ------------------------------------------------------------------
    # scattering
    # ------------------------------------------------------------------

    def scattering(self) -> List[Verdict]:
        logger.info("Scattering suite started", extra={"suite": "scattering", "config_hash": self.config_hash})
        checks = [
            ("q_infinity_extrapolation", self._q_infinity_extrapolation),
            ("force_self_similarity", self._force_self_similarity),
            ("asymptotic_field_agreement", self._asymptotic_field_agreement),
            ("first_order_closed_form", self._first_order_closed_form),
            ("scattering_ordering", self._scattering_ordering),
            ("corrected_average", self._corrected_average),
            ("first_order_density", self._first_order_density),
            ("density_force_link", self._density_force_link),
        ]
        return [self._propagating(tag, check) for tag, check in checks]

    def _error_factor(self) -> float:
        return self.suite.error_bar_factor

    def _q_infinity_extrapolation(self) -> Verdict:
        ex = self.extraction()
        store = self.load_store()
        cell = ex.v_grid.geometry.cell_volume
        mass = float(np.sum(store.weights))
        q_mass = float(np.sum(ex.q_inf.field.values) * cell)
        relative = abs(q_mass - mass) / mass if mass > 0 else 0.0
        change = None
        if ex.q_inf.previous_value is not None:
            change = float(np.max(np.abs(ex.q_inf.last_value.values - ex.q_inf.previous_value.values)))
        return self._verdict(
            "q_infinity_extrapolation", "scattering", relative <= 1e-2,
            {"mass_relative_error": relative, "last_doubling_change": change,
             "max_error_bar": ex.q_inf.error_bar.sup()},
            {"mass_rtol": 1e-2},
        )

    def _force_self_similarity(self) -> Verdict:
        ex = self.extraction()
        store = self.load_store()
        reports, passed, frames = {}, True, []
        for v in self.suite.ray_velocities:
            ray = field_along_ray(store, v)
            keep = (ray.times >= ex.window[0]) & (ray.times <= ex.window[1])
            target = ex.grad_inf.interpolate(np.asarray(v, dtype=float)[None, :])[0]
            deviation = np.linalg.norm(ray.values[keep] - target, axis=1)
            report = rate_fit(ray.times[keep], deviation, "power_with_log", f"ray {v}")
            reports[str(list(v))] = {"rate": report.model_dump(), "truncated": ray.truncated,
                                     "max": float(np.max(np.linalg.norm(ray.values, axis=1)))}
            passed &= report.vacuous or -1.3 <= report.exponent <= -0.7
            frames.append(pd.DataFrame({"t": ray.times[keep], "v": str(list(v)), "deviation": deviation}))
        if frames:
            self.writer.write_series("force_rays", pd.concat(frames, ignore_index=True))
        return self._verdict(
            "force_self_similarity", "scattering", passed, reports, {"exponent_range": [-1.3, -0.7]},
        )

    def _asymptotic_field_agreement(self) -> Verdict:
        ex = self.extraction()
        geometry = ex.v_grid.geometry
        term = ex.force_fit.basis[0]
        fitted = ex.force_fit.coefficient(term).T.reshape((3,) + tuple(geometry.shape))
        fitted_error = np.nan_to_num(ex.force_fit.error_bar(term).T.reshape((3,) + tuple(geometry.shape)))
        propagated = gradient(solve_freespace(
            ScalarField3(geometry, np.abs(ex.q_inf.error_bar.values)))).norm()
        predicted = ex.grad_inf.stack()
        inner = _interior(geometry.shape)
        diff = np.linalg.norm(fitted - predicted, axis=0)[inner]
        bars = np.linalg.norm(fitted_error, axis=0)[inner] + propagated[inner]
        finite = np.isfinite(diff)
        worst = float(np.max(diff[finite])) if np.any(finite) else 0.0
        passed = bool(np.all(diff[finite] <= self._error_factor() * bars[finite] + 1e-12))
        return self._verdict(
            "asymptotic_field_agreement", "scattering", passed,
            {"sup_deviation": worst, "max_error_bar": float(np.max(bars[finite])) if np.any(finite) else 0.0},
            {"error_bar_factor": self._error_factor()},
        )

    def _first_order_closed_form(self) -> Verdict:
        ex = self.extraction()
        store = self.load_store()
        mc0, mc1 = ex.characteristics[:2]
        fit0 = fit_polyhomogeneous(
            self_similar_force_samples(store, ex.v_grid, ex.window),
            self.config.policy.with_order(0, max_alpha=0), basis=self_similar_force_basis(0),
        )
        built = build_next_order(mc0, fit0)
        t = ex.window[1]
        v = ex.v_grid.geometry.points()
        inside = np.all(np.abs(v) <= 0.5 * self.suite.v_grid_extent, axis=1)
        x = np.zeros((int(np.sum(inside)), 3))
        X_built, V_built = eval_XV_batch(built, t, x, v[inside])
        X_closed, V_closed = eval_XV_batch(mc1, t, x, v[inside])
        scale = np.log(t) * max(ex.grad_inf.sup(), 1e-300)
        deviation = float(np.nanmax(np.linalg.norm(X_built - X_closed, axis=1))) / scale
        return self._verdict(
            "first_order_closed_form", "scattering", deviation <= self.suite.store_tail_rtol,
            {"relative_deviation": deviation, "t": t}, {"rtol": self.suite.store_tail_rtol},
        )

    def _velocity_tests(self) -> List[VelocityBump]:
        return [VelocityBump(c, self.suite.test_velocity_radius) for c in self.suite.test_velocity_centers]

    def _scattering_ordering(self) -> Verdict:
        ex = self.extraction()
        store = self.load_store()
        times = store.window(ex.window[0], store.horizon)
        increments, orderings = scattering_ordering(
            store, ex.characteristics, times, self._velocity_tests(),
            self.suite.invert_time_threshold, self.suite.invert_window,
        )
        rows = [{"order": n, "t": t, "increment": value}
                for n, series in increments.items() for t, value in series.items()]
        self.writer.write_series("scattering_increments", pd.DataFrame.from_records(rows))
        return self._verdict(
            "scattering_ordering", "scattering", bool(orderings) and all(orderings.values()),
            {"orderings": orderings, "increments": {str(k): v for k, v in increments.items()}}, {},
        )

    def _corrected_average(self) -> Verdict:
        ex = self.extraction()
        store = self.load_store()
        times = store.window(ex.window[0], store.horizon)
        plain, corrected = corrected_average_law(
            store, ex.characteristics[1], ex.q_inf.field, times, self._velocity_tests()[0],
            self.suite.invert_time_threshold, self.suite.invert_window,
        )
        slack = self.suite.slope_slack
        passed = abs(plain.exponent + 1.0) <= slack and corrected.exponent <= -1.5 + slack \
            and corrected.exponent < plain.exponent
        return self._verdict(
            "corrected_average", "scattering", passed,
            {"uncorrected": plain.model_dump(), "corrected": corrected.model_dump()},
            {"uncorrected_exponent": -1.0, "corrected_max_exponent": -1.5, "slack": slack},
        )

    def _first_order_density(self) -> Verdict:
        ex = self.extraction()
        zeroth, first, moment = first_order_density_law(
            ex.profiles, ex.q_inf.field, ex.grad_inf, self.config.solver.mu,
        )
        slack = self.suite.slope_slack
        passed = abs(zeroth.exponent + 1.0) <= slack and first.exponent <= -1.5 + slack \
            and first.exponent < zeroth.exponent
        return self._verdict(
            "first_order_density", "scattering", passed,
            {"zeroth_order": zeroth.model_dump(), "first_order": first.model_dump(), "fitted_moment": moment},
            {"zeroth_exponent": -1.0, "first_max_exponent": -1.5, "slack": slack},
        )

    def _density_fit(self):
        ex = self.extraction()
        order = max(self.config.policy.n_max, 1)
        return fit_self_similar_expansion(
            ex.profiles, self.config.policy.with_order(order, max_alpha=0), ex.v_grid,
            settings.condition_threshold,
        )

    def _density_force_link(self) -> Verdict:
        ex = self.extraction()
        comparison = density_force_link(self._density_fit(), ex.force_fit)
        return self._verdict(
            "density_force_link", "scattering",
            comparison.within_error_bars(self._error_factor()),
            comparison.model_dump(), {"error_bar_factor": self._error_factor()},
        )

    # ------------------------------------------------------------------
    # tails
    # ------------------------------------------------------------------

    def tails(self) -> List[Verdict]:
        logger.info("Tails suite started", extra={"suite": "tails", "config_hash": self.config_hash})
        return [
            self._propagating("density_tails", self._density_tails),
            self._propagating("force_tails", self._force_tails),
        ]

    def _density_tails(self) -> Verdict:
        store = self.load_store()
        times = store.window(*self.suite.tail_window)

        def density(t, x):
            snapshot = store.get(t)
            return t ** 3 * float(snapshot.rho.interpolate(np.asarray(x)[None, :])[0])

        comparison = tail_table(self.spec, density, self.suite.tail_order, self.suite.tail_x_points,
                                self.suite.tail_window, times=times)
        return self._verdict(
            "density_tails", "tails", _tail_within(comparison, self.suite.store_tail_rtol),
            comparison.model_dump(), {"rtol": self.suite.store_tail_rtol},
        )

    def _force_tails(self) -> Verdict:
        ex = self.extraction()
        store = self.load_store()
        x_points = [x for x in self.suite.force_x_points if np.linalg.norm(x) <= 1.0]
        window = (max(self.suite.tail_window[0], ex.window[0]), min(self.suite.tail_window[1], store.horizon))
        comparison = force_tail_table(store, ex.force_fit, x_points, window, n=1)
        return self._verdict(
            "force_tails", "tails",
            _tail_within(comparison, self.suite.store_tail_rtol, self._error_factor()),
            comparison.model_dump(),
            {"rtol": self.suite.store_tail_rtol, "error_bar_factor": self._error_factor()},
        )

    # ------------------------------------------------------------------
    # weak
    # ------------------------------------------------------------------

    def weak(self) -> List[Verdict]:
        logger.info("Weak suite started", extra={"suite": "weak", "config_hash": self.config_hash})
        verdicts = [self._guarded("weak_limit_linear", "weak", self._weak_limit_linear)]
        if (self.store_dir / "metadata.json").exists() or self._store is not None:
            verdicts.append(self._propagating("weak_limit_nonlinear", self._weak_limit_nonlinear))
        else:
            logger.warning(f"No snapshot store in {self.store_dir}; nonlinear weak limit skipped")
        return verdicts

    def _weak_limit_nonlinear(self) -> Verdict:
        ex = self.extraction()
        store = self.load_store()
        test_fn = self._weak_test_function()
        v_bar = self.suite.weak_v_bar
        times = store.window(*ex.window)
        geometry = ex.v_grid.geometry
        velocity_test = test_fn.velocity_factor
        chi = velocity_test(geometry.points()).reshape(geometry.shape)
        scale = abs(nonlinear_weak_limit(ex.q_inf.field, (0, 0, 0), v_bar, test_fn))
        smeared_scale = abs(float(np.sum(ex.q_inf.field.values * chi) * geometry.cell_volume))
        rtol = self.suite.store_tail_rtol
        measured, passed = {}, True
        for beta in self.suite.weak_betas:
            beta = tuple(beta)
            series = nonlinear_weak_series(store, beta, v_bar, test_fn, ex.v_grid, times)
            limit = nonlinear_weak_limit(ex.q_inf.field, beta, v_bar, test_fn)
            q_beta = derivative(ex.q_inf.field, beta) if sum(beta) else ex.q_inf.field
            expected = float(np.sum(q_beta.values * chi) * geometry.cell_volume)
            smeared = smeared_conservation_law(
                store, ex.characteristics[1], store.horizon, beta, velocity_test,
                self.suite.invert_time_threshold, self.suite.invert_window,
            )
            key = "".join(map(str, beta))
            measured[key] = {"final": float(series[-1]), "limit": limit,
                             "smeared": smeared, "smeared_expected": expected}
            passed &= abs(series[-1] - limit) <= rtol * max(abs(limit), scale)
            passed &= abs(smeared - expected) <= rtol * max(abs(expected), smeared_scale)
            self.writer.write_series(f"weak_nonlinear_{key}", pd.DataFrame({"t": times, "s": series}))
        return self._verdict("weak_limit_nonlinear", "weak", passed, measured, {"rtol": rtol})

    # ------------------------------------------------------------------

    def all(self) -> List[Verdict]:
        verdicts = self.linear()
        verdicts += self.simulate()
        verdicts += self.scattering()
        verdicts += self.tails()
        verdicts += self.weak()
        return verdicts

    def finish(self) -> bool:
        """Write summary.csv; True when no verdict failed"""
        self.writer.write_summary()
        return not self.writer.failed
