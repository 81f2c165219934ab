"""Least-squares fits in polyhomogeneous bases and decay-rate models"""
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.core.config import settings
from app.core.exceptions import IllConditionedFitError, PeelOffDivergedError, RankDeficientFitError
from app.core.logging import get_logger
from app.models.fields import ScalarField3, VGrid
from app.models.schemas import BasisTerm, ExpansionOrderPolicy, RateFitReport

logger = get_logger(__name__)

MIN_RATE_POINTS = 6
MIN_DECADES = 1.0

RATE_LOG_POWERS = {
    "pure_power": (0,),
    "power_with_log": (0, 1),
    "power_with_log_sq": (0, 1, 2, 3),
}


def basis_values(term: BasisTerm, times: np.ndarray, positions: Optional[np.ndarray] = None) -> np.ndarray:
    """x^alpha log^p(t) / t^q on (t, x) rows"""
    times = np.asarray(times, dtype=float)
    values = np.log(times) ** term.p / times ** term.q
    if sum(term.alpha):
        if positions is None:
            raise ValueError(f"Basis term {term.label()} needs sample positions")
        for k, a in enumerate(term.alpha):
            if a:
                values = values * positions[:, k] ** a
    return values


def _check_window(times: np.ndarray, minimum: int, label: str) -> None:
    if len(times) < minimum:
        raise ValueError(f"{label}: needs at least {minimum} samples, got {len(times)}")
    t_min, t_max = float(np.min(times)), float(np.max(times))
    if t_min <= 0 or np.log10(t_max / t_min) < MIN_DECADES - 1e-12:
        raise ValueError(f"{label}: times must span at least one decade, got [{t_min:g}, {t_max:g}]")


# ---------------------------------------------------------------------------
# Polyhomogeneous fits
# ---------------------------------------------------------------------------

@dataclass
class FitSamples:
    """
    Samples of a (vector) quantity at rows (t_i, x_i) for every velocity cell.

    values has shape (rows, cells, components); NaN marks a missing sample.
    """
    times: np.ndarray
    positions: np.ndarray
    values: np.ndarray
    v_points: np.ndarray
    grid: Optional[VGrid] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None, None]
        elif values.ndim == 2:
            values = values[:, :, None]
        self.values = values
        self.v_points = np.asarray(self.v_points, dtype=float).reshape(-1, 3)
        if not (len(self.times) == len(self.positions) == values.shape[0]):
            raise ValueError("times, positions and values must have the same number of rows")
        if values.shape[1] != len(self.v_points):
            raise ValueError("values must have one column per velocity point")

    @property
    def components(self) -> int:
        return self.values.shape[2]


@dataclass
class PolyhomogeneousFit:
    """Coefficient functions [Psi]_{q,alpha,p}(v) of a fitted expansion"""
    basis: List[BasisTerm]
    coefficients: np.ndarray
    stderr: np.ndarray
    residual: np.ndarray
    condition: float
    window: Tuple[float, float]
    v_points: np.ndarray
    grid: Optional[VGrid] = None
    column_scales: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def order(self) -> int:
        return max((term.q for term in self.basis), default=0)

    @property
    def residual_norm(self) -> float:
        finite = self.residual[np.isfinite(self.residual)]
        return float(np.max(finite)) if finite.size else 0.0

    def index(self, term: BasisTerm) -> int:
        return self.basis.index(BasisTerm(*term))

    def coefficient(self, term: BasisTerm) -> np.ndarray:
        """(cells, components) values of one coefficient"""
        return self.coefficients[self.index(term)]

    def error_bar(self, term: BasisTerm) -> np.ndarray:
        return self.stderr[self.index(term)]

    def field(self, term: BasisTerm, component: int = 0) -> ScalarField3:
        if self.grid is None:
            raise ValueError("Fit has no velocity grid attached")
        geometry = self.grid.geometry
        values = np.nan_to_num(self.coefficient(term)[:, component])
        return ScalarField3(geometry, values.reshape(geometry.shape))

    def evaluate(self, times: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Sum of the expansion on rows, shape (rows, cells, components)"""
        design = np.stack([basis_values(term, times, positions) for term in self.basis], axis=1)
        return np.einsum("rk,kcm->rcm", design, np.nan_to_num(self.coefficients))

    def to_frame(self) -> pd.DataFrame:
        records = []
        for k, term in enumerate(self.basis):
            alpha = "".join(str(a) for a in term.alpha)
            for cell, v in enumerate(self.v_points):
                for component in range(self.coefficients.shape[2]):
                    records.append({
                        "v1": v[0], "v2": v[1], "v3": v[2],
                        "q": term.q, "alpha": alpha, "p": term.p,
                        "component": component,
                        "coefficient": self.coefficients[k, cell, component],
                        "stderr": self.stderr[k, cell, component],
                    })
        return pd.DataFrame.from_records(records)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def _scaled_qr(design: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    scales = np.linalg.norm(design, axis=0)
    if np.any(scales == 0.0):
        raise RankDeficientFitError("Basis column vanishes on every sample")
    q, r = np.linalg.qr(design / scales)
    condition = float(np.linalg.cond(r))
    if not np.isfinite(condition) or condition > threshold:
        raise IllConditionedFitError(condition, threshold)
    return q, r, scales, condition


def _solve_columns(design: np.ndarray, targets: np.ndarray, threshold: float
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Coefficients, standard errors and RMS residuals for complete target columns"""
    q, r, scales, condition = _scaled_qr(design, threshold)
    scaled = np.linalg.solve(r, q.T @ targets)
    coefficients = scaled / scales[:, None]
    residuals = targets - design @ coefficients
    rows, columns = design.shape
    dof = max(rows - columns, 1)
    sigma2 = np.sum(residuals ** 2, axis=0) / dof
    r_inv = np.linalg.inv(r)
    diag = np.sum(r_inv ** 2, axis=1) / scales ** 2
    stderr = np.sqrt(np.outer(diag, sigma2))
    rms = np.sqrt(np.mean(residuals ** 2, axis=0))
    return coefficients, stderr, rms, condition


def _solve_masked(design: np.ndarray, target: np.ndarray, threshold: float):
    mask = np.isfinite(target)
    columns = design.shape[1]
    if mask.sum() < columns + 2:
        nan = np.full(columns, np.nan)
        return nan, nan, np.nan
    try:
        coefficients, stderr, rms, _ = _solve_columns(design[mask], target[mask, None], threshold)
    except (IllConditionedFitError, RankDeficientFitError):
        nan = np.full(columns, np.nan)
        return nan, nan, np.nan
    return coefficients[:, 0], stderr[:, 0], float(rms[0])


def fit_polyhomogeneous(samples: FitSamples, policy: ExpansionOrderPolicy,
                        basis: Optional[Sequence[BasisTerm]] = None,
                        condition_threshold: Optional[float] = None) -> PolyhomogeneousFit:
    """
    Least squares of the samples against x^alpha log^p(t)/t^q, independently per
    velocity cell and component.

    Args:
        samples: Rows (t, x) with values per velocity cell
        policy: Expansion order policy supplying the basis
        basis: Explicit basis overriding the policy's
        condition_threshold: Refusal threshold (defaults to settings.condition_threshold)

    Returns:
        PolyhomogeneousFit

    Raises:
        ValueError: Too few rows or a window shorter than one decade
        IllConditionedFitError: Condition number of the scaled system above threshold
    """
    basis = list(basis) if basis is not None else policy.basis
    for term in basis:
        if not BasisTerm(*term).is_admissible:
            raise ValueError(f"Basis term {term} violates p + |alpha| <= q")
    threshold = condition_threshold or settings.condition_threshold
    _check_window(samples.times, len(basis) + 2, "fit_polyhomogeneous")

    design = np.stack([basis_values(term, samples.times, samples.positions) for term in basis], axis=1)
    rows, cells, components = samples.values.shape
    targets = samples.values.reshape(rows, cells * components)

    complete = np.all(np.isfinite(targets), axis=0)
    coefficients = np.full((len(basis), cells * components), np.nan)
    stderr = np.full_like(coefficients, np.nan)
    residual = np.full(cells * components, np.nan)

    # refuses ill-conditioned systems before any column is solved
    _, _, scales, condition = _scaled_qr(design, threshold)
    if np.any(complete):
        c, s, rms, _ = _solve_columns(design, targets[:, complete], threshold)
        coefficients[:, complete] = c
        stderr[:, complete] = s
        residual[complete] = rms
    incomplete = np.flatnonzero(~complete)
    if incomplete.size:
        results = Parallel(n_jobs=settings.n_jobs)(
            delayed(_solve_masked)(design, targets[:, j], threshold) for j in incomplete
        )
        for j, (c, s, rms) in zip(incomplete, results):
            coefficients[:, j], stderr[:, j], residual[j] = c, s, rms
        logger.debug(f"Masked fits for {incomplete.size} columns with missing samples")

    logger.debug(
        f"Polyhomogeneous fit: {len(basis)} terms, {rows} rows, {cells} cells, cond {condition:.2e}"
    )
    return PolyhomogeneousFit(
        basis=[BasisTerm(*term) for term in basis],
        coefficients=coefficients.reshape(len(basis), cells, components),
        stderr=stderr.reshape(len(basis), cells, components),
        residual=residual.reshape(cells, components),
        condition=condition,
        window=(float(np.min(samples.times)), float(np.max(samples.times))),
        v_points=samples.v_points,
        grid=samples.grid,
        column_scales=scales,
    )


# ---------------------------------------------------------------------------
# Decay rates
# ---------------------------------------------------------------------------

def rate_fit(times: Sequence[float], values: Sequence[float], model: str = "pure_power",
             quantity: str = "") -> RateFitReport:
    """
    Fit log|value| = c + e log t + p log log t, profiling the log power p over the
    model's admissible set and keeping the smallest residual.

    Raises:
        ValueError: Too few points, window shorter than one decade, nonpositive values
            under pure_power, or t <= 1 for the log models
    """
    if model not in RATE_LOG_POWERS:
        raise ValueError(f"Unknown rate model: {model}")
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    _check_window(times, MIN_RATE_POINTS, f"rate_fit({quantity})")
    window = (float(times.min()), float(times.max()))

    if np.all(values == 0.0):
        return RateFitReport(quantity=quantity, model=model, exponent=0.0, log_power=0,
                             residual=0.0, window=window, points=len(times), vacuous=True)
    if model == "pure_power" and np.any(values <= 0.0):
        raise ValueError(f"rate_fit({quantity}): pure_power needs positive values")
    magnitudes = np.abs(values)
    if np.any(magnitudes == 0.0):
        raise ValueError(f"rate_fit({quantity}): series has zero entries")
    if model != "pure_power" and np.any(times <= 1.0):
        raise ValueError(f"rate_fit({quantity}): log models need t > 1")

    log_t = np.log(times)
    target = np.log(magnitudes)
    best = None
    for p in RATE_LOG_POWERS[model]:
        shifted = target - (p * np.log(log_t) if p else 0.0)
        design = np.stack([np.ones_like(log_t), log_t], axis=1)
        solution, *_ = np.linalg.lstsq(design, shifted, rcond=None)
        residual = float(np.sqrt(np.mean((shifted - design @ solution) ** 2)))
        if best is None or residual < best[2] - 1e-15:
            best = (float(solution[1]), p, residual)

    exponent, log_power, residual = best
    return RateFitReport(
        quantity=quantity, model=model, exponent=exponent,
        log_power=log_power if model != "pure_power" else None,
        residual=residual, window=window, points=len(times),
    )


# ---------------------------------------------------------------------------
# Sequential peel-off
# ---------------------------------------------------------------------------

@dataclass
class PeelOffResult:
    coefficients: Dict[Hashable, float]
    stderr: Dict[Hashable, float]
    residuals: List[float]


def peel_off(values: Sequence[float], columns: Dict[Hashable, np.ndarray],
             order: Optional[Sequence[Hashable]] = None) -> PeelOffResult:
    """
    Sequentially peel terms off a series.

    Each stage fits the current term jointly with every term not yet peeled, keeps
    the current coefficient and subtracts its contribution.

    Args:
        values: Series samples
        columns: Basis values on the same samples, keyed by term
        order: Peel order (defaults to the key order of columns)

    Raises:
        PeelOffDivergedError: Residual grew between stages
    """
    values = np.asarray(values, dtype=float)
    order = list(order) if order is not None else list(columns)
    if set(order) != set(columns):
        raise ValueError("Peel order must list every column exactly once")
    residual = values.copy()
    scale = float(np.max(np.abs(values))) if values.size else 0.0
    residual_norms = [float(np.linalg.norm(residual))]
    coefficients: Dict[Hashable, float] = {}
    stderr: Dict[Hashable, float] = {}

    for stage, key in enumerate(order):
        remaining = order[stage:]
        design = np.stack([np.asarray(columns[k], dtype=float) for k in remaining], axis=1)
        norms = np.linalg.norm(design, axis=0)
        if np.any(norms == 0.0):
            raise RankDeficientFitError(f"Peel-off column vanishes at stage {stage}")
        solution, _, rank, _ = np.linalg.lstsq(design / norms, residual, rcond=None)
        if rank < len(remaining):
            raise RankDeficientFitError(f"Peel-off design lost rank at stage {stage}")
        solution = solution / norms
        fitted = residual - design @ solution
        dof = max(len(values) - len(remaining), 1)
        sigma2 = float(fitted @ fitted) / dof
        try:
            cov = sigma2 * np.linalg.inv(design.T @ design)
            stderr[key] = float(np.sqrt(max(cov[0, 0], 0.0)))
        except np.linalg.LinAlgError:
            stderr[key] = float("nan")
        coefficients[key] = float(solution[0])
        residual = residual - solution[0] * design[:, 0]
        norm = float(np.linalg.norm(residual))
        if norm > (1.0 + 1e-6) * residual_norms[-1] + 1e-14 * max(scale, 1.0):
            raise PeelOffDivergedError(
                f"Peel-off residual grew at stage {stage} ({key}): "
                f"{residual_norms[-1]:.3e} -> {norm:.3e}; widen the window"
            )
        residual_norms.append(norm)
    return PeelOffResult(coefficients=coefficients, stderr=stderr, residuals=residual_norms)


def power_columns(times: np.ndarray, powers: Sequence[int]) -> Dict[int, np.ndarray]:
    """{k: t^{-k}} columns for peel-off"""
    times = np.asarray(times, dtype=float)
    return {k: times ** (-float(k)) for k in powers}


def fit_constant_plus_log_over_t(times: np.ndarray, values: np.ndarray
                                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Fit values(t) = a + b log(t)/t column-wise.

    Args:
        times: (m,) times
        values: (m, n) series

    Returns:
        (a, b, rms residual), each of shape (n,)

    Raises:
        RankDeficientFitError: Design rank below 2
    """
    times = np.asarray(times, dtype=float)
    design = np.stack([np.ones_like(times), np.log(times) / times], axis=1)
    solution, _, rank, _ = np.linalg.lstsq(design, values, rcond=None)
    if rank < 2:
        raise RankDeficientFitError(f"Extrapolation design has rank {rank} < 2")
    residuals = values - design @ solution
    rms = np.sqrt(np.mean(residuals ** 2, axis=0))
    return solution[0], solution[1], rms

