"""Modified characteristics X_n, V_n: construction, evaluation and inversion"""
import json
from dataclasses import dataclass, field
from fractions import Fraction
from math import factorial
from pathlib import Path
from typing import Callable, Dict, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.core.config import settings
from app.core.exceptions import InversionNotConvergedError
from app.core.logging import get_logger
from app.models.fields import VectorField3, VGrid, require_same_geometry
from app.models.schemas import BasisTerm
from app.analysis.fitting import PolyhomogeneousFit
from app.services.snapshot_store import SnapshotStore

logger = get_logger(__name__)

# (q, p) -> log^p(t) / t^q
LogPowerTerm = Tuple[int, int]
Combination = Dict[LogPowerTerm, Fraction]

INVERSION_TOLERANCE = 1e-10
INVERSION_MAX_ITERATIONS = 100
INVERSION_DAMPING = 0.5
JACOBIAN_STEP = 1e-6
MAX_FAILED_MASS = 0.01


class AntiderivativeTable:
    """Closed-form antiderivatives of log^p(t)/t^q with rational coefficients"""

    def __init__(self):
        self._entries: Dict[LogPowerTerm, Combination] = {}

    def __getitem__(self, key: LogPowerTerm) -> Combination:
        q, p = key
        if q < 1 or p < 0:
            raise ValueError(f"Antiderivatives tabulated for q >= 1, p >= 0, got {key}")
        if key not in self._entries:
            self._entries[key] = self._build(q, p)
        return self._entries[key]

    @staticmethod
    def _build(q: int, p: int) -> Combination:
        if q == 1:
            return {(0, p + 1): Fraction(1, p + 1)}
        s = q - 1
        # repeated integration by parts
        return {
            (s, p - j): Fraction(-factorial(p), factorial(p - j) * s ** (j + 1))
            for j in range(p + 1)
        }

    @staticmethod
    def derivative(combination: Combination) -> Combination:
        """d/dt of sum c log^a(t)/t^b, collected"""
        result: Combination = {}
        for (b, a), c in combination.items():
            if a:
                result[(b + 1, a - 1)] = result.get((b + 1, a - 1), Fraction(0)) + c * a
            if b:
                result[(b + 1, a)] = result.get((b + 1, a), Fraction(0)) - c * b
        return {key: c for key, c in result.items() if c != 0}

    def verify(self, key: LogPowerTerm) -> bool:
        return self.derivative(self[key]) == {key: Fraction(1)}


antiderivatives = AntiderivativeTable()


@dataclass
class ModifiedCharacteristics:
    """
    X_n = x + mu log(t) grad phi_inf(v) + sum x^alpha log^p(t)/t^q  X_{q,alpha,p}(v)
    V_n = v + mu grad phi_inf(v)/t      + sum x^alpha log^p(t)/t^{q+1} V_{q,alpha,p}(v)

    Tables carry the factor mu.
    """
    order: int
    mu: int
    grid: VGrid
    phi_inf_grad: VectorField3
    x_tables: Dict[BasisTerm, VectorField3] = field(default_factory=dict)
    v_tables: Dict[BasisTerm, VectorField3] = field(default_factory=dict)

    def __post_init__(self):
        require_same_geometry(self.phi_inf_grad.geometry, self.grid.geometry)
        for tables in (self.x_tables, self.v_tables):
            for term, table in tables.items():
                term = BasisTerm(*term)
                if not term.is_admissible or term.q < 1:
                    raise ValueError(f"Table index {term} violates 1 <= q, |alpha| + p <= q")
                require_same_geometry(table.geometry, self.grid.geometry)

    def to_frame(self) -> pd.DataFrame:
        records = []
        geometry = self.grid.geometry
        index = np.indices(geometry.shape).reshape(3, -1).T
        zero = np.zeros((geometry.size, 3))
        terms = sorted(set(self.x_tables) | set(self.v_tables))
        rows = [(BasisTerm(0, (0, 0, 0), 0), self.phi_inf_grad.node_values(), self.phi_inf_grad.node_values())]
        for term in terms:
            x_values = self.x_tables[term].node_values() if term in self.x_tables else zero
            v_values = self.v_tables[term].node_values() if term in self.v_tables else zero
            rows.append((term, x_values, v_values))
        for term, x_values, v_values in rows:
            for k in range(geometry.size):
                records.append({
                    "q": term.q, "alpha": "".join(str(a) for a in term.alpha), "p": term.p,
                    "i": index[k, 0], "j": index[k, 1], "k": index[k, 2],
                    "X1": x_values[k, 0], "X2": x_values[k, 1], "X3": x_values[k, 2],
                    "V1": v_values[k, 0], "V2": v_values[k, 1], "V3": v_values[k, 2],
                })
        return pd.DataFrame.from_records(records)

    def header(self) -> dict:
        geometry = self.grid.geometry
        return {
            "order": self.order, "mu": self.mu,
            "grid": {"extent": self.grid.extent, "nodes_per_axis": self.grid.nodes_per_axis,
                     "center": list(self.grid.center), "spacing": geometry.spacing},
            "x_terms": [term.label() for term in sorted(self.x_tables)],
            "v_terms": [term.label() for term in sorted(self.v_tables)],
            "row_q0": "q=0 rows hold grad phi_inf in both X and V columns",
        }

    def save(self, directory: Union[str, Path], stem: str = "characteristics") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(directory / f"{stem}.csv", index=False)
        with open(directory / f"{stem}.json", "w", encoding="utf-8") as f:
            json.dump(self.header(), f, indent=2)


def zero_characteristics(v_grid: VGrid, mu: int = 1) -> ModifiedCharacteristics:
    """Order 0: X = x, V = v"""
    return ModifiedCharacteristics(order=0, mu=mu, grid=v_grid,
                                   phi_inf_grad=VectorField3.zeros(v_grid.geometry))


def first_order(phi_inf_grad: VectorField3, v_grid: VGrid, mu: int = 1) -> ModifiedCharacteristics:
    """Closed-form order 1: X_1 = x + mu log(t) grad phi_inf, V_1 = v + mu grad phi_inf / t"""
    return ModifiedCharacteristics(order=1, mu=mu, grid=v_grid, phi_inf_grad=phi_inf_grad)


def _monomial(x: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
    result = np.ones(len(x))
    for k, a in enumerate(alpha):
        if a:
            result = result * x[:, k] ** a
    return result


def corrections(mc: ModifiedCharacteristics, t: float, x: np.ndarray, v: np.ndarray,
                outside: str = "raise") -> Tuple[np.ndarray, np.ndarray]:
    """(X_n - x, V_n - v) on arrays of points"""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if mc.order == 0:
        return np.zeros_like(x), np.zeros_like(v)
    log_t = np.log(t)
    grad = mc.phi_inf_grad.interpolate(v, outside=outside)
    dx = mc.mu * log_t * grad
    dv = mc.mu * grad / t
    for term, table in mc.x_tables.items():
        factor = _monomial(x, term.alpha) * log_t ** term.p / t ** term.q
        dx = dx + factor[:, None] * table.interpolate(v, outside=outside)
    for term, table in mc.v_tables.items():
        factor = _monomial(x, term.alpha) * log_t ** term.p / t ** (term.q + 1)
        dv = dv + factor[:, None] * table.interpolate(v, outside=outside)
    return dx, dv


def eval_XV_batch(mc: ModifiedCharacteristics, t: float, x: np.ndarray, v: np.ndarray,
                  outside: str = "raise") -> Tuple[np.ndarray, np.ndarray]:
    dx, dv = corrections(mc, t, x, v, outside)
    return np.atleast_2d(x) + dx, np.atleast_2d(v) + dv


def eval_XV(mc: ModifiedCharacteristics, t: float, x: Sequence[float],
            v: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate (X_n, V_n) at one point.

    Raises:
        ValueError: t < 2 or |x| > t
        GridError: v outside the velocity grid
    """
    if t < 2:
        raise ValueError(f"eval_XV needs t >= 2, got {t}")
    x = np.asarray(x, dtype=float)
    if np.linalg.norm(x) > t:
        raise ValueError(f"eval_XV needs |x| <= t, got |x|={np.linalg.norm(x):.3g} at t={t}")
    X, V = eval_XV_batch(mc, t, x[None, :], np.asarray(v, dtype=float)[None, :])
    return X[0], V[0]


def build_next_order(mc: ModifiedCharacteristics, force_fit: PolyhomogeneousFit,
                     table: AntiderivativeTable = antiderivatives) -> ModifiedCharacteristics:
    """
    Integrate the fitted force t^2 grad phi(t, X_n + t V_n) term by term.

    Each term x^alpha log^p(t)/t^q Phi(v) contributes mu Phi x^alpha log^p/t^{q+1}
    to d/dt X_{n+1} and -mu Phi x^alpha log^p/t^{q+2} to d/dt V_{n+1}. Integration
    constants vanish so the constant term of (X_{n+1}, V_{n+1}) is (x, v).

    Raises:
        ValueError: Inadmissible fitted term, or a fit order above the characteristics' order
        GridError: Fit grid differs from the characteristics' grid
    """
    if force_fit.grid is None:
        raise ValueError("Force fit must carry its velocity grid")
    require_same_geometry(force_fit.grid.geometry, mc.grid.geometry)
    geometry = mc.grid.geometry
    mu = mc.mu
    phi_inf_grad = VectorField3.zeros(geometry)
    x_acc: Dict[BasisTerm, np.ndarray] = {}
    v_acc: Dict[BasisTerm, np.ndarray] = {}

    for term in force_fit.basis:
        if not term.is_admissible:
            raise ValueError(f"Fitted force term {term} violates |alpha| + p <= q")
        if term.q > mc.order:
            raise ValueError(f"Fitted force term {term} exceeds characteristics order {mc.order}")
        values = np.nan_to_num(force_fit.coefficient(term))
        if values.shape[1] != 3:
            raise ValueError("Force fit must have three components")
        phi = values.T.reshape((3,) + tuple(geometry.shape))
        if term.q == 0:
            phi_inf_grad = VectorField3.from_array(geometry, phi)
            continue
        for (qj, pj), c in table[(term.q + 1, term.p)].items():
            key = BasisTerm(qj, term.alpha, pj)
            x_acc[key] = x_acc.get(key, 0.0) + mu * float(c) * phi
        for (qj, pj), c in table[(term.q + 2, term.p)].items():
            key = BasisTerm(qj - 1, term.alpha, pj)
            v_acc[key] = v_acc.get(key, 0.0) - mu * float(c) * phi

    def tables(acc: Dict[BasisTerm, np.ndarray]) -> Dict[BasisTerm, VectorField3]:
        return {
            key: VectorField3.from_array(geometry, values)
            for key, values in sorted(acc.items()) if np.any(values != 0.0)
        }

    nxt = ModifiedCharacteristics(
        order=mc.order + 1, mu=mu, grid=mc.grid, phi_inf_grad=phi_inf_grad,
        x_tables=tables(x_acc), v_tables=tables(v_acc),
    )
    logger.info(
        f"Built modified characteristics of order {nxt.order} "
        f"({len(nxt.x_tables)} X tables, {len(nxt.v_tables)} V tables)"
    )
    return nxt


@dataclass
class InversionResult:
    x: np.ndarray
    v: np.ndarray
    converged: np.ndarray
    residual: np.ndarray
    iterations: int


def invert_modification_batch(mc: ModifiedCharacteristics, t: float, target_x: np.ndarray,
                              target_v: np.ndarray) -> InversionResult:
    """
    Damped fixed point for X_n(t, a, b) + t V_n(t, a, b) = target_x, V_n(t, a, b) = target_v.

    Points whose iterate leaves the velocity grid or fails to converge are flagged.
    """
    target_x = np.atleast_2d(np.asarray(target_x, dtype=float))
    target_v = np.atleast_2d(np.asarray(target_v, dtype=float))
    free = target_x - t * target_v
    a, b = free.copy(), target_v.copy()
    residual = np.full(len(a), np.inf)
    active = np.ones(len(a), dtype=bool)
    iterations = 0
    for iterations in range(1, INVERSION_MAX_ITERATIONS + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        dx, dv = corrections(mc, t, a[idx], b[idx], outside="nan")
        a_next = free[idx] - dx
        b_next = target_v[idx] - dv
        step = np.maximum(np.max(np.abs(a_next - a[idx]), axis=1), np.max(np.abs(b_next - b[idx]), axis=1))
        lost = ~np.isfinite(step)
        done = (step <= INVERSION_TOLERANCE) & ~lost
        damped_a = a[idx] + INVERSION_DAMPING * (a_next - a[idx])
        damped_b = b[idx] + INVERSION_DAMPING * (b_next - b[idx])
        a[idx] = np.where(done[:, None], a_next, np.where(lost[:, None], a[idx], damped_a))
        b[idx] = np.where(done[:, None], b_next, np.where(lost[:, None], b[idx], damped_b))
        residual[idx] = np.where(lost, np.inf, step)
        active[idx[done | lost]] = False
    converged = residual <= INVERSION_TOLERANCE
    return InversionResult(x=a, v=b, converged=converged, residual=residual, iterations=iterations)


def invert_modification(mc: ModifiedCharacteristics, t: float, target_x: Sequence[float],
                        target_v: Sequence[float], time_threshold: float = 4.0,
                        window: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """
    Solve X_n + t V_n = target_x, V_n = target_v for (x, v).

    Raises:
        ValueError: t below the threshold or target outside the invertibility window
        InversionNotConvergedError: No convergence within 100 iterations
    """
    if mc.order > 0 and t < time_threshold:
        raise ValueError(f"invert_modification needs t >= {time_threshold}, got {t}")
    target_x = np.asarray(target_x, dtype=float)
    target_v = np.asarray(target_v, dtype=float)
    if np.linalg.norm(target_x - t * target_v) > window * t:
        raise ValueError(f"Target outside the invertibility window |x - t v| <= {window} t")
    result = invert_modification_batch(mc, t, target_x[None, :], target_v[None, :])
    if not result.converged[0]:
        raise InversionNotConvergedError(float(result.residual[0]))
    return result.x[0], result.v[0]


def modification_jacobian(mc: ModifiedCharacteristics, t: float, x: np.ndarray,
                          v: np.ndarray, h: float = JACOBIAN_STEP) -> np.ndarray:
    """det of the differential of (a, b) -> (X_n + t V_n, V_n) by central differences"""
    x = np.atleast_2d(x)
    v = np.atleast_2d(v)
    columns = []
    for k in range(6):
        offset = np.zeros((len(x), 6))
        offset[:, k] = h
        images = []
        for sign in (1.0, -1.0):
            xs = x + sign * offset[:, :3]
            vs = v + sign * offset[:, 3:]
            X, V = eval_XV_batch(mc, t, xs, vs, outside="nan")
            images.append(np.concatenate([X + t * V, V], axis=1))
        columns.append((images[0] - images[1]) / (2.0 * h))
    jacobian = np.stack(columns, axis=2)
    return np.linalg.det(jacobian)


def modified_profile_average(store: SnapshotStore, mc: ModifiedCharacteristics, t: float,
                             test_fn: Callable[..., np.ndarray],
                             weight_exponent: Sequence[int] = (0, 0, 0),
                             derivative_order: Sequence[int] = (0, 0, 0),
                             jacobian_weighted: bool = True,
                             time_threshold: float = 4.0, window: float = 0.5,
                             chunk: int = 4096) -> float:
    """
    Average of x^alpha d_v^kappa g_n(t) tested against a velocity function.

    Every particle is pulled back through the modification, (a_i, b_i), and contributes
    w_i a_i^alpha (-1)^|kappa| d^kappa chi(b_i) when |a_i| < t. With
    jacobian_weighted=False the contribution is divided by the Jacobian determinant
    of the modification.

    Raises:
        InversionNotConvergedError: Failed inversions carry more than 1% of the mass
    """
    if mc.order > 0 and t < time_threshold:
        raise ValueError(f"modified_profile_average needs t >= {time_threshold}, got {t}")
    snapshot = store.get(t)
    weights = store.weights
    positions, velocities = snapshot.positions, snapshot.velocities
    in_window = np.linalg.norm(positions - t * velocities, axis=1) <= window * t

    starts = range(0, len(weights), chunk)
    results = Parallel(n_jobs=settings.n_jobs)(
        delayed(invert_modification_batch)(mc, t, positions[s:s + chunk], velocities[s:s + chunk])
        for s in starts
    )
    a = np.concatenate([r.x for r in results])
    b = np.concatenate([r.v for r in results])
    converged = np.concatenate([r.converged for r in results])

    failed = in_window & ~converged
    mass = float(np.sum(np.abs(weights)))
    failed_fraction = float(np.sum(np.abs(weights[failed]))) / mass if mass > 0 else 0.0
    if failed_fraction > MAX_FAILED_MASS:
        worst = np.concatenate([r.residual for r in results])[failed]
        raise InversionNotConvergedError(float(np.max(worst)), failed_fraction)

    use = in_window & converged & (np.linalg.norm(a, axis=1) < t)
    if not np.any(use):
        return 0.0
    a_use, b_use = a[use], b[use]
    kappa = tuple(int(k) for k in derivative_order)
    values = weights[use] * _monomial(a_use, weight_exponent) * (-1) ** sum(kappa) * test_fn(b_use, kappa)
    if not jacobian_weighted:
        values = values / modification_jacobian(mc, t, a_use, b_use)
        # determinant undefined where a stencil point leaves the velocity grid
        values = np.where(np.isfinite(values), values, 0.0)
    return float(np.sum(values))
