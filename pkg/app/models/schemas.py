"""Pydantic models for run configuration, reports and API responses"""
import math
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

from pydantic import BaseModel, Field, NonNegativeInt, PositiveFloat, field_validator, model_validator

from app.core.config import config_hash

Vector3 = Tuple[float, float, float]
MultiIndex = Tuple[NonNegativeInt, NonNegativeInt, NonNegativeInt]


def r_sequence(n: int) -> int:
    """Derivative-loss sequence r_n = 1 + n(n+1)/2"""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    return 1 + n * (n + 1) // 2


class BasisTerm(NamedTuple):
    """Polyhomogeneous basis element x^alpha log^p(t) / t^q"""
    q: int
    alpha: Tuple[int, int, int]
    p: int

    @property
    def is_admissible(self) -> bool:
        return self.q >= 0 and self.p >= 0 and min(self.alpha) >= 0 and \
            self.p + sum(self.alpha) <= self.q

    def label(self) -> str:
        return f"q={self.q},alpha={''.join(str(a) for a in self.alpha)},p={self.p}"


def multi_indices(order: int, dimension: int = 3) -> List[Tuple[int, ...]]:
    """All multi-indices of the given total order, lexicographically descending"""
    if dimension == 1:
        return [(order,)]
    result = []
    for first in range(order, -1, -1):
        for rest in multi_indices(order - first, dimension - 1):
            result.append((first,) + rest)
    return result


# ---------------------------------------------------------------------------
# Initial data
# ---------------------------------------------------------------------------

class PolynomialTerm(BaseModel):
    """One monomial c * x1^a1 x2^a2 x3^a3 v1^b1 v2^b2 v3^b3"""
    powers: Tuple[NonNegativeInt, NonNegativeInt, NonNegativeInt,
                  NonNegativeInt, NonNegativeInt, NonNegativeInt] = Field(
        ..., description="Exponents of (x1, x2, x3, v1, v2, v3)"
    )
    coefficient: float = Field(..., description="Monomial coefficient")

    model_config = {"extra": "forbid", "frozen": True}


class InitialDataSpec(BaseModel):
    """Analytic initial distribution f_0(x, v)"""
    family: str = Field(default="gaussian", pattern="^(gaussian|bump)$")
    amplitude: float = Field(default=1.0, ge=0.0, description="Overall scale of f_0")
    x_center: Vector3 = (0.0, 0.0, 0.0)
    v_center: Vector3 = (0.0, 0.0, 0.0)
    x_widths: Tuple[PositiveFloat, PositiveFloat, PositiveFloat] = (1.0, 1.0, 1.0)
    v_widths: Tuple[PositiveFloat, PositiveFloat, PositiveFloat] = (1.0, 1.0, 1.0)
    polynomial_prefactor: Optional[Tuple[PolynomialTerm, ...]] = Field(
        default=None, description="Polynomial P(x, v) multiplying the profile"
    )
    truncation: Optional[PositiveFloat] = Field(
        default=6.0,
        description="Gaussian support box half-size in widths; null means unbounded"
    )

    model_config = {
        "extra": "forbid",
        "frozen": True,
        "json_schema_extra": {
            "example": {
                "family": "gaussian",
                "amplitude": 0.05,
                "x_center": [0.0, 0.0, 0.0],
                "v_center": [0.0, 0.0, 0.0],
                "x_widths": [1.0, 1.0, 1.0],
                "v_widths": [1.0, 1.0, 1.0]
            }
        }
    }

    def scaled(self, amplitude: float) -> "InitialDataSpec":
        """Copy with another amplitude"""
        return self.model_copy(update={"amplitude": amplitude})

    @property
    def is_spherical(self) -> bool:
        """Spatial density is spherically symmetric for all times"""
        return (
            self.family == "gaussian"
            and self.polynomial_prefactor is None
            and len(set(self.x_widths)) == 1
            and len(set(self.v_widths)) == 1
            and self.x_center == (0.0, 0.0, 0.0)
            and self.v_center == (0.0, 0.0, 0.0)
        )


# ---------------------------------------------------------------------------
# Solver and policies
# ---------------------------------------------------------------------------

class SolverConfig(BaseModel):
    """Particle solver configuration"""
    mu: int = Field(default=1, description="+1 attractive, -1 repulsive")
    mesh_nodes: int = Field(default=48, ge=8, description="Deposit mesh nodes per axis")
    extent_policy: str = Field(default="expanding", pattern="^(fixed|expanding)$")
    half_extent: PositiveFloat = Field(default=8.0, description="Initial mesh half-extent")
    extent_margin: float = Field(default=1.25, ge=1.0)
    dt_factor: PositiveFloat = Field(default=0.05, description="dt = c * max(t, 1)")
    dt_max: PositiveFloat = Field(default=2.0)
    deposit: str = Field(default="CIC", pattern="^(CIC|TSC)$")
    force_path: str = Field(
        default="spherical_gauss", pattern="^(particle_mesh|spherical_gauss|direct)$"
    )
    softening: float = Field(default=0.0, ge=0.0, description="Direct-path softening")
    poisson_method: str = Field(default="spectral", pattern="^(spectral|direct)$")
    gradient_method: str = Field(default="centered", pattern="^(centered|spectral)$")
    t_end: PositiveFloat = Field(default=1000.0)
    snapshot_times: Optional[List[float]] = Field(
        default=None, description="Explicit schedule; null means t_k = 2 * 2^(k/4)"
    )
    particles_x: int = Field(default=6, ge=4, description="Quadrature nodes per x-axis")
    particles_v: int = Field(default=12, ge=4, description="Quadrature nodes per v-axis")
    rule_x: str = Field(default="gauss", pattern="^(gauss|uniform)$")
    rule_v: str = Field(default="uniform", pattern="^(gauss|uniform)$")
    sampler_jitter: float = Field(default=0.0, ge=0.0, lt=0.5)
    field_off: bool = Field(default=False, description="Free streaming with recorded fields")

    model_config = {"extra": "forbid"}

    @field_validator("mu")
    @classmethod
    def validate_mu(cls, v: int) -> int:
        if v not in (1, -1):
            raise ValueError("mu must be +1 or -1")
        return v

    @model_validator(mode="after")
    def validate_schedule(self) -> "SolverConfig":
        if self.snapshot_times is not None:
            times = self.snapshot_times
            if not times:
                raise ValueError("snapshot_times must not be empty")
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("snapshot_times must be strictly increasing")
            if times[0] < 0 or times[-1] > self.t_end:
                raise ValueError("snapshot_times must lie in [0, t_end]")
        return self

    def schedule(self) -> List[float]:
        """Snapshot times, geometric t_k = 2 * 2^(k/4) unless given"""
        if self.snapshot_times is not None:
            return list(self.snapshot_times)
        times = []
        k = 0
        while True:
            t = 2.0 * 2.0 ** (k / 4.0)
            if t > self.t_end * (1 + 1e-12):
                break
            times.append(t)
            k += 1
        return times


class ExpansionOrderPolicy(BaseModel):
    """Order, fit window and basis of polyhomogeneous fits"""
    n_max: int = Field(default=2, ge=0, le=6)
    fit_window: Tuple[PositiveFloat, PositiveFloat] = (50.0, 1000.0)
    max_alpha: Optional[NonNegativeInt] = None
    max_log_power: Optional[NonNegativeInt] = None

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def validate_window(self) -> "ExpansionOrderPolicy":
        if self.fit_window[1] <= self.fit_window[0]:
            raise ValueError("fit_window must be increasing")
        return self

    @property
    def r(self) -> List[int]:
        """r_1 .. r_{n_max + 1}"""
        return [r_sequence(n) for n in range(1, self.n_max + 2)]

    @property
    def basis(self) -> List[BasisTerm]:
        """Admissible (q, alpha, p) with p + |alpha| <= q <= n_max"""
        terms = []
        for q in range(self.n_max + 1):
            alpha_cap = q if self.max_alpha is None else min(q, self.max_alpha)
            for order in range(alpha_cap + 1):
                for alpha in reversed(multi_indices(order)):
                    p_cap = q - order
                    if self.max_log_power is not None:
                        p_cap = min(p_cap, self.max_log_power)
                    for p in range(p_cap + 1):
                        terms.append(BasisTerm(q, tuple(alpha), p))
        return terms

    def with_order(self, n_max: int, **updates: Any) -> "ExpansionOrderPolicy":
        return self.model_copy(update={"n_max": n_max, **updates})


class SuiteConfig(BaseModel):
    """Tolerances, sample points and windows of the verdict suites"""
    # Linear suite
    linear_window: Tuple[PositiveFloat, PositiveFloat] = (10.0, 1000.0)
    linear_points: int = Field(default=9, ge=6)
    linear_x: Vector3 = (0.0, 0.0, 0.0)
    # shift applied to f_0 by the rate, constant and tail checks
    linear_x_center: Vector3 = (0.4, 0.3, 0.2)
    linear_v_center: Vector3 = (0.3, 0.2, 0.1)
    slope_slack: PositiveFloat = 0.3
    conservation_v: Vector3 = (0.2, -0.1, 0.3)
    conservation_times: List[float] = [0.0, 1.0, 10.0, 100.0, 1000.0]
    conservation_rtol: PositiveFloat = 1e-8
    constants_window: Tuple[PositiveFloat, PositiveFloat] = (50.0, 2000.0)
    constants_points: int = Field(default=12, ge=6)
    constants_rtol: PositiveFloat = 0.01
    tail_order: int = Field(default=1, ge=0, le=3)
    tail_window: Tuple[PositiveFloat, PositiveFloat] = (20.0, 2000.0)
    tail_x_points: List[Vector3] = [
        (0.0, 0.0, 0.0), (0.3, 0.0, 0.0), (0.0, 0.3, 0.0), (0.0, 0.0, 0.3)
    ]
    tail_rtol: PositiveFloat = 0.05
    store_tail_rtol: PositiveFloat = 0.1
    kernel_samples: int = Field(default=20, ge=1)
    kernel_sample_extent: PositiveFloat = 10.0
    poisson_nodes: int = Field(default=64, ge=16)
    poisson_half_extent: PositiveFloat = 4.0

    # Weak convergence
    weak_betas: List[MultiIndex] = [(0, 0, 0), (1, 0, 0)]
    weak_v_bar: Vector3 = (0.0, 0.0, 0.0)
    weak_test_x_center: Vector3 = (0.5, 0.0, 0.0)
    weak_test_v_center: Vector3 = (0.3, 0.0, 0.0)
    weak_test_x_radius: PositiveFloat = 1.0
    weak_test_v_radius: PositiveFloat = 1.0
    weak_window: Tuple[PositiveFloat, PositiveFloat] = (10.0, 100.0)
    weak_points: int = Field(default=8, ge=6)
    weak_rtol: PositiveFloat = 0.02

    # Nonlinear extraction
    v_grid_extent: PositiveFloat = Field(default=4.0, description="Velocity grid half-extent")
    v_grid_nodes: int = Field(default=33, ge=5)
    ray_velocities: List[Vector3] = [
        (0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.5), (0.5, 0.5, 0.0), (1.0, 0.0, 0.0)
    ]
    force_x_points: List[Vector3] = [
        (0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (-0.5, 0.0, 0.0), (0.0, 0.5, 0.0),
        (0.0, -0.5, 0.0), (0.0, 0.0, 0.5), (0.0, 0.0, -0.5)
    ]
    test_velocity_centers: List[Vector3] = [
        (0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (0.0, 0.5, 0.5)
    ]
    test_velocity_radius: PositiveFloat = 1.0
    invert_time_threshold: float = Field(default=4.0, ge=2.0)
    invert_window: float = Field(default=0.5, gt=0.0, lt=1.0)
    error_bar_factor: PositiveFloat = 3.0
    free_flight_check: bool = True
    free_flight_amplitude: PositiveFloat = 1e-3
    free_flight_t_end: PositiveFloat = 5.0
    energy_check_t_end: PositiveFloat = 100.0
    energy_rtol: PositiveFloat = 1e-4
    # two extra runs to energy_check_t_end at dt and dt/2
    convergence_study: bool = True
    modified_weight_window: Tuple[PositiveFloat, PositiveFloat] = (10.0, 1000.0)
    z_mod_log_growth_max: PositiveFloat = Field(
        default=2.0, ge=1.0, description="Largest growth of z_mod drift / log t across the window"
    )
    v_mod_growth_max: PositiveFloat = Field(
        default=2.0, ge=1.0, description="Largest growth of the v_mod drift across the window"
    )

    model_config = {"extra": "forbid"}


class RunConfig(BaseModel):
    """Complete, hashable description of one lab run"""
    initial_data: InitialDataSpec = Field(default_factory=InitialDataSpec)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    policy: ExpansionOrderPolicy = Field(default_factory=ExpansionOrderPolicy)
    suite: SuiteConfig = Field(default_factory=SuiteConfig)
    output_dir: Optional[str] = Field(default=None, description="Artifact directory")
    deterministic: bool = False
    seed: Optional[int] = Field(default=None, description="Only used by sampler jitter")
    threads: Optional[int] = Field(default=None, ge=1)

    model_config = {"extra": "forbid"}

    def config_hash(self) -> str:
        """Hash of the physics-relevant content (stable under key reordering)"""
        payload = self.model_dump(mode="json", exclude={"output_dir", "threads"})
        return config_hash(payload)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class WeightedNormReport(BaseModel):
    """Sampled weighted derivative norm of f_0"""
    N: int = Field(..., description="Total derivative order")
    N_x: int = Field(..., description="Spatial weight exponent")
    N_v: int = Field(..., description="Velocity weight exponent")
    value: float = Field(..., ge=0.0)
    sample_count: int = Field(..., description="Number of sampled phase-space points")
    resolution: int = Field(..., description="Sample points per axis")


class RateFitReport(BaseModel):
    """Decay exponent of a time series"""
    quantity: str
    model: str = Field(..., pattern="^(pure_power|power_with_log|power_with_log_sq)$")
    exponent: float
    log_power: Optional[int] = None
    residual: float
    window: Tuple[float, float]
    points: int
    vacuous: bool = False

    @field_validator("exponent")
    @classmethod
    def validate_exponent(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("exponent must be finite")
        return v


class TailEntry(BaseModel):
    """Predicted against fitted coefficient"""
    key: str
    predicted: float
    fitted: float
    deviation: float
    relative_deviation: float
    error_bar: Optional[float] = None


class TailComparison(BaseModel):
    """Coefficient-by-coefficient comparison of an expansion"""
    order: int
    entries: List[TailEntry] = Field(default_factory=list)

    @property
    def max_relative_deviation(self) -> float:
        return max((entry.relative_deviation for entry in self.entries), default=0.0)

    def within_error_bars(self, factor: float = 1.0, atol: float = 0.0) -> bool:
        return all(
            entry.deviation <= factor * (entry.error_bar or 0.0) + atol
            for entry in self.entries
        )


class WeakConvergenceReport(BaseModel):
    """Weak limit comparison of a shearing-frame series"""
    beta: Tuple[int, int, int]
    v_bar: Vector3
    times: List[float]
    values: List[float]
    limit: float
    final_deviation: float
    final_relative_deviation: float
    rate: Optional[RateFitReport] = None
    vacuous: bool = False


class VerdictStatus(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    VACUOUS = "VACUOUS"


class Verdict(BaseModel):
    """Pass/fail report of one checked statement"""
    tag: str = Field(..., description="Descriptive check name")
    suite: str = Field(..., description="Suite that produced the verdict")
    status: VerdictStatus
    measured: Dict[str, Any] = Field(default_factory=dict)
    tolerances: Dict[str, Any] = Field(default_factory=dict)
    config_hash: str
    timestamp: str
    detail: Optional[str] = None

    model_config = {
        "json_schema_extra": {
            "example": {
                "tag": "linear_expansion_order",
                "suite": "linear",
                "status": "PASS",
                "measured": {"slopes": {"0": -2.01}},
                "tolerances": {"slope_slack": 0.3},
                "config_hash": "3f2a...",
                "timestamp": "2024-12-05T10:30:00Z"
            }
        }
    }


# ---------------------------------------------------------------------------
# API responses
# ---------------------------------------------------------------------------

class ErrorResponse(BaseModel):
    """Error response model"""
    error: str = Field(..., description="Error type")
    detail: str = Field(..., description="Error details")
    timestamp: str = Field(..., description="Error timestamp")
    path: Optional[str] = Field(None, description="Request path")


class HealthCheckResponse(BaseModel):
    """Health check response"""
    status: str = Field(..., description="Service status")
    reports_available: bool = Field(..., description="Whether the report directory exists")
    report_dir: str = Field(..., description="Served report directory")
    version: str = Field(..., description="API version")
    timestamp: str = Field(..., description="Current timestamp")


class StatsResponse(BaseModel):
    """Verdict tally of the report directory"""
    total: int = Field(..., description="Total verdicts")
    passed: int
    failed: int
    vacuous: int
    config_hashes: List[str] = Field(default_factory=list)
    session_start: str


class ReportSummary(BaseModel):
    """One row of the report listing"""
    tag: str
    suite: str
    status: VerdictStatus
    config_hash: str
    timestamp: str


class ReportListResponse(BaseModel):
    """Listing of available verdict reports"""
    reports: List[ReportSummary]
    count: int
