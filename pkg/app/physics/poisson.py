"""Free-space Poisson solver and kernel bound integrals"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft
from scipy import integrate, special

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.core.logging import get_logger
from app.models.fields import ScalarField3, VectorField3

logger = get_logger(__name__)

BOUNDARY_RATIO_LIMIT = 1e-6


@dataclass
class PoissonReport:
    """Diagnostics of one solve"""
    method: str
    residual: float
    boundary_ratio: float


def _log_plus(a: np.ndarray, r: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """log(a + r) for r = sqrt(a^2 + b2), stable for negative a"""
    out = np.empty_like(a)
    positive = a >= 0
    out[positive] = np.log(a[positive] + r[positive])
    negative = ~positive
    out[negative] = np.log(b2[negative] / (r[negative] - a[negative]))
    return out


def box_antiderivative(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """F with d^3F/dxdydz = 1/|r|; no coordinate may vanish"""
    r = np.sqrt(x * x + y * y + z * z)
    return (
        y * z * _log_plus(x, r, y * y + z * z)
        + x * z * _log_plus(y, r, x * x + z * z)
        + x * y * _log_plus(z, r, x * x + y * y)
        - 0.5 * x * x * np.arctan(y * z / (x * r))
        - 0.5 * y * y * np.arctan(x * z / (y * r))
        - 0.5 * z * z * np.arctan(x * y / (z * r))
    )


@lru_cache(maxsize=8)
def _unit_cell_kernel(shape: Tuple[int, int, int]) -> np.ndarray:
    """
    Cell-integrated Green's function -(1/4pi) * integral of 1/|r| over each unit cell,
    laid out on the doubled grid in wrap-around order.
    """
    corners = []
    offsets = []
    for n in shape:
        m = np.arange(-(n - 1), n + 1, dtype=float)
        corners.append(m - 0.5)
        offsets.append(np.arange(-(n - 1), n))
    cx, cy, cz = np.meshgrid(*corners, indexing="ij")
    values = box_antiderivative(cx, cy, cz)
    cell_integrals = np.diff(np.diff(np.diff(values, axis=0), axis=1), axis=2)

    doubled = tuple(2 * n for n in shape)
    kernel = np.zeros(doubled)
    index = [o % d for o, d in zip(offsets, doubled)]
    kernel[np.ix_(*index)] = -cell_integrals / (4.0 * np.pi)
    return kernel


@lru_cache(maxsize=8)
def _unit_kernel_spectrum(shape: Tuple[int, int, int]) -> np.ndarray:
    return sfft.rfftn(_unit_cell_kernel(shape))


def _boundary_ratio(values: np.ndarray) -> float:
    peak = np.max(np.abs(values))
    if peak == 0.0:
        return 0.0
    faces = [
        values[0], values[-1], values[:, 0], values[:, -1], values[:, :, 0], values[:, :, -1]
    ]
    return float(max(np.max(np.abs(f)) for f in faces) / peak)


def _solve_spectral(rho: ScalarField3, workers: int) -> np.ndarray:
    shape = rho.geometry.shape
    doubled = tuple(2 * n for n in shape)
    spectrum = _unit_kernel_spectrum(tuple(shape))
    source = sfft.rfftn(rho.values, s=doubled, workers=workers)
    result = sfft.irfftn(spectrum * source, s=doubled, workers=workers)
    return result[:shape[0], :shape[1], :shape[2]]


def _solve_direct(rho: ScalarField3, chunk: int = 64) -> np.ndarray:
    shape = rho.geometry.shape
    if max(shape) > settings.direct_poisson_max_nodes:
        raise ConfigError(
            f"Direct Poisson path limited to {settings.direct_poisson_max_nodes} nodes per axis, "
            f"got {shape}"
        )
    kernel = _unit_cell_kernel(tuple(shape))
    doubled = kernel.shape
    idx = np.indices(shape).reshape(3, -1).T
    source = rho.values.ravel()
    result = np.zeros(len(idx))
    for start in range(0, len(idx), chunk):
        targets = idx[start:start + chunk]
        diff = targets[:, None, :] - idx[None, :, :]
        k = kernel[diff[..., 0] % doubled[0], diff[..., 1] % doubled[1], diff[..., 2] % doubled[2]]
        result[start:start + chunk] = k @ source
    return result.reshape(shape)


def solve_freespace_with_report(rho: ScalarField3, method: str = "spectral",
                                workers: Optional[int] = None) -> Tuple[ScalarField3, PoissonReport]:
    """
    Solve Laplacian(phi) = rho with phi -> 0 at infinity.

    Args:
        rho: Source on a uniform grid
        method: "spectral" (zero-padded FFT convolution) or "direct" (Green sum)
        workers: scipy.fft worker count (defaults to settings.threads)

    Returns:
        (phi, report) where report carries the relative interior residual of the
        7-point Laplacian and the boundary-to-peak ratio of rho
    """
    workers = workers or settings.threads
    ratio = _boundary_ratio(rho.values)
    if ratio > BOUNDARY_RATIO_LIMIT:
        logger.warning(f"Poisson source does not decay at the grid boundary (ratio {ratio:.2e})")

    if not np.any(rho.values):
        phi = np.zeros(rho.geometry.shape)
    elif method == "spectral":
        phi = _solve_spectral(rho, workers)
    elif method == "direct":
        phi = _solve_direct(rho)
    else:
        raise ValueError(f"Unknown Poisson method: {method}")

    phi_field = ScalarField3(rho.geometry, rho.geometry.spacing ** 2 * phi)
    report = PoissonReport(method=method, residual=relative_residual(phi_field, rho),
                           boundary_ratio=ratio)
    logger.debug(f"Poisson solve ({method}) residual {report.residual:.3e}")
    return phi_field, report


def solve_freespace(rho: ScalarField3, method: str = "spectral",
                    workers: Optional[int] = None) -> ScalarField3:
    """Free-space potential of rho; see solve_freespace_with_report"""
    return solve_freespace_with_report(rho, method, workers)[0]


def laplacian(phi: ScalarField3) -> ScalarField3:
    """7-point Laplacian on interior nodes (zero on the boundary)"""
    v = phi.values
    h2 = phi.geometry.spacing ** 2
    out = np.zeros_like(v)
    out[1:-1, 1:-1, 1:-1] = (
        v[2:, 1:-1, 1:-1] + v[:-2, 1:-1, 1:-1]
        + v[1:-1, 2:, 1:-1] + v[1:-1, :-2, 1:-1]
        + v[1:-1, 1:-1, 2:] + v[1:-1, 1:-1, :-2]
        - 6.0 * v[1:-1, 1:-1, 1:-1]
    ) / h2
    return ScalarField3(phi.geometry, out)


def relative_residual(phi: ScalarField3, rho: ScalarField3) -> float:
    """max |Laplacian_h phi - rho| / max |rho| over interior nodes"""
    scale = np.max(np.abs(rho.values))
    if scale == 0.0:
        return 0.0
    diff = laplacian(phi).values - rho.values
    return float(np.max(np.abs(diff[1:-1, 1:-1, 1:-1])) / scale)


def gradient(phi: ScalarField3, method: str = "centered") -> VectorField3:
    """
    Gradient of a node field.

    centered: second-order differences, one-sided second order at the boundary.
    spectral: FFT differentiation, only meaningful for fields that vanish smoothly
    at the grid boundary.
    """
    h = phi.geometry.spacing
    if method == "centered":
        components = np.gradient(phi.values, h, edge_order=2)
    elif method == "spectral":
        components = []
        for axis, n in enumerate(phi.geometry.shape):
            k = 2j * np.pi * sfft.fftfreq(n, d=h)
            if n % 2 == 0:
                k[n // 2] = 0.0
            shape = [1, 1, 1]
            shape[axis] = n
            transformed = sfft.fft(phi.values, axis=axis, workers=settings.threads)
            components.append(np.real(sfft.ifft(transformed * k.reshape(shape), axis=axis)))
    else:
        raise ValueError(f"Unknown gradient method: {method}")
    return VectorField3(tuple(ScalarField3(phi.geometry, c) for c in components))


def derivative(field: ScalarField3, order: Sequence[int]) -> ScalarField3:
    """Mixed partial derivative by repeated centered differences"""
    values = field.values
    for axis, count in enumerate(order):
        for _ in range(count):
            values = np.gradient(values, field.geometry.spacing, axis=axis, edge_order=2)
    return ScalarField3(field.geometry, values)


def gaussian_charge_potential(r: np.ndarray) -> np.ndarray:
    """Exact potential of rho = exp(-|x|^2): -(sqrt(pi)/4) erf(r)/r"""
    r = np.asarray(r, dtype=float)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, -np.sqrt(np.pi) / 4.0 * special.erf(safe) / safe, -0.5)


def gaussian_charge_field(r: np.ndarray) -> np.ndarray:
    """Radial derivative of gaussian_charge_potential (enclosed mass over 4 pi r^2)"""
    r = np.asarray(r, dtype=float)
    safe = np.where(r > 0, r, 1.0)
    enclosed = np.pi ** 1.5 * special.erf(safe) - 2.0 * np.pi * safe * np.exp(-safe ** 2)
    return np.where(r > 0, enclosed / (4.0 * np.pi * safe ** 2), 0.0)


def kernel_integral(x: Sequence[float], t: float = 0.0) -> float:
    """
    Integral of dy / (|y|^2 (1 + t + |x + y|)^3) over R^3.

    The angular integral is done in closed form; the radial one by adaptive quadrature.
    """
    a = float(np.linalg.norm(np.asarray(x, dtype=float)))
    b = 1.0 + t
    if a == 0.0:
        return 2.0 * np.pi / b ** 2

    def antiderivative(s):
        return -1.0 / (b + s) + b / (2.0 * (b + s) ** 2)

    def radial(r):
        if r == 0.0:
            return 4.0 * np.pi * a / (b + a) ** 3 / a
        return 2.0 * np.pi * (antiderivative(a + r) - antiderivative(abs(a - r))) / (a * r)

    inner, _ = integrate.quad(radial, 0.0, 2.0 * a, points=[a], limit=200, epsabs=1e-13, epsrel=1e-12)
    outer, _ = integrate.quad(radial, 2.0 * a, np.inf, limit=200, epsabs=1e-13, epsrel=1e-12)
    return inner + outer


def kernel_bound_check(x: Sequence[float]) -> float:
    """Unscaled kernel integral (bounded by 7 pi)"""
    return kernel_integral(x, 0.0)


def scaled_kernel_bound_check(x: Sequence[float], t: float) -> float:
    """t^2 times the kernel integral with 1 + t in the denominator (bounded by 7 pi)"""
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    return t ** 2 * kernel_integral(x, t)
