"""Cloud-in-cell and triangular-shaped-cloud deposit/gather kernels"""
import itertools
from typing import List, Tuple

import numpy as np

from app.core.exceptions import ParticleOutsideMeshError
from app.models.fields import GridGeometry, ScalarField3, VectorField3


def _stencil(geometry: GridGeometry, positions: np.ndarray, kernel: str,
             time: float = 0.0, outside: str = "raise") -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
    """
    Per-axis node indices and weights of every particle.

    Returns:
        (indices, weights, inside) where indices[k], weights[k] have shape (n, 3)
        for stencil point k along each axis
    """
    s = geometry.index_coordinates(positions)
    shape = np.asarray(geometry.shape)
    if kernel == "CIC":
        inside = np.all((s >= 0.0) & (s <= shape - 1), axis=1)
    elif kernel == "TSC":
        inside = np.all((s >= 0.5) & (s <= shape - 1.5), axis=1)
    else:
        raise ValueError(f"Unknown deposit kernel: {kernel}")

    if not np.all(inside):
        if outside == "raise":
            first = int(np.flatnonzero(~inside)[0])
            raise ParticleOutsideMeshError(first, time, positions[first])
        s = np.where(inside[:, None], s, 1.0)

    if kernel == "CIC":
        base = np.minimum(np.floor(s), shape - 2).astype(np.int64)
        frac = s - base
        indices = [base, base + 1]
        weights = [1.0 - frac, frac]
    else:
        base = np.clip(np.rint(s), 1, shape - 2).astype(np.int64)
        d = s - base
        indices = [base - 1, base, base + 1]
        weights = [0.5 * (0.5 - d) ** 2, 0.75 - d ** 2, 0.5 * (0.5 + d) ** 2]
    return indices, weights, inside


def deposit(positions: np.ndarray, masses: np.ndarray, geometry: GridGeometry,
            kernel: str = "CIC", time: float = 0.0, outside: str = "raise") -> ScalarField3:
    """
    Deposit particle masses as a density (mass per cell volume).

    Args:
        positions: (n, 3) particle positions
        masses: (n,) particle masses
        geometry: Target grid
        kernel: "CIC" or "TSC"
        time: Simulation time for error messages
        outside: "raise" or "drop" for particles off the mesh

    Raises:
        ParticleOutsideMeshError: Particle outside the mesh with outside="raise"
    """
    indices, weights, inside = _stencil(geometry, positions, kernel, time, outside)
    masses = np.where(inside, masses, 0.0)
    nx, ny, nz = geometry.shape
    total = np.zeros(geometry.size)
    # fixed stencil order keeps the reduction deterministic
    for combo in itertools.product(range(len(indices)), repeat=3):
        flat = (indices[combo[0]][:, 0] * ny + indices[combo[1]][:, 1]) * nz + indices[combo[2]][:, 2]
        w = weights[combo[0]][:, 0] * weights[combo[1]][:, 1] * weights[combo[2]][:, 2]
        total += np.bincount(flat, weights=masses * w, minlength=geometry.size)
    return ScalarField3(geometry, total.reshape(geometry.shape) / geometry.cell_volume)


def gather(field: ScalarField3, positions: np.ndarray, kernel: str = "CIC",
           time: float = 0.0) -> np.ndarray:
    """Interpolate a node field at particle positions with the deposit stencil"""
    indices, weights, _ = _stencil(field.geometry, positions, kernel, time)
    values = field.values
    result = np.zeros(len(positions))
    for combo in itertools.product(range(len(indices)), repeat=3):
        w = weights[combo[0]][:, 0] * weights[combo[1]][:, 1] * weights[combo[2]][:, 2]
        result += w * values[indices[combo[0]][:, 0], indices[combo[1]][:, 1], indices[combo[2]][:, 2]]
    return result


def gather_vector(field: VectorField3, positions: np.ndarray, kernel: str = "CIC",
                  time: float = 0.0) -> np.ndarray:
    return np.stack([gather(c, positions, kernel, time) for c in field.components], axis=1)
