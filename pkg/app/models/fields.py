"""Grid fields and particle ensembles"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from app.core.exceptions import GridError

_HEADER = struct.Struct("<3d3d3q")


@dataclass(frozen=True)
class GridGeometry:
    """Uniform Cartesian node grid"""
    origin: Tuple[float, float, float]
    spacing: float
    shape: Tuple[int, int, int]

    def __post_init__(self):
        if not (self.spacing > 0 and np.isfinite(self.spacing)):
            raise GridError(f"Grid spacing must be positive, got {self.spacing}")
        if len(self.shape) != 3 or min(self.shape) < 2:
            raise GridError(f"Grid needs at least 2 nodes per axis, got {self.shape}")

    @classmethod
    def centered(cls, center: Sequence[float], half_extent: float, nodes: int) -> "GridGeometry":
        """Grid of ``nodes`` per axis spanning center +- half_extent"""
        center = np.asarray(center, dtype=float)
        spacing = 2.0 * half_extent / (nodes - 1)
        origin = tuple(float(c) for c in center - half_extent)
        return cls(origin=origin, spacing=float(spacing), shape=(nodes, nodes, nodes))

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * (np.asarray(self.shape) - 1)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axes(self):
        return [self.origin[k] + self.spacing * np.arange(self.shape[k]) for k in range(3)]

    def mesh(self):
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self) -> np.ndarray:
        """Node coordinates, shape (size, 3), C order"""
        return np.stack([m.ravel() for m in self.mesh()], axis=1)

    def index_coordinates(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - np.asarray(self.origin)) / self.spacing

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Mask of points inside [origin + margin, upper - margin]"""
        points = np.atleast_2d(points)
        lo = np.asarray(self.origin) + margin
        hi = self.upper - margin
        return np.all((points >= lo - 1e-12 * self.spacing) & (points <= hi + 1e-12 * self.spacing), axis=1)

    def matches(self, other: "GridGeometry", rtol: float = 1e-12) -> bool:
        return (
            self.shape == other.shape
            and np.isclose(self.spacing, other.spacing, rtol=rtol, atol=0.0)
            and np.allclose(self.origin, other.origin, rtol=0.0, atol=rtol * self.spacing)
        )


def require_same_geometry(a: GridGeometry, b: GridGeometry) -> None:
    if not a.matches(b):
        raise GridError(f"Grid geometry mismatch: {a} vs {b}")


@dataclass(frozen=True)
class VGrid:
    """Velocity (or self-similar) grid description"""
    extent: float
    nodes_per_axis: int
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry.centered(self.center, self.extent, self.nodes_per_axis)

    @property
    def spacing(self) -> float:
        return self.geometry.spacing

    def covers(self, lower: np.ndarray, upper: np.ndarray, margin: float = 0.0) -> bool:
        geometry = self.geometry
        return bool(
            np.all(np.asarray(geometry.origin) <= np.asarray(lower) - margin)
            and np.all(geometry.upper >= np.asarray(upper) + margin)
        )


@dataclass
class ScalarField3:
    """Values on the nodes of a GridGeometry"""
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != tuple(self.geometry.shape):
            raise GridError(
                f"Field shape {self.values.shape} does not match grid {self.geometry.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GridError("Field values must be finite")

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "ScalarField3":
        return cls(geometry, np.zeros(geometry.shape))

    @classmethod
    def from_function(cls, geometry: GridGeometry, func) -> "ScalarField3":
        x, y, z = geometry.mesh()
        return cls(geometry, func(x, y, z))

    @classmethod
    def from_coordinates(cls, x: np.ndarray, y: np.ndarray, z: np.ndarray,
                         values: np.ndarray) -> "ScalarField3":
        """Build from 1-D axis coordinates; axes must share one uniform spacing"""
        axes = [np.asarray(a, dtype=float) for a in (x, y, z)]
        spacings = []
        for a in axes:
            steps = np.diff(a)
            if steps.size == 0 or np.any(steps <= 0):
                raise GridError("Axis coordinates must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
                raise GridError("Non-uniform grid spacing")
            spacings.append(steps[0])
        if not np.allclose(spacings, spacings[0], rtol=1e-9, atol=0.0):
            raise GridError(f"Axes have different spacings: {spacings}")
        geometry = GridGeometry(
            origin=tuple(float(a[0]) for a in axes),
            spacing=float(spacings[0]),
            shape=tuple(len(a) for a in axes),
        )
        return cls(geometry, np.asarray(values, dtype=float).reshape(geometry.shape))

    def interpolate(self, points: np.ndarray, outside: str = "raise") -> np.ndarray:
        """
        Trilinear interpolation at arbitrary points.

        Args:
            points: (n, 3) coordinates
            outside: "raise" for GridError, "nan" to return NaN outside the grid

        Returns:
            (n,) values
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.geometry.contains(points)
        if not np.all(inside) and outside == "raise":
            first = int(np.flatnonzero(~inside)[0])
            raise GridError(f"Point {points[first].tolist()} outside grid")
        coords = self.geometry.index_coordinates(points).T
        result = ndimage.map_coordinates(self.values, coords, order=1, mode="nearest")
        if not np.all(inside):
            result = np.where(inside, result, np.nan)
        return result

    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __add__(self, other: "ScalarField3") -> "ScalarField3":
        require_same_geometry(self.geometry, other.geometry)
        return ScalarField3(self.geometry, self.values + other.values)

    def __sub__(self, other: "ScalarField3") -> "ScalarField3":
        require_same_geometry(self.geometry, other.geometry)
        return ScalarField3(self.geometry, self.values - other.values)

    def scaled(self, factor: float) -> "ScalarField3":
        return ScalarField3(self.geometry, factor * self.values)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(*self.geometry.origin, *([self.geometry.spacing] * 3),
                              *self.geometry.shape)
        return header + np.ascontiguousarray(self.values, dtype="<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ScalarField3":
        values = _HEADER.unpack_from(payload)
        origin, spacing, shape = values[0:3], values[3:6], values[6:9]
        if not np.allclose(spacing, spacing[0], rtol=1e-12, atol=0.0):
            raise GridError(f"Non-uniform spacing in field header: {spacing}")
        geometry = GridGeometry(tuple(origin), float(spacing[0]), tuple(int(n) for n in shape))
        data = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size)
        if data.size != geometry.size:
            raise GridError(f"Field payload holds {data.size} values, header expects {geometry.size}")
        return cls(geometry, data.reshape(geometry.shape).astype(float))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScalarField3":
        return cls.from_bytes(Path(path).read_bytes())

    def to_frame(self) -> pd.DataFrame:
        points = self.geometry.points()
        return pd.DataFrame({
            "x": points[:, 0], "y": points[:, 1], "z": points[:, 2],
            "value": self.values.ravel(),
        })

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass
class VectorField3:
    """Three scalar components on one grid"""
    components: Tuple[ScalarField3, ScalarField3, ScalarField3]

    def __post_init__(self):
        if len(self.components) != 3:
            raise GridError("VectorField3 needs exactly three components")
        for component in self.components[1:]:
            require_same_geometry(self.components[0].geometry, component.geometry)
        self.components = tuple(self.components)

    @classmethod
    def from_array(cls, geometry: GridGeometry, values: np.ndarray) -> "VectorField3":
        """From an array shaped (3, nx, ny, nz)"""
        return cls(tuple(ScalarField3(geometry, values[k]) for k in range(3)))

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "VectorField3":
        return cls.from_array(geometry, np.zeros((3,) + tuple(geometry.shape)))

    @property
    def geometry(self) -> GridGeometry:
        return self.components[0].geometry

    def stack(self) -> np.ndarray:
        return np.stack([c.values for c in self.components])

    def interpolate(self, points: np.ndarray, outside: str = "raise") -> np.ndarray:
        return np.stack([c.interpolate(points, outside=outside) for c in self.components], axis=1)

    def node_values(self) -> np.ndarray:
        """(size, 3) values in C node order"""
        return self.stack().reshape(3, -1).T

    def norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.stack() ** 2, axis=0))

    def sup(self) -> float:
        return float(np.max(self.norm()))

    def scaled(self, factor: float) -> "VectorField3":
        return VectorField3(tuple(c.scaled(factor) for c in self.components))

    def __add__(self, other: "VectorField3") -> "VectorField3":
        return VectorField3(tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "VectorField3") -> "VectorField3":
        return VectorField3(tuple(a - b for a, b in zip(self.components, other.components)))


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass
class ModifiedWeightState:
    """Per-particle corrections phi (of x - tv) and w (of v)"""
    phi_corr: np.ndarray
    w_corr: np.ndarray

    @classmethod
    def zeros(cls, count: int) -> "ModifiedWeightState":
        return cls(np.zeros((count, 3)), np.zeros((count, 3)))

    def copy(self) -> "ModifiedWeightState":
        return ModifiedWeightState(self.phi_corr.copy(), self.w_corr.copy())


@dataclass
class ParticleEnsemble:
    """Quadrature-weighted particles in Lagrangian form"""
    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray
    initial_positions: np.ndarray
    initial_velocities: np.ndarray
    mu: int = 1
    time: float = 0.0
    modified: Optional[ModifiedWeightState] = None

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float)
        self.velocities = np.array(self.velocities, dtype=float)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ValueError("positions and velocities must have shape (count, 3)")
        # weights and initial data never change after seeding
        if not (isinstance(self.weights, np.ndarray) and not self.weights.flags.writeable):
            self.weights = _frozen(self.weights)
        if not (isinstance(self.initial_positions, np.ndarray)
                and not self.initial_positions.flags.writeable):
            self.initial_positions = _frozen(self.initial_positions)
        if not (isinstance(self.initial_velocities, np.ndarray)
                and not self.initial_velocities.flags.writeable):
            self.initial_velocities = _frozen(self.initial_velocities)
        if self.weights.shape != (n,):
            raise ValueError("weights must have shape (count,)")
        if self.mu not in (1, -1):
            raise ValueError(f"mu must be +1 or -1, got {self.mu}")
        if self.modified is None:
            self.modified = ModifiedWeightState.zeros(n)

    @classmethod
    def from_arrays(cls, positions, velocities, weights, mu: int = 1) -> "ParticleEnsemble":
        return cls(positions, velocities, weights, positions, velocities, mu=mu)

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def momentum(self) -> np.ndarray:
        return self.weights @ self.velocities

    def kinetic_energy(self) -> float:
        return 0.5 * float(self.weights @ np.sum(self.velocities ** 2, axis=1))

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(
            self.positions.copy(), self.velocities.copy(), self.weights,
            self.initial_positions, self.initial_velocities,
            mu=self.mu, time=self.time, modified=self.modified.copy(),
        )

    def z_mod(self) -> np.ndarray:
        """x - t v + phi for every particle"""
        return self.positions - self.time * self.velocities + self.modified.phi_corr

    def v_mod(self) -> np.ndarray:
        """v + w for every particle"""
        return self.velocities + self.modified.w_corr


@dataclass
class Snapshot:
    """Solver state and fields at one scheduled time"""
    time: float
    step: int
    positions: np.ndarray
    velocities: np.ndarray
    phi_corr: np.ndarray
    w_corr: np.ndarray
    rho: ScalarField3
    phi: ScalarField3
    grad_phi: VectorField3
    conserved: Dict[str, float] = field(default_factory=dict)
    modified_stats: Dict[str, float] = field(default_factory=dict)
