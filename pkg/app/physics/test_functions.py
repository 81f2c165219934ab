"""Compactly supported test functions for weak-limit checks"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate

from app.physics.initial_data import profile_derivative, tensor_rule

Vector3 = Tuple[float, float, float]


@lru_cache(maxsize=1)
def bump_integral() -> float:
    """Integral of exp(1 - 1/(1 - s^2)) over (-1, 1)"""
    value, _ = integrate.quad(lambda s: float(profile_derivative("bump", np.array([s]), 0)[0]),
                              -1.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
    return value


def _bump_product(points: np.ndarray, center: Sequence[float], radius: float,
                  order: Sequence[int]) -> np.ndarray:
    s = (np.asarray(points, dtype=float) - np.asarray(center)) / radius
    result = np.ones(s.shape[:-1])
    for k in range(3):
        result = result * profile_derivative("bump", s[..., k], order[k]) / radius ** order[k]
    return result


@dataclass(frozen=True)
class VelocityBump:
    """Smooth bump of v supported in the cube center +- radius"""
    center: Vector3 = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __call__(self, v: np.ndarray, dv: Sequence[int] = (0, 0, 0)) -> np.ndarray:
        return _bump_product(v, self.center, self.radius, dv)

    def support(self) -> Tuple[np.ndarray, np.ndarray]:
        center = np.asarray(self.center)
        return center - self.radius, center + self.radius

    def integral(self) -> float:
        return (self.radius * bump_integral()) ** 3


@dataclass(frozen=True)
class ProductBump:
    """
    chi(x, v) = bump((x - x_center)/x_radius) * bump((v - v_center)/v_radius),
    a product over the three axes of both factors.
    """
    x_center: Vector3 = (0.0, 0.0, 0.0)
    x_radius: float = 1.0
    v_center: Vector3 = (0.0, 0.0, 0.0)
    v_radius: float = 1.0

    @property
    def velocity_factor(self) -> VelocityBump:
        return VelocityBump(self.v_center, self.v_radius)

    def __call__(self, x: np.ndarray, v: np.ndarray, dx: Sequence[int] = (0, 0, 0),
                 dv: Sequence[int] = (0, 0, 0)) -> np.ndarray:
        return (
            _bump_product(x, self.x_center, self.x_radius, dx)
            * _bump_product(v, self.v_center, self.v_radius, dv)
        )

    def x_integral(self, v: Sequence[float]) -> float:
        """Integral over x of chi(x, v)"""
        v_value = float(self.velocity_factor(np.asarray(v, dtype=float)))
        return (self.x_radius * bump_integral()) ** 3 * v_value

    def x_rule(self, nodes: int) -> Tuple[np.ndarray, np.ndarray]:
        """Gauss-Legendre tensor rule over the spatial support"""
        s, w = leggauss(nodes)
        rules = [(c + self.x_radius * s, self.x_radius * w) for c in self.x_center]
        return tensor_rule(rules)
