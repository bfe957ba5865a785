"""Equirectangular coordinate conventions.

Azimuth ``theta`` runs along image columns, polar angle ``phi`` along rows,
with row 0 next to the north pole (``phi`` near 0). All angles are radians.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SphericalPoint:
    rho: float
    theta: float
    phi: float

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        if not 0.0 <= self.phi <= math.pi:
            raise ValueError(f"phi must lie in [0, pi], got {self.phi}")
        object.__setattr__(self, "theta", float(self.theta) % TWO_PI)


def sph_to_cart(p: SphericalPoint) -> tuple[float, float, float]:
    s = math.sin(p.phi)
    return (p.rho * s * math.cos(p.theta), p.rho * s * math.sin(p.theta), p.rho * math.cos(p.phi))


def cart_to_sph(x: float, y: float, z: float) -> SphericalPoint:
    rho = math.sqrt(x * x + y * y + z * z)
    if rho == 0.0:
        return SphericalPoint(0.0, 0.0, 0.0)
    phi = math.acos(max(-1.0, min(1.0, z / rho)))
    theta = math.atan2(y, x) % TWO_PI
    return SphericalPoint(rho, theta, phi)


def chord_distance(a: SphericalPoint, b: SphericalPoint) -> float:
    """Straight-line distance between two points given in spherical form."""
    ax, ay, az = sph_to_cart(a)
    bx, by, bz = sph_to_cart(b)
    return math.sqrt((ax - bx) ** 2 + (ay - by) ** 2 + (az - bz) ** 2)


def sph_to_cart_array(rho, theta, phi) -> np.ndarray:
    """Vectorized conversion; returns an array with a trailing axis of 3."""
    rho, theta, phi = np.broadcast_arrays(
        np.asarray(rho, dtype=np.float64),
        np.asarray(theta, dtype=np.float64),
        np.asarray(phi, dtype=np.float64),
    )
    s = np.sin(phi)
    return np.stack([rho * s * np.cos(theta), rho * s * np.sin(theta), rho * np.cos(phi)], axis=-1)


@dataclass(frozen=True)
class AngularGrid:
    """Pixel-center angles of an ``height x width`` equirectangular image."""

    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ValueError(f"grid extents must be positive, got {self.height}x{self.width}")

    @property
    def theta(self) -> np.ndarray:
        return (np.arange(self.width) + 0.5) * (TWO_PI / self.width)

    @property
    def phi(self) -> np.ndarray:
        return (np.arange(self.height) + 0.5) * (math.pi / self.height)


def build_grid(height: int, width: int) -> AngularGrid:
    if height < 1 or width < 1:
        raise ValueError(f"grid extents must be positive, got {height}x{width}")
    return AngularGrid(int(height), int(width))
