"""Coordinate conversions, RIS local-frame angles and the satellite orbit.

Scene coordinates live in a global frame whose origin sits on the Earth
surface below the scene, z pointing up. Angle tuples are (azimuth,
elevation) in radians.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .constants import EARTH_RADIUS_M, MU_EARTH

_POLE_EPS = 1e-12


class DegenerateGeometryError(ValueError):
    """Raised when two points that must be distinct coincide."""


class Angles(NamedTuple):
    az: float
    el: float


def direction_vector(angles) -> np.ndarray:
    """Unit vector u(theta) for an (az, el) tuple."""
    az, el = angles
    ce = np.cos(el)
    return np.array([np.cos(az) * ce, np.sin(az) * ce, np.sin(el)])


def direction_derivatives(angles) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of u(theta) with respect to azimuth and elevation."""
    az, el = angles
    ca, sa, ce, se = np.cos(az), np.sin(az), np.cos(el), np.sin(el)
    d_az = np.array([-sa * ce, ca * ce, 0.0])
    d_el = np.array([-ca * se, -sa * se, ce])
    return d_az, d_el


def local_angles(delta_p, rotation=None) -> tuple[Angles, float]:
    """Azimuth/elevation of ``delta_p`` seen in the frame rotated by ``rotation``.

    ``rotation`` maps local coordinates to global ones, so the local vector
    is ``rotation.T @ delta_p``. Returns the angle tuple and the range.
    """
    delta_p = np.asarray(delta_p, dtype=float)
    q = delta_p if rotation is None else np.asarray(rotation).T @ delta_p
    dist = float(np.linalg.norm(q))
    if dist == 0.0:
        raise DegenerateGeometryError("zero-length direction vector")
    horiz = float(np.hypot(q[0], q[1]))
    az = 0.0 if horiz < _POLE_EPS else float(np.arctan2(q[1], q[0]))
    el = float(np.arctan2(q[2], horiz))
    return Angles(az, el), dist


def local_angle_jacobian(delta_p, rotation=None) -> np.ndarray:
    """2x3 Jacobian of (az, el) of ``delta_p`` with respect to ``delta_p``."""
    rot = np.eye(3) if rotation is None else np.asarray(rotation)
    q = rot.T @ np.asarray(delta_p, dtype=float)
    h2 = q[0] ** 2 + q[1] ** 2
    h = np.sqrt(h2)
    d2 = h2 + q[2] ** 2
    if h < _POLE_EPS:
        raise DegenerateGeometryError("azimuth derivative undefined at the pole")
    d_az = np.array([-q[1], q[0], 0.0]) / h2
    d_el = np.array([-q[0] * q[2], -q[1] * q[2], h2]) / (h * d2)
    return np.vstack([d_az, d_el]) @ rot.T


def is_rotation(matrix, tol: float = 1e-12) -> bool:
    m = np.asarray(matrix, dtype=float)
    if m.shape != (3, 3):
        return False
    return bool(np.allclose(m.T @ m, np.eye(3), atol=tol) and abs(np.linalg.det(m) - 1.0) < tol)


# --------------------------------------------------------------------------
# Orbit
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OrbitSpec:
    """Circular orbit seen from a ground frame.

    ``direction`` selects the along-track sense of the great circle through
    the initial angles: ``"rising"`` moves the satellite toward zenith,
    ``"setting"`` away from it.
    """

    altitude: float
    initial_angles: Angles
    earth_radius: float = EARTH_RADIUS_M
    direction: str = "rising"
    mu: float = MU_EARTH

    def __post_init__(self):
        if self.altitude <= 0 or self.earth_radius <= 0:
            raise ValueError("altitude and earth radius must be positive")
        if self.direction not in ("rising", "setting"):
            raise ValueError(f"unknown orbit direction {self.direction!r}")

    @property
    def angular_rate(self) -> float:
        return float(np.sqrt(self.mu / (self.earth_radius + self.altitude) ** 3))

    @property
    def speed(self) -> float:
        return float(np.sqrt(self.mu / (self.earth_radius + self.altitude)))


@dataclass(frozen=True)
class SatelliteState:
    position: np.ndarray
    velocity: np.ndarray
    t: float = 0.0


def slant_range(elevation: float, altitude: float, earth_radius: float = EARTH_RADIUS_M) -> float:
    """Distance from the ground origin to a satellite at ``elevation``."""
    s = np.sin(-elevation)
    r = earth_radius
    return float(r * s + np.sqrt(r**2 * s**2 + 2 * r * altitude + altitude**2))


def _orbit_plane(spec: OrbitSpec) -> tuple[np.ndarray, np.ndarray]:
    u0 = direction_vector(spec.initial_angles)
    d0 = slant_range(spec.initial_angles.el, spec.altitude, spec.earth_radius)
    r0 = d0 * u0 + np.array([0.0, 0.0, spec.earth_radius])
    e1 = r0 / np.linalg.norm(r0)
    az = spec.initial_angles.az
    toward = -np.array([np.cos(az), np.sin(az), 0.0])
    if spec.direction == "setting":
        toward = -toward
    e2 = toward - (toward @ e1) * e1
    n = np.linalg.norm(e2)
    if n < 1e-12:
        raise DegenerateGeometryError("orbit track direction is undefined")
    return e1, e2 / n


def orbit_state(spec: OrbitSpec, t: float = 0.0) -> SatelliteState:
    """Satellite position and velocity at time ``t`` on the circular track.

    The Earth centre sits at ``-earth_radius`` on the global z axis, so the
    position norm equals :func:`slant_range` at the current elevation.
    """
    e1, e2 = _orbit_plane(spec)
    radius = spec.earth_radius + spec.altitude
    phase = spec.angular_rate * t
    r = radius * (np.cos(phase) * e1 + np.sin(phase) * e2)
    v = radius * spec.angular_rate * (-np.sin(phase) * e1 + np.cos(phase) * e2)
    position = r - np.array([0.0, 0.0, spec.earth_radius])
    return SatelliteState(position=position, velocity=v, t=float(t))


# --------------------------------------------------------------------------
# Path geometry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PathGeometry:
    d_su: float
    d_sr: float
    d_ru: float
    theta_rs: Angles
    theta_ru: Angles
    theta_su: Angles

    @property
    def excess_path(self) -> float:
        """d_sr + d_ru - d_su; non-negative by the triangle inequality."""
        return self.d_sr + self.d_ru - self.d_su


def path_geometry(ue_position, ris_position, ris_rotation, sat_position) -> PathGeometry:
    ue = np.asarray(ue_position, dtype=float)
    ris = np.asarray(ris_position, dtype=float)
    sat = np.asarray(sat_position, dtype=float)
    theta_ru, d_ru = local_angles(ue - ris, ris_rotation)
    theta_rs, d_sr = local_angles(sat - ris, ris_rotation)
    theta_su, d_su = local_angles(ue - sat)
    return PathGeometry(d_su=d_su, d_sr=d_sr, d_ru=d_ru,
                        theta_rs=theta_rs, theta_ru=theta_ru, theta_su=theta_su)
