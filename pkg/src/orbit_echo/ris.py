"""RIS array model, steering vectors and per-symbol phase profiles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import SPEED_OF_LIGHT
from .geometry import (
    DegenerateGeometryError,
    direction_derivatives,
    direction_vector,
    local_angles,
)

MAX_RESAMPLES = 16
# K * df * max|tau_n| must stay well below one for the frequency-flat steering model.
NARROWBAND_LIMIT = 0.1


@dataclass(frozen=True)
class RisArray:
    """Uniform rectangular array in the local x-z plane, centred on the origin.

    Element ``n = iz * n_x + ix``: x runs fastest.
    """

    n_x: int
    n_z: int
    wavelength: float

    @property
    def n_elements(self) -> int:
        return self.n_x * self.n_z

    @property
    def element_spacing(self) -> float:
        return self.wavelength / 2

    @property
    def element_positions(self) -> np.ndarray:
        d = self.element_spacing
        ix = (np.arange(self.n_x) - (self.n_x - 1) / 2) * d
        iz = (np.arange(self.n_z) - (self.n_z - 1) / 2) * d
        zz, xx = np.meshgrid(iz, ix, indexing="ij")
        pos = np.zeros((self.n_elements, 3))
        pos[:, 0] = xx.ravel()
        pos[:, 2] = zz.ravel()
        return pos

    def narrowband_ratio(self, bandwidth: float) -> float:
        """Worst-case K*df*|tau_n| over all directions."""
        return bandwidth * float(np.max(np.linalg.norm(self.element_positions, axis=1))) / SPEED_OF_LIGHT

    def check_narrowband(self, bandwidth: float) -> None:
        ratio = self.narrowband_ratio(bandwidth)
        if ratio >= NARROWBAND_LIMIT:
            raise ValueError(
                f"array aperture too large for bandwidth: K*df*max|tau_n| = {ratio:.3g}"
            )


@dataclass(frozen=True)
class BeamformingPrior:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be a symmetric 3x3 matrix")
        if np.min(np.linalg.eigvalsh(cov)) < -1e-12 * max(1.0, np.abs(cov).max()):
            raise ValueError("covariance must be positive semi-definite")


@dataclass
class RisProfile:
    """Per-symbol RIS configuration; column ``l`` of ``phases`` is omega_l."""

    phases: np.ndarray
    gain_sequence: np.ndarray | None = field(default=None)

    @property
    def n_symbols(self) -> int:
        return self.phases.shape[1]


def steering_matrix(array: RisArray, az, el, f_c: float) -> np.ndarray:
    """Steering vectors for many directions, shape (n_angles, N)."""
    az = np.atleast_1d(np.asarray(az, dtype=float))
    el = np.atleast_1d(np.asarray(el, dtype=float))
    u = np.stack([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)], axis=-1)
    phase = 2 * np.pi * f_c / SPEED_OF_LIGHT * (u @ array.element_positions.T)
    return np.exp(1j * phase)


def steering_vector(array: RisArray, angles, f_c: float) -> np.ndarray:
    """a_n(theta) = exp(j 2 pi f_c p_n^T u(theta) / c)."""
    u = direction_vector(angles)
    return np.exp(1j * 2 * np.pi * f_c / SPEED_OF_LIGHT * (array.element_positions @ u))


def random_profile(array: RisArray, n_symbols: int, rng: np.random.Generator) -> RisProfile:
    if n_symbols < 1:
        raise ValueError("need at least one symbol")
    phi = rng.uniform(0.0, 2 * np.pi, size=(array.n_elements, n_symbols))
    return RisProfile(phases=np.exp(1j * phi))


def beamform_profile(array: RisArray, theta_rs, prior: BeamformingPrior, ris_position,
                     ris_rotation, n_symbols: int, f_c: float,
                     rng: np.random.Generator) -> RisProfile:
    """Stochastic beamforming toward draws from the position prior.

    Each symbol points the RIS at a fresh sample p~ ~ N(mean, cov); draws
    that land on the RIS itself are redrawn.
    """
    if n_symbols < 1:
        raise ValueError("need at least one symbol")
    a_rs = steering_vector(array, theta_rs, f_c)
    ris_position = np.asarray(ris_position, dtype=float)
    mean = np.asarray(prior.mean, dtype=float)
    cov = np.asarray(prior.covariance, dtype=float)
    phases = np.empty((array.n_elements, n_symbols), dtype=complex)
    for ell in range(n_symbols):
        for _ in range(MAX_RESAMPLES + 1):
            sample = rng.multivariate_normal(mean, cov, method="eigh")
            try:
                theta, _ = local_angles(sample - ris_position, ris_rotation)
            except DegenerateGeometryError:
                continue
            break
        else:
            raise DegenerateGeometryError("beamforming draws keep coinciding with the RIS")
        phases[:, ell] = np.conj(a_rs * steering_vector(array, theta, f_c))
    return RisProfile(phases=phases)


def gain_sequence(array: RisArray, phases, theta_rs, theta_ru, f_c: float) -> np.ndarray:
    """g_l = (a(theta_rs) * a(theta_ru))^T omega_l for every symbol."""
    w = steering_vector(array, theta_rs, f_c) * steering_vector(array, theta_ru, f_c)
    return w @ np.asarray(phases)


def gain_sequence_grid(array: RisArray, phases, theta_rs, az, el, f_c: float) -> np.ndarray:
    """Gain sequences for a batch of departure angles, shape (n_angles, L)."""
    a_rs = steering_vector(array, theta_rs, f_c)
    return (steering_matrix(array, az, el, f_c) * a_rs) @ np.asarray(phases)


def gain_sequence_derivatives(array: RisArray, phases, theta_rs, theta_ru,
                              f_c: float) -> tuple[np.ndarray, np.ndarray]:
    """d g / d az and d g / d el at ``theta_ru``."""
    k0 = 2 * np.pi * f_c / SPEED_OF_LIGHT
    w = steering_vector(array, theta_rs, f_c) * steering_vector(array, theta_ru, f_c)
    du_az, du_el = direction_derivatives(theta_ru)
    pos = array.element_positions
    phases = np.asarray(phases)
    g_az = (w * 1j * k0 * (pos @ du_az)) @ phases
    g_el = (w * 1j * k0 * (pos @ du_el)) @ phases
    return g_az, g_el
