"""Discrete-time OFDM observation of the direct and RIS-reflected paths.

Sample convention: after CP removal, column ``l`` of the K x L grid holds
the K fast-time samples of symbol ``l``, scaled so that the OFDM modulator
is the unitary inverse DFT. The constant T_CP phases are absorbed into the
path gains and the pilots, so the simplified matrix model and the exact
sampled model coincide whenever both Doppler factors are zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import SPEED_OF_LIGHT
from .geometry import Angles, SatelliteState, path_geometry


@dataclass(frozen=True)
class OfdmConfig:
    f_c: float
    n_subcarriers: int
    n_symbols: int
    subcarrier_spacing: float
    cp_fraction: float
    p_tot: float

    def __post_init__(self):
        if self.n_subcarriers < 1 or self.n_symbols < 1:
            raise ValueError("K and L must be positive")
        if self.subcarrier_spacing <= 0:
            raise ValueError("subcarrier spacing must be positive")
        if not 0 <= self.cp_fraction < 1:
            raise ValueError("cp_fraction must lie in [0, 1)")

    @property
    def T(self) -> float:
        return 1.0 / self.subcarrier_spacing

    @property
    def T_cp(self) -> float:
        return self.cp_fraction * self.T

    @property
    def T_sym(self) -> float:
        return self.T + self.T_cp

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing

    @property
    def sample_rate(self) -> float:
        return self.bandwidth

    @property
    def pilot_scale(self) -> float:
        return float(np.sqrt(self.p_tot / self.n_subcarriers))

    @property
    def delay_period(self) -> float:
        """Delays are only observable modulo 1/df."""
        return self.T

    @property
    def doppler_period(self) -> float:
        """Slow-time Doppler is only observable modulo 1/(f_c T_sym)."""
        return 1.0 / (self.f_c * self.T_sym)


@dataclass(frozen=True)
class ClockState:
    delta: float = 0.0
    delta_f: float = 0.0


@dataclass(frozen=True)
class LinkBudget:
    sat_gain_db: float = 30.0
    ue_gain_db: float = 0.0
    atm_loss_db: float = 0.2
    element_pattern_q: float = 1.0
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 7.0

    def __post_init__(self):
        if self.atm_loss_db < 0:
            raise ValueError("atmospheric loss must be non-negative")

    @property
    def noise_energy(self) -> float:
        """N0 * Nf in W/Hz (the energy-domain noise level)."""
        return 10 ** ((self.noise_psd_dbm_hz - 30) / 10) * 10 ** (self.noise_figure_db / 10)

    def noise_variance(self, cfg: OfdmConfig) -> float:
        """Per-sample noise variance in the unitary sample convention.

        Chosen so that total sample energy over this variance equals the
        energy SNR ``P_tot T (...) / (N0 Nf)``.
        """
        return self.noise_energy * cfg.subcarrier_spacing


@dataclass
class PathParams:
    path_id: str
    alpha: complex
    rho: float
    tau: float
    nu: float
    theta_rs: Angles | None = None
    theta_ru: Angles | None = None
    tau_sr: float | None = None
    nu_sr: float | None = None
    rho_track: np.ndarray | None = field(default=None, repr=False)

    def with_alpha(self, alpha: complex) -> "PathParams":
        return replace(self, alpha=complex(alpha), rho=float(abs(alpha)))


@dataclass
class ModelMatrices:
    """A, B, C per path, the RIS gain grid G and the unit-modulus pilots X."""

    A_su: np.ndarray
    B_su: np.ndarray
    C_su: np.ndarray
    A_sru: np.ndarray
    B_sru: np.ndarray
    C_sru: np.ndarray
    G: np.ndarray
    X: np.ndarray


@dataclass
class ObservationGrid:
    Y: np.ndarray
    noise_variance: float
    sample_rate: float = 0.0


class DimensionError(ValueError):
    pass


# --------------------------------------------------------------------------
# Pilots and path parameters
# --------------------------------------------------------------------------

def pilot_grid(cfg: OfdmConfig, rng: np.random.Generator | None = None, kind: str = "qpsk") -> np.ndarray:
    shape = (cfg.n_subcarriers, cfg.n_symbols)
    if kind == "ones":
        return np.ones(shape, dtype=complex)
    if kind != "qpsk":
        raise ValueError(f"unknown pilot kind {kind!r}")
    if rng is None:
        raise ValueError("QPSK pilots need an RNG")
    bits = rng.integers(0, 2, size=(2,) + shape)
    return ((1 - 2 * bits[0]) + 1j * (1 - 2 * bits[1])) / np.sqrt(2)


def element_gain(angles, q: float) -> float:
    """Element power pattern: pi * cos^q of the angle off the RIS normal (+y)."""
    cos_off = np.sin(angles[0]) * np.cos(angles[1])
    return float(np.pi * max(cos_off, 0.0) ** q)


def amplitude_model(d_su: float, d_sr: float, d_ru: float, theta_rs, theta_ru,
                    budget: LinkBudget, wavelength: float) -> tuple[float, float]:
    """Free-space amplitude of the direct path and the RIS path (per element)."""
    if min(d_su, d_sr, d_ru) <= 0:
        raise ValueError("ranges must be positive")
    g = 10 ** ((budget.sat_gain_db + budget.ue_gain_db - budget.atm_loss_db) / 20)
    rho_su = g * wavelength / (4 * np.pi * d_su)
    pattern = np.sqrt(element_gain(theta_rs, budget.element_pattern_q)
                      * element_gain(theta_ru, budget.element_pattern_q))
    rho_sru = g * wavelength**2 * pattern / ((4 * np.pi) ** 2 * d_sr * d_ru)
    return float(rho_su), float(rho_sru)


def doppler_factors(ue_position, ris_position, ris_rotation, sat_position, sat_velocity,
                    theta_rs, delta_f: float) -> tuple[float, float, float]:
    """(nu_su, nu_sr, nu_sru) from the satellite motion and the CFO."""
    from .geometry import direction_vector

    ue = np.asarray(ue_position, dtype=float)
    sat = np.asarray(sat_position, dtype=float)
    v = np.asarray(sat_velocity, dtype=float)
    los = ue - sat
    nu_su = float(v @ los / (np.linalg.norm(los) * SPEED_OF_LIGHT)) + delta_f
    rot = np.eye(3) if ris_rotation is None else np.asarray(ris_rotation)
    nu_sr = -float(v @ (rot @ direction_vector(theta_rs))) / SPEED_OF_LIGHT
    return nu_su, nu_sr, nu_sr + delta_f


def path_params_from_geometry(ue_position, ris_position, ris_rotation, sat_state: SatelliteState,
                              clock: ClockState, budget: LinkBudget,
                              cfg: OfdmConfig) -> tuple[PathParams, PathParams]:
    geo = path_geometry(ue_position, ris_position, ris_rotation, sat_state.position)
    c = SPEED_OF_LIGHT
    tau_su = geo.d_su / c + clock.delta
    tau_sr = geo.d_sr / c
    tau_sru = tau_sr + geo.d_ru / c + clock.delta
    nu_su, nu_sr, nu_sru = doppler_factors(ue_position, ris_position, ris_rotation,
                                           sat_state.position, sat_state.velocity,
                                           geo.theta_rs, clock.delta_f)
    rho_su, rho_sru = amplitude_model(geo.d_su, geo.d_sr, geo.d_ru, geo.theta_rs,
                                      geo.theta_ru, budget, cfg.wavelength)

    # Per-symbol amplitudes under linear satellite motion.
    track_su = np.empty(cfg.n_symbols)
    track_sru = np.empty(cfg.n_symbols)
    for ell in range(cfg.n_symbols):
        p = sat_state.position + ell * cfg.T_sym * sat_state.velocity
        g = path_geometry(ue_position, ris_position, ris_rotation, p)
        track_su[ell], track_sru[ell] = amplitude_model(g.d_su, g.d_sr, g.d_ru, g.theta_rs,
                                                        g.theta_ru, budget, cfg.wavelength)

    su = PathParams("su", rho_su * np.exp(-2j * np.pi * cfg.f_c * tau_su), rho_su,
                    tau_su, nu_su, rho_track=track_su)
    sru = PathParams("sru", rho_sru * np.exp(-2j * np.pi * cfg.f_c * tau_sru), rho_sru,
                     tau_sru, nu_sru, theta_rs=geo.theta_rs, theta_ru=geo.theta_ru,
                     tau_sr=tau_sr, nu_sr=nu_sr, rho_track=track_sru)
    return su, sru


# --------------------------------------------------------------------------
# Matrix model
# --------------------------------------------------------------------------

def _indices(cfg: OfdmConfig):
    k = np.arange(cfg.n_subcarriers)[:, None]
    ell = np.arange(cfg.n_symbols)[None, :]
    return k, ell


def fast_time_matrix(nu: float, cfg: OfdmConfig) -> np.ndarray:
    kappa, ell = _indices(cfg)
    row = np.exp(2j * np.pi * cfg.f_c * nu * kappa * cfg.T / cfg.n_subcarriers)
    return np.broadcast_to(row, (cfg.n_subcarriers, cfg.n_symbols)).copy()


def subcarrier_matrix(tau: float, nu: float, cfg: OfdmConfig) -> np.ndarray:
    k, ell = _indices(cfg)
    return np.exp(-2j * np.pi * k * cfg.subcarrier_spacing * (tau - nu * ell * cfg.T_sym))


def slow_time_matrix(nu: float, cfg: OfdmConfig) -> np.ndarray:
    k, ell = _indices(cfg)
    col = np.exp(2j * np.pi * cfg.f_c * nu * ell * cfg.T_sym)
    return np.broadcast_to(col, (cfg.n_subcarriers, cfg.n_symbols)).copy()


def build_model_matrices(su: PathParams, sru: PathParams, cfg: OfdmConfig,
                         ris_gain_sequence, pilots) -> ModelMatrices:
    g = np.asarray(ris_gain_sequence, dtype=complex)
    if g.shape != (cfg.n_symbols,):
        raise DimensionError("RIS gain sequence must have one entry per symbol")
    X = np.asarray(pilots, dtype=complex)
    if X.shape != (cfg.n_subcarriers, cfg.n_symbols):
        raise DimensionError("pilot grid shape does not match the OFDM config")
    return ModelMatrices(
        A_su=fast_time_matrix(su.nu, cfg),
        B_su=subcarrier_matrix(su.tau, su.nu, cfg),
        C_su=slow_time_matrix(su.nu, cfg),
        A_sru=fast_time_matrix(sru.nu, cfg),
        B_sru=subcarrier_matrix(sru.tau, sru.nu, cfg),
        C_sru=slow_time_matrix(sru.nu, cfg),
        G=np.broadcast_to(g[None, :], X.shape).copy(),
        X=X,
    )


def ofdm_modulate(M: np.ndarray) -> np.ndarray:
    """F^H M with F the unitary K-point DFT acting on columns."""
    return np.fft.ifft(M, axis=0, norm="ortho")


def ofdm_demodulate(M: np.ndarray) -> np.ndarray:
    """F M with F the unitary K-point DFT acting on columns."""
    return np.fft.fft(M, axis=0, norm="ortho")


def _alpha_columns(path: PathParams, per_symbol: bool) -> complex | np.ndarray:
    if per_symbol and path.rho_track is not None and path.rho > 0:
        return path.alpha * (path.rho_track / path.rho)[None, :]
    return path.alpha


def mean_observation(cfg: OfdmConfig, su: PathParams, sru: PathParams, m: ModelMatrices,
                     per_symbol_amplitudes: bool = False) -> np.ndarray:
    """Noise-free sum of both path contributions."""
    Xs = cfg.pilot_scale * m.X
    y_su = _alpha_columns(su, per_symbol_amplitudes) * m.A_su * ofdm_modulate(m.B_su * m.C_su * Xs)
    y_sru = _alpha_columns(sru, per_symbol_amplitudes) * m.A_sru * ofdm_modulate(
        m.B_sru * m.C_sru * m.G * Xs)
    return y_su + y_sru


def complex_noise(shape, variance: float, rng: np.random.Generator) -> np.ndarray:
    scale = np.sqrt(variance / 2)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def generate_observation(cfg: OfdmConfig, su: PathParams, sru: PathParams, matrices: ModelMatrices,
                         noise_variance: float, rng: np.random.Generator | None = None,
                         per_symbol_amplitudes: bool = False) -> ObservationGrid:
    shape = (cfg.n_subcarriers, cfg.n_symbols)
    for name in ("A_su", "B_su", "C_su", "A_sru", "B_sru", "C_sru", "G", "X"):
        if getattr(matrices, name).shape != shape:
            raise DimensionError(f"{name} has shape {getattr(matrices, name).shape}, expected {shape}")
    Y = mean_observation(cfg, su, sru, matrices, per_symbol_amplitudes)
    if noise_variance > 0:
        if rng is None:
            raise ValueError("noise needs an RNG")
        Y = Y + complex_noise(shape, noise_variance, rng)
    return ObservationGrid(Y=Y, noise_variance=float(noise_variance), sample_rate=cfg.sample_rate)


def _exact_path(cfg: OfdmConfig, path: PathParams, pilots: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """Unsimplified sampled path signal, evaluated by direct summation."""
    K = cfg.n_subcarriers
    df = cfg.subcarrier_spacing
    kappa = np.arange(K)
    k = np.arange(K)
    ell = np.arange(cfg.n_symbols)
    nu = path.nu
    # Raw pilots: the T_CP phase merged into X is taken back out here.
    raw = pilots * np.exp(-2j * np.pi * k * df * cfg.T_cp)[:, None]
    alpha = path.alpha * np.exp(-2j * np.pi * cfg.f_c * nu * cfg.T_cp)
    # s((1+nu) t - tau) at t = l T_sym + T_CP + kappa T/K, symbol l's pilots.
    dilation = np.exp(2j * np.pi * (1 + nu) * np.outer(kappa, k) / K)
    # Delay and drift phase exactly as in the matrix model, so large absolute
    # delays round identically on both sides.
    per_symbol = subcarrier_matrix(path.tau, nu, cfg) * np.exp(
        2j * np.pi * df * k * (1 + nu) * cfg.T_cp)[:, None]
    W = raw * per_symbol * gains[None, :] * cfg.pilot_scale
    s = dilation @ W / np.sqrt(K)
    t = ell[None, :] * cfg.T_sym + cfg.T_cp + kappa[:, None] * cfg.T / K
    return alpha * np.exp(2j * np.pi * cfg.f_c * nu * t) * s


def generate_observation_exact(cfg: OfdmConfig, su: PathParams, sru: PathParams, pilots,
                               ris_gain_sequence, noise_variance: float = 0.0,
                               rng: np.random.Generator | None = None) -> ObservationGrid:
    """Fidelity oracle: sampled signal without the small-Doppler simplifications."""
    X = np.asarray(pilots, dtype=complex)
    g = np.asarray(ris_gain_sequence, dtype=complex)
    Y = _exact_path(cfg, su, X, np.ones(cfg.n_symbols)) + _exact_path(cfg, sru, X, g)
    if noise_variance > 0:
        Y = Y + complex_noise(Y.shape, noise_variance, rng)
    return ObservationGrid(Y=Y, noise_variance=float(noise_variance), sample_rate=cfg.sample_rate)


def snr_db(cfg: OfdmConfig, alpha_su: complex, alpha_sru: complex, g_ris, budget: LinkBudget) -> float:
    """Energy SNR P_tot T (|a_su|^2 L + |a_sru|^2 ||g||^2) / (N0 Nf), in dB."""
    g = np.asarray(g_ris)
    energy = cfg.p_tot * cfg.T * (abs(alpha_su) ** 2 * cfg.n_symbols
                                  + abs(alpha_sru) ** 2 * float(np.vdot(g, g).real))
    return float(10 * np.log10(energy / budget.noise_energy))


# --------------------------------------------------------------------------
# Binary dump
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<IId")


def write_observation(path, grid: ObservationGrid) -> None:
    """Little-endian {K: u32, L: u32, fs: f64} then interleaved re/im, symbol-major."""
    Y = np.asarray(grid.Y, dtype=complex)
    K, L = Y.shape
    body = np.empty((L, K, 2), dtype="<f8")
    body[..., 0] = Y.T.real
    body[..., 1] = Y.T.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(K, L, float(grid.sample_rate)))
        fh.write(body.tobytes())


def read_observation(path) -> ObservationGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated observation dump")
    K, L, fs = _HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != 2 * K * L:
        raise ValueError(f"expected {2 * K * L} floats, found {body.size}")
    body = body.reshape(L, K, 2)
    Y = (body[..., 0] + 1j * body[..., 1]).T.copy()
    return ObservationGrid(Y=Y, noise_variance=float("nan"), sample_rate=fs)
