"""Fisher information and Cramer-Rao bounds for the channel and the UE state.

The channel FIM uses the standard circular-complex-Gaussian form
``FIM = (2 / sigma^2) Re{J^H J}`` with ``J = d vec(E[Y]) / d eta_ch`` over

    eta_ch = (tau_su, nu_su, tau_sru, nu_sru, az_ru, el_ru,
              Re a_su, Im a_su, Re a_sru, Im a_sru).

The state bound maps this onto (p_x, p_y, p_z, delta, delta_f) plus the
four gain components, which are treated as nuisance parameters and
marginalised by Schur complement. The RIS-path Doppler is a free channel
parameter here even though the estimator ties it to the LoS Doppler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import (
    OfdmConfig,
    PathParams,
    fast_time_matrix,
    ofdm_modulate,
    slow_time_matrix,
    subcarrier_matrix,
)
from .constants import SPEED_OF_LIGHT
from .geometry import Angles, local_angle_jacobian
from .ris import RisArray, gain_sequence, gain_sequence_derivatives

CHANNEL_PARAMS = ("tau_su", "nu_su", "tau_sru", "nu_sru", "aod_az", "aod_el",
                  "re_alpha_su", "im_alpha_su", "re_alpha_sru", "im_alpha_sru")
STATE_PARAMS = ("p_x", "p_y", "p_z", "delta", "delta_f",
                "re_alpha_su", "im_alpha_su", "re_alpha_sru", "im_alpha_sru")
EIGEN_FLOOR = 1e-18


class NumericalError(ArithmeticError):
    pass


@dataclass
class ChannelPoint:
    """A point in channel-parameter space plus the known waveform."""

    tau_su: float
    nu_su: float
    tau_sru: float
    nu_sru: float
    theta_ru: Angles
    alpha_su: complex
    alpha_sru: complex
    theta_rs: Angles
    pilots: np.ndarray
    phases: np.ndarray
    array: RisArray

    @classmethod
    def from_paths(cls, su: PathParams, sru: PathParams, pilots, phases, array: RisArray):
        return cls(su.tau, su.nu, sru.tau, sru.nu, Angles(*sru.theta_ru), complex(su.alpha),
                   complex(sru.alpha), Angles(*sru.theta_rs), np.asarray(pilots),
                   np.asarray(phases), array)

    def vector(self) -> np.ndarray:
        return np.array([self.tau_su, self.nu_su, self.tau_sru, self.nu_sru,
                         self.theta_ru.az, self.theta_ru.el, self.alpha_su.real,
                         self.alpha_su.imag, self.alpha_sru.real, self.alpha_sru.imag])

    def with_vector(self, eta) -> "ChannelPoint":
        e = np.asarray(eta, dtype=float)
        return ChannelPoint(e[0], e[1], e[2], e[3], Angles(e[4], e[5]), complex(e[6], e[7]),
                            complex(e[8], e[9]), self.theta_rs, self.pilots, self.phases,
                            self.array)


@dataclass
class FimReport:
    channel_fim: np.ndarray
    channel_crlb: np.ndarray
    state_fim: np.ndarray
    state_crlb: np.ndarray
    peb: float

    def as_dict(self) -> dict:
        out = {f"crlb_{n}": float(v) for n, v in zip(CHANNEL_PARAMS[:6], self.channel_crlb[:6])}
        out.update({f"crlb_{n}": float(v) for n, v in zip(STATE_PARAMS[:5], self.state_crlb[:5])})
        out["peb"] = float(self.peb)
        return out


# --------------------------------------------------------------------------
# Mean and Jacobian
# --------------------------------------------------------------------------

def _path_parts(tau, nu, cfg: OfdmConfig, S):
    """Pre-FFT grid M = B C S and the fast-time mask A for one path."""
    M = subcarrier_matrix(tau, nu, cfg) * slow_time_matrix(nu, cfg) * S
    return M, fast_time_matrix(nu, cfg)


def mean_grid(point: ChannelPoint, cfg: OfdmConfig) -> np.ndarray:
    """Noise-free K x L observation under the matrix model."""
    S = cfg.pilot_scale * point.pilots
    g = gain_sequence(point.array, point.phases, point.theta_rs, point.theta_ru, cfg.f_c)
    M_su, A_su = _path_parts(point.tau_su, point.nu_su, cfg, S)
    M_sru, A_sru = _path_parts(point.tau_sru, point.nu_sru, cfg, S * g[None, :])
    return point.alpha_su * A_su * ofdm_modulate(M_su) + point.alpha_sru * A_sru * ofdm_modulate(M_sru)


def jacobian_mean(point: ChannelPoint, cfg: OfdmConfig) -> np.ndarray:
    """d vec(E[Y]) / d eta_ch, shape (K*L, 10), column-major vec.

    Every column is analytic; the angle columns go through the analytic
    derivatives of the RIS gain sequence.
    """
    K, L = cfg.n_subcarriers, cfg.n_symbols
    k = np.arange(K)[:, None] * cfg.subcarrier_spacing
    ell_t = np.arange(L)[None, :] * cfg.T_sym
    fast = (np.arange(K) * cfg.T / K)[:, None]
    S = cfg.pilot_scale * point.pilots
    g = gain_sequence(point.array, point.phases, point.theta_rs, point.theta_ru, cfg.f_c)
    g_az, g_el = gain_sequence_derivatives(point.array, point.phases, point.theta_rs,
                                           point.theta_ru, cfg.f_c)

    def path_columns(tau, nu, alpha, Sg):
        M, A = _path_parts(tau, nu, cfg, Sg)
        base = A * ofdm_modulate(M)
        d_tau = alpha * A * ofdm_modulate(-2j * np.pi * k * M)
        d_nu = alpha * (2j * np.pi * cfg.f_c * fast * base
                        + A * ofdm_modulate(2j * np.pi * (k + cfg.f_c) * ell_t * M))
        return base, d_tau, d_nu, A, M

    base_su, dtau_su, dnu_su, _, _ = path_columns(point.tau_su, point.nu_su, point.alpha_su, S)
    base_sru, dtau_sru, dnu_sru, A_sru, _ = path_columns(point.tau_sru, point.nu_sru,
                                                            point.alpha_sru, S * g[None, :])
    pre = subcarrier_matrix(point.tau_sru, point.nu_sru, cfg) * slow_time_matrix(point.nu_sru, cfg) * S
    d_az = point.alpha_sru * A_sru * ofdm_modulate(pre * g_az[None, :])
    d_el = point.alpha_sru * A_sru * ofdm_modulate(pre * g_el[None, :])
    cols = [dtau_su, dnu_su, dtau_sru, dnu_sru, d_az, d_el,
            base_su, 1j * base_su, base_sru, 1j * base_sru]
    J = np.stack([c.reshape(-1, order="F") for c in cols], axis=1)
    if not np.all(np.isfinite(J)):
        raise NumericalError("non-finite derivative in the mean Jacobian")
    return J


def jacobian_numeric(point: ChannelPoint, cfg: OfdmConfig, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``mean_grid``; for checking ``jacobian_mean``."""
    eta = point.vector()
    scales = np.array([cfg.T / cfg.n_subcarriers, 1.0 / (cfg.f_c * cfg.T_sym * cfg.n_symbols),
                       cfg.T / cfg.n_subcarriers, 1.0 / (cfg.f_c * cfg.T_sym * cfg.n_symbols),
                       1.0, 1.0, abs(point.alpha_su), abs(point.alpha_su),
                       abs(point.alpha_sru), abs(point.alpha_sru)])
    cols = []
    for i in range(eta.size):
        h = rel_step * scales[i]
        e_p, e_m = eta.copy(), eta.copy()
        e_p[i] += h
        e_m[i] -= h
        diff = mean_grid(point.with_vector(e_p), cfg) - mean_grid(point.with_vector(e_m), cfg)
        cols.append((diff / (2 * h)).reshape(-1, order="F"))
    return np.stack(cols, axis=1)


def fim_channel(J, noise_variance: float) -> np.ndarray:
    """(2 / sigma^2) Re{J^H J}, symmetrised."""
    if not noise_variance > 0:
        raise ValueError("noise variance must be positive")
    J = np.asarray(J)
    F = 2.0 / noise_variance * np.real(J.conj().T @ J)
    return (F + F.T) / 2


# --------------------------------------------------------------------------
# Inversion
# --------------------------------------------------------------------------

def robust_inverse(F, floor: float = EIGEN_FLOOR) -> np.ndarray:
    """Inverse of a symmetric PSD FIM, with unbounded directions reported as inf.

    The matrix is equilibrated by its diagonal, eigen-decomposed, and
    eigenvalues below ``floor * max`` are dropped; any parameter with weight
    on a dropped direction gets an infinite variance.
    """
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    d = np.sqrt(np.clip(np.diag(F), 0.0, None))
    zero = d == 0
    dinv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, d))
    Fe = dinv[:, None] * F * dinv[None, :]
    w, V = np.linalg.eigh((Fe + Fe.T) / 2)
    wmax = max(float(w.max()), 0.0) if w.size else 0.0
    keep = w > floor * wmax if wmax > 0 else np.zeros(n, dtype=bool)
    inv = (V[:, keep] / w[keep]) @ V[:, keep].T
    inv = dinv[:, None] * inv * dinv[None, :]
    bad = zero.copy()
    if np.any(~keep):
        bad |= np.max(np.abs(V[:, ~keep]), axis=1) > 1e-8
    inv[bad, :] = np.inf
    inv[:, bad] = np.inf
    return inv


def crlb_diagonal(F) -> np.ndarray:
    return np.diag(robust_inverse(F)).copy()


def schur_marginal(F, keep) -> np.ndarray:
    """Equivalent FIM of the ``keep`` parameters with the rest marginalised."""
    F = np.asarray(F, dtype=float)
    keep = np.asarray(keep)
    rest = np.setdiff1d(np.arange(F.shape[0]), keep)
    if rest.size == 0:
        return F[np.ix_(keep, keep)]
    Frr_inv = robust_inverse(F[np.ix_(rest, rest)])
    Frr_inv = np.where(np.isfinite(Frr_inv), Frr_inv, 0.0)
    S = F[np.ix_(keep, keep)] - F[np.ix_(keep, rest)] @ Frr_inv @ F[np.ix_(rest, keep)]
    return (S + S.T) / 2


# --------------------------------------------------------------------------
# Channel -> state
# --------------------------------------------------------------------------

def state_jacobian(ue_position, ris_position, ris_rotation, sat_position, sat_velocity) -> np.ndarray:
    """T = d eta_ch / d eta_st, shape (10, 9)."""
    c = SPEED_OF_LIGHT
    p = np.asarray(ue_position, dtype=float)
    ris = np.asarray(ris_position, dtype=float)
    sat = np.asarray(sat_position, dtype=float)
    v = np.asarray(sat_velocity, dtype=float)
    los = p - sat
    d_su = float(np.linalg.norm(los))
    u_su = los / d_su
    ru = p - ris
    d_ru = float(np.linalg.norm(ru))
    T = np.zeros((10, 9))
    T[0, :3] = u_su / c
    T[0, 3] = 1.0
    T[1, :3] = (v - u_su * (u_su @ v)) / (d_su * c)
    T[1, 4] = 1.0
    T[2, :3] = ru / (d_ru * c)
    T[2, 3] = 1.0
    T[3, 4] = 1.0
    T[4:6, :3] = local_angle_jacobian(ru, ris_rotation)
    T[6:, 5:] = np.eye(4)
    return T


def state_fim(channel_fim, T) -> np.ndarray:
    F = np.asarray(T).T @ np.asarray(channel_fim) @ np.asarray(T)
    return (F + F.T) / 2


def state_bounds(channel_fim, T) -> tuple[np.ndarray, np.ndarray, float]:
    """(state FIM, CRLB of (p, delta, delta_f), PEB) with gains marginalised."""
    F = state_fim(channel_fim, T)
    eq = schur_marginal(F, np.arange(5))
    crlb = np.diag(robust_inverse(eq)).copy()
    peb = float(np.sqrt(np.sum(crlb[:3])))
    return F, crlb, peb


def fim_report(point: ChannelPoint, cfg: OfdmConfig, noise_variance: float, ue_position,
               ris_position, ris_rotation, sat_position, sat_velocity) -> FimReport:
    Fc = fim_channel(jacobian_mean(point, cfg), noise_variance)
    T = state_jacobian(ue_position, ris_position, ris_rotation, sat_position, sat_velocity)
    Fs, crlb_st, peb = state_bounds(Fc, T)
    return FimReport(channel_fim=Fc, channel_crlb=crlb_diagonal(Fc), state_fim=Fs,
                     state_crlb=crlb_st, peb=peb)

