"""Staged delay/Doppler/AoD estimation and the position, clock and CFO solve.

Stages, in order:

1. remove the bulk fast-time and subcarrier Doppler using the known
   satellite-RIS Doppler;
2. coarse LoS delay/Doppler from a zero-padded 2D FFT;
3. iterative 2D ML grid refinement of the LoS delay/Doppler, closed-form gain;
4. subtract the reconstructed LoS path;
5. compensate the RIS-path Doppler with the LoS Doppler estimate;
6. coarse RIS-path delay from a 1D FFT with non-coherent integration;
7. iterative 2D ML grid refinement of the RIS angle of departure;
8. iterative 1D ML grid refinement of the RIS-path delay, closed-form gain;
9. RIS-UE range from the differential delay, then position, clock bias, CFO.

Every ML stage only ever searches a 1D or 2D grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .channel import (
    OfdmConfig,
    fast_time_matrix,
    ofdm_demodulate,
    ofdm_modulate,
    slow_time_matrix,
    subcarrier_matrix,
)
from .constants import SPEED_OF_LIGHT
from .geometry import Angles, direction_vector
from .ris import RisArray, gain_sequence, gain_sequence_grid
from .scenario import EstimatorConfig

_ROW_CHUNK = 256


class EstimationError(RuntimeError):
    """Failure inside one estimator stage; ``stage`` names it."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class NoPeakError(EstimationError):
    pass


class NumericalError(EstimationError):
    pass


class GeometryInconsistentError(EstimationError):
    pass


@dataclass
class EstimatorKnowns:
    """Everything the receiver knows besides the observation."""

    ris_position: np.ndarray
    ris_rotation: np.ndarray
    sat_position: np.ndarray
    sat_velocity: np.ndarray
    theta_rs: Angles
    nu_sr: float
    d_sr: float
    array: RisArray
    phases: np.ndarray
    pilots: np.ndarray

    @property
    def tau_sr(self) -> float:
        return self.d_sr / SPEED_OF_LIGHT


@dataclass
class ChannelEstimates:
    tau_su: float
    nu_su: float
    alpha_su: complex
    tau_sru: float
    nu_sru: float
    theta_ru: Angles
    alpha_sru: complex
    tau_ru: float
    delay_wrapped: bool = True
    history: dict = field(default_factory=dict, repr=False)


@dataclass
class LocalizationResult:
    position: np.ndarray
    clock_bias: float
    cfo: float
    d_ru: float


def wrap(x, period: float):
    """Representative of ``x`` modulo ``period`` in (-period/2, period/2]."""
    r = np.mod(np.asarray(x, dtype=float) + period / 2, period)
    r = np.where(r == 0.0, period, r) - period / 2
    return float(r) if np.ndim(r) == 0 else r


# --------------------------------------------------------------------------
# Projector / grid machinery
# --------------------------------------------------------------------------

def projector(z) -> np.ndarray:
    """Orthogonal projector onto span(z) (explicit matrix; for small z only)."""
    z = np.asarray(z, dtype=complex).reshape(-1, 1)
    return z @ z.conj().T / float(np.vdot(z, z).real)


def residual_norm2(y, z) -> float:
    """||(I - P_z) y||^2 without forming the projector."""
    y = np.ravel(y)
    z = np.ravel(z)
    zz = float(np.vdot(z, z).real)
    if zz == 0:
        return float(np.vdot(y, y).real)
    return float(np.vdot(y, y).real - abs(np.vdot(z, y)) ** 2 / zz)


@dataclass
class GridResult:
    x: np.ndarray
    value: float
    history: list
    spacing: np.ndarray


def grid_refine(objective, center, halfwidth, n_points: int, iterations: int,
                lower=None, upper=None) -> GridResult:
    """Multi-resolution grid search.

    Each iteration lays an ``n_points``-per-axis grid over
    ``center +- halfwidth``, recentres on the best point seen so far and
    halves the half-width. ``objective(*axes)`` returns values on the full
    outer-product grid. Ties go to the lowest flat index. ``history`` holds
    the incumbent value after every iteration and is non-increasing.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float)).copy()
    hw = np.atleast_1d(np.asarray(halfwidth, dtype=float)).copy()
    best_x, best_f = center.copy(), np.inf
    history = []
    spacing = 2 * hw / (n_points - 1)
    for _ in range(iterations):
        axes = []
        for d in range(center.size):
            a = np.linspace(center[d] - hw[d], center[d] + hw[d], n_points)
            if lower is not None or upper is not None:
                lo = -np.inf if lower is None or lower[d] is None else lower[d]
                hi = np.inf if upper is None or upper[d] is None else upper[d]
                a = np.clip(a, lo, hi)
            axes.append(a)
        vals = np.asarray(objective(*axes), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NumericalError("objective is not finite on the grid")
        idx = np.unravel_index(int(np.argmin(vals)), vals.shape)
        if vals[idx] < best_f:
            best_f = float(vals[idx])
            best_x = np.array([axes[d][idx[d]] for d in range(center.size)])
        history.append(best_f)
        spacing = 2 * hw / (n_points - 1)
        center = best_x.copy()
        hw = hw / 2
    return GridResult(best_x, best_f, history, spacing)


def _polish(fun, x0, scale, best_f):
    """Continuous refinement inside one final grid cell around ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    scale = np.asarray(scale, dtype=float)

    def scaled(u):
        return fun(*(x0 + np.atleast_1d(u) * scale))

    if x0.size == 1:
        res = optimize.minimize_scalar(lambda u: scaled(u), bounds=(-1.0, 1.0), method="bounded",
                                       options={"xatol": 1e-7})
        u, f = np.atleast_1d(res.x), float(res.fun)
    else:
        res = optimize.minimize(scaled, np.zeros(x0.size), method="Nelder-Mead",
                                bounds=[(-1.0, 1.0)] * x0.size,
                                options={"xatol": 1e-7, "fatol": 0.0, "maxiter": 400,
                                         "initial_simplex": _simplex(x0.size)})
        u, f = res.x, float(res.fun)
    if np.isfinite(f) and f <= best_f:
        return x0 + u * scale, f
    return x0, best_f


def _simplex(n):
    s = np.zeros((n + 1, n))
    s[1:] = 0.5 * np.eye(n)
    return s


# --------------------------------------------------------------------------
# LoS stages
# --------------------------------------------------------------------------

def compensate_fast_time(Y, nu_hat: float, cfg: OfdmConfig, pilots=None):
    """Return (Y_ring, Y_breve).

    ``Y_ring = F (A*(nu_hat) . Y)``; ``Y_breve`` additionally removes the
    subcarrier Doppler drift and, when ``pilots`` are given, the known
    pilots with their amplitude scale.
    """
    Y_ring = ofdm_demodulate(np.conj(fast_time_matrix(nu_hat, cfg)) * Y)
    k = np.arange(cfg.n_subcarriers)[:, None]
    ell = np.arange(cfg.n_symbols)[None, :]
    drift = np.exp(-2j * np.pi * k * cfg.subcarrier_spacing * nu_hat * ell * cfg.T_sym)
    Y_breve = drift * Y_ring
    if pilots is not None:
        Y_breve = Y_breve / (cfg.pilot_scale * np.asarray(pilots))
    return Y_ring, Y_breve


def _delay_bins(n_fft, cfg):
    return np.arange(n_fft) / (n_fft * cfg.subcarrier_spacing)


def _doppler_bins(n_fft, cfg):
    return np.arange(n_fft) / (n_fft * cfg.f_c * cfg.T_sym)


def coarse_los_2dfft(Y_breve, cfg: OfdmConfig, est: EstimatorConfig) -> tuple[float, float]:
    """Peak of |b^H(tau) Y c*(nu)| over the zero-padded delay-Doppler grid.

    Delay is returned in [0, 1/df) and Doppler in [0, 1/(f_c T_sym)).
    """
    n_k, n_l = est.fft_size_delay, est.fft_size_doppler
    D = np.fft.ifft(Y_breve, n=n_k, axis=0)
    if est.coarse_mode == "1d":
        i = int(np.argmax(np.sum(np.abs(D), axis=1)))
        prof = np.sum(np.abs(np.fft.fft(Y_breve, n=n_l, axis=1)), axis=0)
        j = int(np.argmax(prof))
        peak = prof[j]
    else:
        peak, i, j = -1.0, 0, 0
        for start in range(0, n_k, _ROW_CHUNK):
            block = np.abs(np.fft.fft(D[start:start + _ROW_CHUNK], n=n_l, axis=1))
            flat = int(np.argmax(block))
            if block.flat[flat] > peak:
                peak = float(block.flat[flat])
                r, c = np.unravel_index(flat, block.shape)
                i, j = start + int(r), int(c)
    if not np.isfinite(peak) or peak <= 0:
        raise NoPeakError("no delay-Doppler peak", stage="coarse_los")
    return float(_delay_bins(n_k, cfg)[i]), float(_doppler_bins(n_l, cfg)[j])


class _LosObjective:
    """||P_z^perp y(nu)||^2 with y(nu) = vec(F (A*(nu) . Y)), z = vec(B(tau, nu) . C(nu) . X).

    The fast-time compensation is re-applied for every candidate Doppler, so
    this is the exact single-path fit of the matrix model.
    """

    def __init__(self, Y, pilots, cfg: OfdmConfig):
        self.cfg = cfg
        self.Y = np.asarray(Y, dtype=complex)
        self.Xc = np.conj(cfg.pilot_scale * np.asarray(pilots))
        self.y2 = float(np.vdot(self.Y, self.Y).real)
        self.z2 = cfg.pilot_scale**2 * float(np.sum(np.abs(pilots) ** 2))
        self.k = np.arange(cfg.n_subcarriers)
        self.ell = np.arange(cfg.n_symbols)
        self.kl = np.outer(self.k * cfg.subcarrier_spacing, self.ell * cfg.T_sym)
        self._fast = np.arange(cfg.n_subcarriers) * cfg.T / cfg.n_subcarriers

    def correlation(self, taus, nus) -> np.ndarray:
        cfg = self.cfg
        taus = np.atleast_1d(taus)
        nus = np.atleast_1d(nus)
        out = np.empty((taus.size, nus.size), dtype=complex)
        E = np.exp(2j * np.pi * np.outer(taus, self.k * cfg.subcarrier_spacing))
        for j, nu in enumerate(nus):
            a_conj = np.exp(-2j * np.pi * cfg.f_c * nu * self._fast)[:, None]
            W = self.Xc * ofdm_demodulate(a_conj * self.Y)
            v = (W * np.exp(-2j * np.pi * nu * self.kl)) @ np.exp(
                -2j * np.pi * cfg.f_c * nu * self.ell * cfg.T_sym)
            out[:, j] = E @ v
        return out

    def __call__(self, taus, nus) -> np.ndarray:
        return self.y2 - np.abs(self.correlation(taus, nus)) ** 2 / self.z2

    def gain(self, tau, nu) -> complex:
        return complex(self.correlation(tau, nu)[0, 0] / self.z2)

    def gradient(self, tau: float, nu: float) -> np.ndarray:
        """Analytic d|c|^2 / d(tau, nu) at one point."""
        cfg = self.cfg
        kf = self.k * cfg.subcarrier_spacing
        slow = self.ell * cfg.T_sym
        a_conj = np.exp(-2j * np.pi * cfg.f_c * nu * self._fast)[:, None]
        W = self.Xc * ofdm_demodulate(a_conj * self.Y)
        dW = self.Xc * ofdm_demodulate(-2j * np.pi * cfg.f_c * self._fast[:, None] * a_conj * self.Y)
        ph = np.exp(-2j * np.pi * nu * (self.kl + cfg.f_c * slow[None, :]))
        dph = -2j * np.pi * (self.kl + cfg.f_c * slow[None, :])
        e = np.exp(2j * np.pi * tau * kf)
        c = e @ np.sum(W * ph, axis=1)
        dc_tau = (2j * np.pi * kf * e) @ np.sum(W * ph, axis=1)
        dc_nu = e @ np.sum((dW + W * dph) * ph, axis=1)
        return 2 * np.real(np.conj(c) * np.array([dc_tau, dc_nu]))


def _newton_los(obj: _LosObjective, x, spacing, max_steps: int = 4) -> np.ndarray:
    """Stationary point of |c|^2 by Newton steps on the analytic gradient.

    A quadratic peak sampled in double precision pins its maximiser only to
    about sqrt(eps) of the peak width; the gradient root is good to ~eps.
    Steps are kept inside one final grid cell.
    """
    x = np.asarray(x, dtype=float)
    scale = np.asarray(spacing, dtype=float)
    g = obj.gradient(*x)
    for _ in range(max_steps):
        H = np.empty((2, 2))
        for i in range(2):
            h = np.zeros(2)
            h[i] = 1e-3 * scale[i]
            H[:, i] = (obj.gradient(*(x + h)) - obj.gradient(*(x - h))) / (2 * h[i])
        H = (H + H.T) / 2
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.any(np.abs(step) > scale):
            break
        g_new = obj.gradient(*(x + step))
        if np.linalg.norm(g_new * scale) >= np.linalg.norm(g * scale):
            break
        x, g = x + step, g_new
    return x


def refine_los_mle(Y, coarse: tuple[float, float], pilots, cfg: OfdmConfig,
                   est: EstimatorConfig) -> tuple[float, float, complex, list]:
    """Iterative delay/Doppler grid refinement on the time-domain grid ``Y``.

    Returns (tau, nu, alpha, history).
    """
    obj = _LosObjective(Y, pilots, cfg)
    res = grid_refine(obj, coarse, (est.delay_halfwidth, est.doppler_halfwidth),
                      est.grid_points, est.iterations)
    x, f = res.x, res.value
    history = list(res.history)
    if est.polish:
        x, f = _polish(lambda t, n: float(obj(t, n)[0, 0]), x, res.spacing / 2, f)
        history.append(f)
        x_n = _newton_los(obj, x, res.spacing)
        f_n = float(obj(*x_n)[0, 0])
        # Below the objective's float resolution a tie is as good as a win.
        if f_n <= f + 8 * np.finfo(float).eps * obj.y2:
            x = x_n
            if f_n <= f:
                history.append(f_n)
    tau, nu = float(x[0]), float(x[1])
    return tau, nu, obj.gain(tau, nu), history


def reconstruct_path(tau: float, nu: float, alpha: complex, cfg: OfdmConfig, pilots,
                     gains=None, nu_fast: float | None = None) -> np.ndarray:
    """Time-domain path signal through the generative matrix model."""
    M = subcarrier_matrix(tau, nu, cfg) * slow_time_matrix(nu, cfg) * (cfg.pilot_scale * pilots)
    if gains is not None:
        M = M * np.asarray(gains)[None, :]
    A = fast_time_matrix(nu if nu_fast is None else nu_fast, cfg)
    return alpha * A * ofdm_modulate(M)


def subtract_los(Y, tau_su: float, nu_su: float, alpha_su: complex, cfg: OfdmConfig, pilots,
                 nu_fast: float | None = None) -> np.ndarray:
    return Y - reconstruct_path(tau_su, nu_su, alpha_su, cfg, pilots, nu_fast=nu_fast)


# --------------------------------------------------------------------------
# RIS-path stages
# --------------------------------------------------------------------------

def compensate_ris_path(Y_sru, nu_sru: float, cfg: OfdmConfig, pilots) -> np.ndarray:
    """Doppler-free, pilot-free RIS residual: ~ alpha_sru b(tau_sru) g^T."""
    _, Y_breve = compensate_fast_time(Y_sru, nu_sru, cfg, pilots)
    return Y_breve * np.conj(slow_time_matrix(nu_sru, cfg))


def _delay_vector(tau, cfg: OfdmConfig) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(cfg.n_subcarriers) * cfg.subcarrier_spacing * tau)


def remove_los_component(Y_breve_sru, tau_su: float, cfg: OfdmConfig, per_symbol: bool = False):
    """Project out the LoS signature b(tau_su) 1^T (or b(tau_su) per symbol).

    After Doppler compensation with the LoS Doppler the LoS path is exactly
    alpha_su b(tau_su) 1^T, so this removes whatever the LoS fit left behind.
    """
    b = _delay_vector(tau_su, cfg)[:, None]
    K = cfg.n_subcarriers
    coef = b.conj().T @ Y_breve_sru / K
    if not per_symbol:
        coef = np.full_like(coef, coef.mean())
    return Y_breve_sru - b * coef


def _los_overlap2(taus, tau_su, cfg: OfdmConfig) -> np.ndarray:
    """|b(tau_su)^H b(tau)|^2 for a batch of delays."""
    k = np.arange(cfg.n_subcarriers) * cfg.subcarrier_spacing
    d = np.exp(-2j * np.pi * np.outer(np.atleast_1d(taus) - tau_su, k)).sum(axis=1)
    return np.abs(d) ** 2


def coarse_ris_delay(Y_breve_sru, cfg: OfdmConfig, est: EstimatorConfig,
                     tau_su: float | None = None) -> float:
    """Delay bin maximising the non-coherent matched-filter energy over symbols.

    With ``tau_su`` the per-symbol LoS signature is projected out first and
    each delay bin is scored by its energy in the complement, so a RIS path
    closer than one resolution cell to the LoS is still detected.
    """
    n = est.fft_size_delay
    K = cfg.n_subcarriers
    if tau_su is None:
        prof = np.sum(np.abs(np.fft.ifft(Y_breve_sru, n=n, axis=0)), axis=1)
    else:
        Yp = remove_los_component(Y_breve_sru, tau_su, cfg, per_symbol=True)
        num = np.sum(np.abs(n * np.fft.ifft(Yp, n=n, axis=0)) ** 2, axis=1)
        den = K - _los_overlap2(_delay_bins(n, cfg), tau_su, cfg) / K
        prof = np.where(den > 1e-9 * K, num / np.maximum(den, 1e-300), 0.0)
    i = int(np.argmax(prof))
    if not np.isfinite(prof[i]) or prof[i] <= 0:
        raise NoPeakError("no RIS-path delay peak", stage="coarse_ris_delay")
    return float(_delay_bins(n, cfg)[i])


def aod_objective(Y_res, tau_sru: float, array: RisArray, theta_rs, phases, cfg: OfdmConfig,
                  tau_su: float | None = None):
    """Residual energy after fitting b(tau_sru) g(theta)^T (jointly with the LoS if ``tau_su``)."""
    y_aod = Y_res.T @ np.conj(_delay_vector(tau_sru, cfg))
    y2 = float(np.vdot(Y_res, Y_res).real)
    K, L = Y_res.shape
    overlap = 0.0 if tau_su is None else float(_los_overlap2(tau_sru, tau_su, cfg)[0]) / (K * L)

    def fun(az, el):
        az = np.atleast_1d(az)
        el = np.atleast_1d(el)
        AZ, EL = np.meshgrid(az, el, indexing="ij")
        G = gain_sequence_grid(array, phases, theta_rs, AZ.ravel(), EL.ravel(), cfg.f_c)
        den = K * np.sum(np.abs(G) ** 2, axis=1) - overlap * np.abs(G.sum(axis=1)) ** 2
        corr = np.abs(G.conj() @ y_aod) ** 2
        with np.errstate(invalid="ignore", divide="ignore"):
            val = y2 - np.where(den > 0, corr / den, 0.0)
        return val.reshape(AZ.shape)

    return fun


def refine_aod_mle(Y_breve_sru, tau_sru: float, array: RisArray, theta_rs, phases,
                   cfg: OfdmConfig, est: EstimatorConfig,
                   tau_su: float | None = None) -> tuple[Angles, list]:
    """Angle of departure from the subcarrier-integrated RIS residual."""
    Y_res = Y_breve_sru if tau_su is None else remove_los_component(Y_breve_sru, tau_su, cfg)
    fun = aod_objective(Y_res, tau_sru, array, theta_rs, phases, cfg, tau_su)
    half = np.pi / 2
    center = (est.aod_center.az, est.aod_center.el)
    hw = (est.aod_halfwidth, est.aod_halfwidth)
    if est.aod_scan_step > 0:
        # One dense pass finer than the beamwidth so halving cannot lock onto a sidelobe.
        n_scan = int(np.ceil(2 * est.aod_halfwidth / est.aod_scan_step)) + 1
        scan = grid_refine(fun, center, hw, max(n_scan, est.grid_points), 1,
                           lower=(None, -half), upper=(None, half))
        center, hw = scan.x, tuple(scan.spacing)
    res = grid_refine(fun, center, hw, est.grid_points, est.iterations,
                      lower=(None, -half), upper=(None, half))
    x, f = res.x, res.value
    if est.polish:
        x, f = _polish(lambda a, e: float(fun(a, np.clip(e, -half, half))[0, 0]), x,
                       res.spacing / 2, f)
        x[1] = np.clip(x[1], -half, half)
    history = res.history + ([f] if est.polish else [])
    az = float(np.angle(np.exp(1j * x[0])))
    return Angles(az, float(x[1])), history


def refine_ris_delay_mle(Y_breve_sru, theta_ru, tau_coarse: float, array: RisArray, theta_rs,
                         phases, cfg: OfdmConfig, est: EstimatorConfig,
                         tau_su: float | None = None):
    """Returns (tau_sru, alpha_sru, history) from the symbol-integrated residual."""
    g_hat = gain_sequence(array, phases, theta_rs, theta_ru, cfg.f_c)
    g2 = float(np.vdot(g_hat, g_hat).real)
    if g2 == 0:
        raise NoPeakError("RIS gain sequence vanishes", stage="ris_delay_mle")
    Y_res = Y_breve_sru if tau_su is None else remove_los_component(Y_breve_sru, tau_su, cfg)
    y_tau = Y_res @ np.conj(g_hat)
    y2 = float(np.vdot(Y_res, Y_res).real)
    K, L = Y_res.shape
    sum_g2 = abs(g_hat.sum()) ** 2
    k = np.arange(K) * cfg.subcarrier_spacing

    def parts(taus):
        taus = np.atleast_1d(taus)
        corr = np.exp(2j * np.pi * np.outer(taus, k)) @ y_tau
        den = np.full(taus.shape, K * g2)
        if tau_su is not None:
            den = den - _los_overlap2(taus, tau_su, cfg) * sum_g2 / (K * L)
        return corr, den

    def fun(taus):
        corr, den = parts(taus)
        with np.errstate(invalid="ignore", divide="ignore"):
            return y2 - np.where(den > 0, np.abs(corr) ** 2 / den, 0.0)

    res = grid_refine(fun, (tau_coarse,), (est.delay_halfwidth,), est.grid_points, est.iterations)
    x, f = res.x, res.value
    if est.polish:
        x, f = _polish(lambda t: float(fun(t)[0]), x, res.spacing / 2, f)
    history = res.history + ([f] if est.polish else [])
    tau = float(x[0])
    corr, den = parts(tau)
    return tau, complex(corr[0] / den[0]), history


# --------------------------------------------------------------------------
# Position, clock, CFO
# --------------------------------------------------------------------------

def range_residual(d_ru: float, diff_delay: float, theta_ru, knowns: EstimatorKnowns) -> float:
    u = knowns.ris_rotation @ direction_vector(theta_ru)
    far = knowns.sat_position - knowns.ris_position - d_ru * u
    return (knowns.d_sr + d_ru) - diff_delay * SPEED_OF_LIGHT - float(np.linalg.norm(far))


def solve_position(tau_su: float, tau_sru: float, theta_ru, knowns: EstimatorKnowns,
                   cfg: OfdmConfig, d_max: float = 1000.0) -> LocalizationResult:
    """RIS-UE range from the wrapped differential delay, then p = p_RIS + d R u.

    Minimising the squared range residual is done by bracketing its root;
    the residual is increasing in ``d`` for a distant satellite.
    """
    diff = wrap(tau_sru - tau_su, cfg.delay_period)
    lo, hi = 0.0, d_max
    f_lo = range_residual(lo, diff, theta_ru, knowns)
    f_hi = range_residual(hi, diff, theta_ru, knowns)
    if f_lo == 0.0:
        d = lo
    elif f_lo * f_hi > 0:
        raise GeometryInconsistentError(
            f"no range in (0, {d_max}] m matches the differential delay", stage="solve_position")
    else:
        d = optimize.brentq(range_residual, lo, hi, args=(diff, theta_ru, knowns),
                            xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=200)
    p = knowns.ris_position + d * (knowns.ris_rotation @ direction_vector(theta_ru))
    return LocalizationResult(position=p, clock_bias=float("nan"), cfo=float("nan"), d_ru=float(d))


def estimate_clock_cfo(tau_su: float, nu_su: float, position, sat_position, sat_velocity,
                       cfg: OfdmConfig) -> tuple[float, float]:
    """Clock bias (wrapped to (-T/2, T/2]) and CFO from the LoS estimates."""
    los = np.asarray(position, dtype=float) - np.asarray(sat_position, dtype=float)
    d_su = float(np.linalg.norm(los))
    delta = wrap(tau_su - d_su / SPEED_OF_LIGHT, cfg.delay_period)
    delta_f = nu_su - float(np.asarray(sat_velocity) @ (los / d_su)) / SPEED_OF_LIGHT
    return delta, float(delta_f)


# --------------------------------------------------------------------------
# Full pipeline
# --------------------------------------------------------------------------

def _run_stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except EstimationError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise EstimationError(str(exc), stage=name) from exc


def _estimate_los(Y, knowns, cfg, est, center=None):
    if center is None:
        _, Y_breve = compensate_fast_time(Y, knowns.nu_sr, cfg, knowns.pilots)
        tau_c, nu_w = _run_stage("coarse_los", coarse_los_2dfft, Y_breve, cfg, est)
        nu_c = knowns.nu_sr + wrap(nu_w - knowns.nu_sr, cfg.doppler_period)
        center = (tau_c, nu_c)
    tau, nu, alpha, hist = _run_stage("los_mle", refine_los_mle, Y, center, knowns.pilots, cfg, est)
    return tau, nu, alpha, hist


def _estimate_ris(Y_sru, nu_sru, tau_su, knowns, cfg, est):
    Y_b = compensate_ris_path(Y_sru, nu_sru, cfg, knowns.pilots)
    tau_c = _run_stage("coarse_ris_delay", coarse_ris_delay, Y_b, cfg, est, tau_su)
    theta, hist_aod = _run_stage("aod_mle", refine_aod_mle, Y_b, tau_c, knowns.array,
                                 knowns.theta_rs, knowns.phases, cfg, est, tau_su)
    tau, alpha, hist_tau = _run_stage("ris_delay_mle", refine_ris_delay_mle, Y_b, theta, tau_c,
                                      knowns.array, knowns.theta_rs, knowns.phases, cfg, est,
                                      tau_su)
    # The AoD fit above used the coarse delay; redo it once at the refined one.
    theta, hist_aod = _run_stage("aod_mle", refine_aod_mle, Y_b, tau, knowns.array,
                                 knowns.theta_rs, knowns.phases, cfg, est, tau_su)
    tau, alpha, hist_tau = _run_stage("ris_delay_mle", refine_ris_delay_mle, Y_b, theta, tau,
                                      knowns.array, knowns.theta_rs, knowns.phases, cfg, est,
                                      tau_su)
    return tau, theta, alpha, hist_aod, hist_tau


def estimate_channel(Y, knowns: EstimatorKnowns, cfg: OfdmConfig, est: EstimatorConfig) -> ChannelEstimates:
    est.validate(cfg)
    Y = np.asarray(Y, dtype=complex)
    if Y.shape != (cfg.n_subcarriers, cfg.n_symbols):
        raise EstimationError(f"observation shape {Y.shape} does not match the config", stage="input")

    tau_su, nu_su, alpha_su, hist_los = _estimate_los(Y, knowns, cfg, est)
    nu_sru = nu_su
    Y_sru = subtract_los(Y, tau_su, nu_su, alpha_su, cfg, knowns.pilots)
    tau_sru, theta, alpha_sru, hist_aod, hist_tau = _estimate_ris(Y_sru, nu_sru, tau_su, knowns, cfg, est)

    for _ in range(est.cancellation_passes):
        g_hat = gain_sequence(knowns.array, knowns.phases, knowns.theta_rs, theta, cfg.f_c)
        Y_su = Y - reconstruct_path(tau_sru, nu_sru, alpha_sru, cfg, knowns.pilots, gains=g_hat)
        tau_su, nu_su, alpha_su, hist_los = _estimate_los(Y_su, knowns, cfg, est, center=(tau_su, nu_su))
        nu_sru = nu_su
        Y_sru = subtract_los(Y, tau_su, nu_su, alpha_su, cfg, knowns.pilots)
        tau_sru, theta, alpha_sru, hist_aod, hist_tau = _estimate_ris(Y_sru, nu_sru, tau_su, knowns, cfg, est)

    T = cfg.delay_period
    return ChannelEstimates(
        tau_su=float(np.mod(tau_su, T)), nu_su=nu_su, alpha_su=alpha_su,
        tau_sru=float(np.mod(tau_sru, T)), nu_sru=nu_sru, theta_ru=theta, alpha_sru=alpha_sru,
        tau_ru=float(np.mod(tau_sru - knowns.tau_sr, T)),
        history={"los": hist_los, "aod": hist_aod, "ris_delay": hist_tau},
    )


def localize(Y, knowns: EstimatorKnowns, cfg: OfdmConfig,
             est: EstimatorConfig) -> tuple[ChannelEstimates, LocalizationResult]:
    ch = estimate_channel(Y, knowns, cfg, est)
    loc = _run_stage("solve_position", solve_position, ch.tau_su, ch.tau_sru, ch.theta_ru, knowns, cfg)
    delta, delta_f = estimate_clock_cfo(ch.tau_su, ch.nu_su, loc.position, knowns.sat_position,
                                        knowns.sat_velocity, cfg)
    loc.clock_bias, loc.cfo = delta, delta_f
    return ch, loc
