"""Experiment configuration: scene, OFDM numerology, link budget and estimator.

Config files are flat ``key = value`` UTF-8 text. Keys are namespaced
(``scenario.ue_position_m``); values are JSON literals or bare words.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .channel import ClockState, LinkBudget, OfdmConfig
from .constants import EARTH_RADIUS_M, SPEED_OF_LIGHT
from .geometry import Angles, OrbitSpec, is_rotation
from .ris import BeamformingPrior, RisArray


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    fft_size_delay: int = 2**13
    fft_size_doppler: int = 2**13
    grid_points: int = 10
    iterations: int = 10
    delay_halfwidth: float = 5 / SPEED_OF_LIGHT
    doppler_halfwidth: float = 7 / SPEED_OF_LIGHT
    aod_halfwidth: float = np.deg2rad(45.0)
    aod_center: Angles = Angles(np.pi / 2, 0.0)
    aod_scan_step: float = np.deg2rad(2.0)
    coarse_mode: str = "2d"
    polish: bool = True
    cancellation_passes: int = 2

    def __post_init__(self):
        if self.grid_points < 2 or self.iterations < 1:
            raise ValueError("need at least 2 grid points and 1 iteration")
        if self.coarse_mode not in ("2d", "1d"):
            raise ValueError(f"unknown coarse mode {self.coarse_mode!r}")

    def validate(self, ofdm: OfdmConfig) -> None:
        if self.fft_size_delay < ofdm.n_subcarriers or self.fft_size_doppler < ofdm.n_symbols:
            raise ValueError("FFT sizes must be at least K and L")


@dataclass(frozen=True)
class Scenario:
    ue_position: np.ndarray
    ris_position: np.ndarray
    ris_rotation: np.ndarray
    ris_nx: int
    ris_nz: int
    orbit: OrbitSpec
    ofdm: OfdmConfig
    clock: ClockState
    budget: LinkBudget
    bf_position_std: np.ndarray = field(default_factory=lambda: np.ones(3))
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    p3gpp_dbm: float = 54.0

    @property
    def array(self) -> RisArray:
        return RisArray(self.ris_nx, self.ris_nz, self.ofdm.wavelength)

    @property
    def bf_prior(self) -> BeamformingPrior:
        return BeamformingPrior(np.asarray(self.ue_position, dtype=float),
                                np.diag(np.asarray(self.bf_position_std, dtype=float) ** 2))

    def with_power(self, p_sweep_db: float) -> "Scenario":
        p_tot = 10 ** ((self.p3gpp_dbm + p_sweep_db - 30) / 10)
        return replace(self, ofdm=replace(self.ofdm, p_tot=p_tot))

    def with_ofdm(self, **kw) -> "Scenario":
        return replace(self, ofdm=replace(self.ofdm, **kw))

    def with_estimator(self, **kw) -> "Scenario":
        return replace(self, estimator=replace(self.estimator, **kw))

    def translated(self, offset) -> "Scenario":
        """Same scene shifted by ``offset``; the orbit frame is not moved."""
        off = np.asarray(offset, dtype=float)
        return replace(self, ue_position=self.ue_position + off, ris_position=self.ris_position + off)


def table_i(**overrides) -> Scenario:
    """The reference operating point (2 GHz, 2000 x 256 grid, 600 km LEO)."""
    ofdm = OfdmConfig(f_c=2e9, n_subcarriers=2000, n_symbols=256, subcarrier_spacing=15e3,
                      cp_fraction=0.07, p_tot=10 ** ((54 - 30) / 10))
    sc = Scenario(
        ue_position=np.array([0.0, 10.0, 1.5]),
        ris_position=np.array([0.0, 0.0, 10.0]),
        ris_rotation=np.eye(3),
        ris_nx=10,
        ris_nz=10,
        orbit=OrbitSpec(altitude=600e3, initial_angles=Angles(np.deg2rad(90), np.deg2rad(45))),
        ofdm=ofdm,
        clock=ClockState(delta=1e-9, delta_f=1e-6),
        budget=LinkBudget(),
    )
    return replace(sc, **overrides) if overrides else sc


def desk_scale(sc: Scenario) -> Scenario:
    """Reduced profile for CI: K=256, L=64, 2^12-point coarse FFTs."""
    return replace(sc.with_ofdm(n_subcarriers=256, n_symbols=64),
                   estimator=replace(sc.estimator, fft_size_delay=2**12, fft_size_doppler=2**12))


# --------------------------------------------------------------------------
# Config file
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSettings:
    p_sweep_db: tuple = (-40.0, -35.0, -30.0, -25.0, -20.0, -15.0, -10.0)
    runs: int = 100
    ris_modes: tuple = ("beamform", "random")
    seed: int = 0


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


def _vec3(value, key):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key} must be a list of 3 finite numbers")
    return arr


def scenario_from_dict(values: dict) -> tuple[Scenario, SweepSettings]:
    """Build a scenario from a parsed config; unknown keys are rejected."""
    v = dict(values)
    base = table_i()

    def take(key, default):
        return v.pop(key, default)

    try:
        rot = take("scenario.ris_rotation", "identity")
        rotation = np.eye(3) if rot == "identity" else np.asarray(rot, dtype=float)
        if not is_rotation(rotation, tol=1e-9):
            raise ConfigError("scenario.ris_rotation must be in SO(3)")
        angles_deg = take("orbit.sat_angles_deg", [90.0, 45.0])
        orbit = OrbitSpec(
            altitude=float(take("orbit.altitude_m", 600e3)),
            initial_angles=Angles(*np.deg2rad(np.asarray(angles_deg, dtype=float))),
            earth_radius=float(take("orbit.earth_radius_m", EARTH_RADIUS_M)),
            direction=str(take("orbit.direction", "rising")),
        )
        p3gpp = float(take("power.p3gpp_dbm", 54.0))
        ofdm = OfdmConfig(
            f_c=float(take("ofdm.carrier_hz", 2e9)),
            n_subcarriers=int(take("ofdm.subcarriers", 2000)),
            n_symbols=int(take("ofdm.symbols", 256)),
            subcarrier_spacing=float(take("ofdm.subcarrier_spacing_hz", 15e3)),
            cp_fraction=float(take("ofdm.cp_fraction", 0.07)),
            p_tot=10 ** ((p3gpp - 30) / 10),
        )
        budget = LinkBudget(
            sat_gain_db=float(take("link.sat_gain_dbi", 30.0)),
            ue_gain_db=float(take("link.ue_gain_dbi", 0.0)),
            atm_loss_db=float(take("link.atmospheric_loss_db", 0.2)),
            element_pattern_q=float(take("link.ris_element_pattern_q", 1.0)),
            noise_psd_dbm_hz=float(take("noise.psd_dbm_hz", -174.0)),
            noise_figure_db=float(take("noise.figure_db", 7.0)),
        )
        center = take("estimator.aod_center_deg", [90.0, 0.0])
        est = EstimatorConfig(
            fft_size_delay=int(take("estimator.fft_size_delay", 2**13)),
            fft_size_doppler=int(take("estimator.fft_size_doppler", 2**13)),
            grid_points=int(take("estimator.grid_points", 10)),
            iterations=int(take("estimator.iterations", 10)),
            delay_halfwidth=float(take("estimator.delay_halfwidth_m", 5.0)) / SPEED_OF_LIGHT,
            doppler_halfwidth=float(take("estimator.doppler_halfwidth_mps", 7.0)) / SPEED_OF_LIGHT,
            aod_halfwidth=float(np.deg2rad(float(take("estimator.aod_halfwidth_deg", 45.0)))),
            aod_center=Angles(*np.deg2rad(np.asarray(center, dtype=float))),
            aod_scan_step=float(np.deg2rad(float(take("estimator.aod_scan_step_deg", 2.0)))),
            coarse_mode=str(take("estimator.coarse_mode", "2d")),
            polish=bool(take("estimator.polish", True)),
            cancellation_passes=int(take("estimator.cancellation_passes", base.estimator.cancellation_passes)),
        )
        est.validate(ofdm)
        sc = Scenario(
            ue_position=_vec3(take("scenario.ue_position_m", [0.0, 10.0, 1.5]), "scenario.ue_position_m"),
            ris_position=_vec3(take("scenario.ris_position_m", [0.0, 0.0, 10.0]), "scenario.ris_position_m"),
            ris_rotation=rotation,
            ris_nx=int(take("ris.n_x", 10)),
            ris_nz=int(take("ris.n_z", 10)),
            orbit=orbit,
            ofdm=ofdm,
            clock=ClockState(delta=float(take("clock.bias_s", 1e-9)), delta_f=float(take("clock.cfo", 1e-6))),
            budget=budget,
            bf_position_std=_vec3(take("beamforming.position_std_m", [1.0, 1.0, 1.0]),
                                  "beamforming.position_std_m"),
            estimator=est,
            p3gpp_dbm=p3gpp,
        )
        modes = take("sweep.ris_modes", ["beamform", "random"])
        if isinstance(modes, str):
            modes = [modes]
        sweep = SweepSettings(
            p_sweep_db=tuple(float(p) for p in take("sweep.p_sweep_db", list(SweepSettings.p_sweep_db))),
            runs=int(take("sweep.runs", 100)),
            ris_modes=tuple(str(m) for m in modes),
            seed=int(take("sweep.seed", 0)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if v:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(v))}")
    if sweep.runs < 1 or not sweep.p_sweep_db:
        raise ConfigError("sweep needs at least one run and one power offset")
    for m in sweep.ris_modes:
        if m not in ("beamform", "random"):
            raise ConfigError(f"unknown RIS mode {m!r}")
    return sc, sweep


def load_config(path) -> tuple[Scenario, SweepSettings]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return scenario_from_dict(read_config_text(p.read_text(encoding="utf-8")))


def table_i_config_path() -> Path:
    return Path(str(resources.files("orbit_echo") / "data" / "tableI.cfg"))
