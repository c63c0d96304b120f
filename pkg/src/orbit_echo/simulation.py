"""One simulated frame: geometry, RIS profile, pilots, observation and knowns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import (
    ModelMatrices,
    PathParams,
    build_model_matrices,
    generate_observation,
    path_params_from_geometry,
    pilot_grid,
    snr_db,
)
from .estimator import EstimatorKnowns
from .geometry import SatelliteState, orbit_state, path_geometry
from .ris import RisProfile, beamform_profile, gain_sequence, random_profile
from .scenario import Scenario

RIS_MODES = ("beamform", "random")


@dataclass
class Frame:
    Y: np.ndarray
    su: PathParams
    sru: PathParams
    sat: SatelliteState
    profile: RisProfile
    pilots: np.ndarray
    matrices: ModelMatrices
    noise_variance: float
    snr_db: float
    knowns: EstimatorKnowns


def draw_profile(sc: Scenario, ris_mode: str, theta_rs, rng: np.random.Generator) -> RisProfile:
    if ris_mode == "random":
        return random_profile(sc.array, sc.ofdm.n_symbols, rng)
    if ris_mode == "beamform":
        return beamform_profile(sc.array, theta_rs, sc.bf_prior, sc.ris_position, sc.ris_rotation,
                                sc.ofdm.n_symbols, sc.ofdm.f_c, rng)
    raise ValueError(f"unknown RIS mode {ris_mode!r}")


def make_knowns(sc: Scenario, sat: SatelliteState, sru: PathParams, profile: RisProfile,
                pilots) -> EstimatorKnowns:
    geo = path_geometry(sc.ue_position, sc.ris_position, sc.ris_rotation, sat.position)
    return EstimatorKnowns(
        ris_position=np.asarray(sc.ris_position, dtype=float),
        ris_rotation=np.asarray(sc.ris_rotation, dtype=float),
        sat_position=sat.position,
        sat_velocity=sat.velocity,
        theta_rs=geo.theta_rs,
        nu_sr=sru.nu_sr,
        d_sr=geo.d_sr,
        array=sc.array,
        phases=profile.phases,
        pilots=pilots,
    )


def simulate_frame(sc: Scenario, ris_mode: str, rng: np.random.Generator, noise: bool = True,
                   pilot_kind: str = "qpsk", per_symbol_amplitudes: bool = False) -> Frame:
    """Draw profile, pilots and noise from ``rng`` (in that order) and build Y."""
    cfg = sc.ofdm
    sc.array.check_narrowband(cfg.bandwidth)
    sat = orbit_state(sc.orbit, 0.0)
    su, sru = path_params_from_geometry(sc.ue_position, sc.ris_position, sc.ris_rotation, sat,
                                        sc.clock, sc.budget, cfg)
    profile = draw_profile(sc, ris_mode, sru.theta_rs, rng)
    g = gain_sequence(sc.array, profile.phases, sru.theta_rs, sru.theta_ru, cfg.f_c)
    profile.gain_sequence = g
    pilots = pilot_grid(cfg, rng, kind=pilot_kind)
    m = build_model_matrices(su, sru, cfg, g, pilots)
    sigma2 = sc.budget.noise_variance(cfg) if noise else 0.0
    obs = generate_observation(cfg, su, sru, m, sigma2, rng, per_symbol_amplitudes)
    return Frame(
        Y=obs.Y, su=su, sru=sru, sat=sat, profile=profile, pilots=pilots, matrices=m,
        noise_variance=sigma2, snr_db=snr_db(cfg, su.alpha, sru.alpha, g, sc.budget),
        knowns=make_knowns(sc, sat, sru, profile, pilots),
    )
