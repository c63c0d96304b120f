"""Monte-Carlo trials, power sweeps, RMSE aggregation and CSV output."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crlb import ChannelPoint, fim_report
from .estimator import EstimationError, localize, wrap
from .scenario import Scenario, SweepSettings
from .simulation import RIS_MODES, simulate_frame

CSV_COLUMNS = (
    "snr_db", "p_sweep_db", "ris_mode", "runs", "failures",
    "rmse_tau_su", "crlb_tau_su", "rmse_nu_su", "crlb_nu_su",
    "rmse_tau_sru", "crlb_tau_sru", "rmse_nu_sru", "crlb_nu_sru",
    "rmse_aod_az", "rmse_aod_el", "crlb_aod_az", "crlb_aod_el",
    "rmse_pos", "peb", "rmse_delta", "crlb_delta", "rmse_cfo", "crlb_cfo",
)
ERROR_KEYS = ("tau_su", "nu_su", "tau_sru", "nu_sru", "aod_az", "aod_el", "pos", "delta", "cfo")
# Channel CRLB index for each error key; position / clock / CFO come from the state bound.
_CHANNEL_INDEX = {"tau_su": 0, "nu_su": 1, "tau_sru": 2, "nu_sru": 3, "aod_az": 4, "aod_el": 5}
_STATE_INDEX = {"delta": 3, "cfo": 4}


@dataclass
class TrialRecord:
    p_sweep_db: float
    ris_mode: str
    trial: int
    seed: int
    snr_db: float
    success: bool
    truth: dict
    estimates: dict = field(default_factory=dict)
    sq_errors: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class SweepRow:
    snr_db: float
    p_sweep_db: float
    ris_mode: str
    runs: int
    failures: int
    rmse: dict
    crlb: dict

    def as_csv_dict(self) -> dict:
        """Values keyed by CSV column; ``crlb_*`` columns hold sqrt(CRLB)."""
        out = {"snr_db": self.snr_db, "p_sweep_db": self.p_sweep_db, "ris_mode": self.ris_mode,
               "runs": self.runs, "failures": self.failures}
        for key in ERROR_KEYS:
            out[f"rmse_{key}"] = self.rmse[key]
        for key in ("tau_su", "nu_su", "tau_sru", "nu_sru", "aod_az", "aod_el", "delta", "cfo"):
            out[f"crlb_{key}"] = math.sqrt(self.crlb[key])
        out["peb"] = math.sqrt(self.crlb["pos"])
        return out


def trial_rng(seed: int, ris_mode: str, p_sweep_db: float, trial: int) -> np.random.Generator:
    """Independent stream per (master seed, mode, sweep point, trial)."""
    point_key = int(round((p_sweep_db + 1000.0) * 1000))
    mode_key = RIS_MODES.index(ris_mode)
    return np.random.default_rng(np.random.SeedSequence([seed, mode_key, point_key, trial]))


def _wrap_angle(x: float) -> float:
    return float(np.angle(np.exp(1j * x)))


def run_trial(sc: Scenario, p_sweep_db: float, trial: int, ris_mode: str = "beamform",
              seed: int = 0, noise: bool = True, with_bounds: bool = True) -> TrialRecord:
    """Simulate, localize and score one frame; estimator failures become failed records."""
    scp = sc.with_power(p_sweep_db)
    cfg = scp.ofdm
    rng = trial_rng(seed, ris_mode, p_sweep_db, trial)
    frame = simulate_frame(scp, ris_mode, rng, noise=noise)
    su, sru = frame.su, frame.sru
    truth = {"tau_su": su.tau, "nu_su": su.nu, "tau_sru": sru.tau, "nu_sru": sru.nu,
             "aod_az": sru.theta_ru[0], "aod_el": sru.theta_ru[1],
             "position": np.asarray(scp.ue_position, dtype=float).tolist(),
             "delta": scp.clock.delta, "cfo": scp.clock.delta_f}
    rec = TrialRecord(p_sweep_db=p_sweep_db, ris_mode=ris_mode, trial=trial, seed=seed,
                      snr_db=frame.snr_db, success=False, truth=truth)
    if with_bounds:
        sigma2 = frame.noise_variance if noise else scp.budget.noise_variance(cfg)
        point = ChannelPoint.from_paths(su, sru, frame.pilots, frame.profile.phases, scp.array)
        rep = fim_report(point, cfg, sigma2, scp.ue_position, scp.ris_position, scp.ris_rotation,
                         frame.sat.position, frame.sat.velocity)
        rec.bounds = {key: float(rep.channel_crlb[i]) for key, i in _CHANNEL_INDEX.items()}
        rec.bounds.update({key: float(rep.state_crlb[i]) for key, i in _STATE_INDEX.items()})
        rec.bounds["pos"] = float(np.sum(rep.state_crlb[:3]))
    try:
        ch, loc = localize(frame.Y, frame.knowns, cfg, scp.estimator)
    except EstimationError as exc:
        rec.error = str(exc)
        return rec
    T = cfg.delay_period
    rec.estimates = {"tau_su": ch.tau_su, "nu_su": ch.nu_su, "tau_sru": ch.tau_sru,
                     "nu_sru": ch.nu_sru, "aod_az": ch.theta_ru.az, "aod_el": ch.theta_ru.el,
                     "position": loc.position.tolist(), "delta": loc.clock_bias, "cfo": loc.cfo}
    err = {
        "tau_su": wrap(ch.tau_su - su.tau, T),
        "nu_su": ch.nu_su - su.nu,
        "tau_sru": wrap(ch.tau_sru - sru.tau, T),
        "nu_sru": ch.nu_sru - sru.nu,
        "aod_az": _wrap_angle(ch.theta_ru.az - sru.theta_ru[0]),
        "aod_el": _wrap_angle(ch.theta_ru.el - sru.theta_ru[1]),
        "delta": wrap(loc.clock_bias - scp.clock.delta, T),
        "cfo": loc.cfo - scp.clock.delta_f,
    }
    rec.sq_errors = {k: float(v) ** 2 for k, v in err.items()}
    rec.sq_errors["pos"] = float(np.sum((loc.position - scp.ue_position) ** 2))
    rec.success = True
    return rec


def _trial_job(args):
    return run_trial(*args)


def run_point(sc: Scenario, p_sweep_db: float, ris_mode: str, runs: int, seed: int = 0,
              workers: int = 1) -> list[TrialRecord]:
    """All trials of one sweep point, in trial order whatever the scheduling."""
    jobs = [(sc, p_sweep_db, t, ris_mode, seed) for t in range(runs)]
    if workers <= 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_job, jobs))


def aggregate(records: list[TrialRecord]) -> SweepRow:
    """Success-only RMSE; CRLB averaged (in variance) over every trial's realisation."""
    if not records:
        raise ValueError("no trials to aggregate")
    ok = [r for r in records if r.success]
    rmse = {k: (math.sqrt(float(np.mean([r.sq_errors[k] for r in ok]))) if ok else math.nan)
            for k in ERROR_KEYS}
    with_b = [r for r in records if r.bounds]
    crlb = {k: (float(np.mean([r.bounds[k] for r in with_b])) if with_b else math.nan)
            for k in ERROR_KEYS}
    snr_lin = np.mean([10 ** (r.snr_db / 10) for r in records])
    return SweepRow(snr_db=float(10 * np.log10(snr_lin)), p_sweep_db=records[0].p_sweep_db,
                    ris_mode=records[0].ris_mode, runs=len(records),
                    failures=len(records) - len(ok), rmse=rmse, crlb=crlb)


def run_sweep(sc: Scenario, sweep: SweepSettings, workers: int = 1, progress=None) -> list[SweepRow]:
    """One row per (ris_mode, sweep point), modes in config order, points ascending."""
    if sweep.runs < 1 or not sweep.p_sweep_db:
        raise ValueError("sweep needs at least one run and one power offset")
    rows = []
    for mode in sweep.ris_modes:
        for p in sorted(sweep.p_sweep_db):
            records = run_point(sc, p, mode, sweep.runs, sweep.seed, workers)
            rows.append(aggregate(records))
            if progress is not None:
                progress(rows[-1])
    return rows


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.9g}"


def emit_csv(rows: list[SweepRow], path) -> None:
    """Write the sweep table; ``path`` may also be an open text stream."""
    if not rows:
        raise ValueError("refusing to write an empty sweep table")
    lines = [[_fmt(row.as_csv_dict()[c]) for c in CSV_COLUMNS] for row in rows]
    if hasattr(path, "write"):
        writer = csv.writer(path, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(lines)
        return
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(lines)


def read_csv(path) -> list[dict]:
    """Parse a sweep CSV back into dicts with numeric fields as numbers."""
    with open(Path(path), encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError("unexpected CSV header")
        out = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k == "ris_mode":
                    row[k] = v
                elif k in ("runs", "failures"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out
