"""Command-line entry point: simulate, localize, crlb, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .channel import ObservationGrid, read_observation, write_observation
from .crlb import ChannelPoint, fim_report
from .estimator import EstimationError, localize
from .geometry import DegenerateGeometryError
from .harness import emit_csv, run_sweep
from .scenario import ConfigError, Scenario, SweepSettings, load_config, table_i_config_path
from .simulation import RIS_MODES, simulate_frame

SEED_ENV = "ORBIT_ECHO_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors by exception instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def desk_config_path() -> Path:
    return table_i_config_path().with_name("desk.cfg")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="config file (default: packaged desk profile; --full for the reference profile)")
    common.add_argument("--full", action="store_true",
                        help="use the packaged full-scale reference profile when --config is not given")
    common.add_argument("--seed", type=int, default=None,
                        help=f"master seed (u64); falls back to ${SEED_ENV}, then the config")
    common.add_argument("--out", type=Path, default=None, help="output path")
    common.add_argument("--ris-mode", choices=RIS_MODES, default=None)
    common.add_argument("--runs", type=int, default=None, help="Monte-Carlo runs per sweep point")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    parser = _Parser(prog="orbit-echo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", parents=[common], help="write one observation dump + truth sidecar")
    p.add_argument("--p-sweep", type=float, default=0.0, help="power offset in dB")
    p.add_argument("--noise-free", action="store_true")
    p = sub.add_parser("localize", parents=[common], help="localize from an observation dump")
    p.add_argument("input", type=Path, help="dump written by 'simulate'")
    p = sub.add_parser("crlb", parents=[common], help="print the bounds at one operating point")
    p.add_argument("--p-sweep", type=float, default=0.0, help="power offset in dB")
    p = sub.add_parser("sweep", parents=[common], help="power sweep to CSV")
    p.add_argument("--workers", type=int, default=1, help="worker processes per sweep point")
    return parser


def _load(args) -> tuple[Scenario, SweepSettings, Path]:
    path = args.config
    if path is None:
        path = table_i_config_path() if args.full else desk_config_path()
    sc, sweep = load_config(path)
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        sweep = SweepSettings(sweep.p_sweep_db, sweep.runs, sweep.ris_modes, seed)
    if args.runs is not None:
        if args.runs < 1:
            raise ConfigError("--runs must be at least 1")
        sweep = SweepSettings(sweep.p_sweep_db, args.runs, sweep.ris_modes, sweep.seed)
    if args.ris_mode is not None:
        sweep = SweepSettings(sweep.p_sweep_db, sweep.runs, (args.ris_mode,), sweep.seed)
    return sc, sweep, Path(path)


def _frame_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed]))


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def cmd_simulate(args) -> int:
    sc, sweep, cfg_path = _load(args)
    mode = sweep.ris_modes[0]
    scp = sc.with_power(args.p_sweep)
    frame = simulate_frame(scp, mode, _frame_rng(sweep.seed), noise=not args.noise_free)
    out = args.out or Path("observation.bin")
    write_observation(out, ObservationGrid(frame.Y, frame.noise_variance, scp.ofdm.sample_rate))
    su, sru = frame.su, frame.sru
    truth = {
        "position_m": np.asarray(scp.ue_position).tolist(),
        "clock_bias_s": scp.clock.delta, "cfo": scp.clock.delta_f,
        "tau_su_s": su.tau, "nu_su": su.nu, "tau_sru_s": sru.tau, "nu_sru": sru.nu,
        "aod_ru_deg": np.rad2deg(np.asarray(sru.theta_ru)).tolist(),
        "alpha_su": [su.alpha.real, su.alpha.imag], "alpha_sru": [sru.alpha.real, sru.alpha.imag],
        "snr_db": frame.snr_db, "noise_variance": frame.noise_variance,
    }
    meta = {"seed": sweep.seed, "ris_mode": mode, "p_sweep_db": args.p_sweep,
            "config": str(cfg_path.resolve()), "truth": truth}
    _sidecar(out).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    if not args.quiet:
        print(f"wrote {out} (K={scp.ofdm.n_subcarriers}, L={scp.ofdm.n_symbols}, "
              f"SNR {frame.snr_db:.2f} dB) and {_sidecar(out)}")
    return EXIT_OK


def cmd_localize(args) -> int:
    meta = {}
    side = _sidecar(args.input)
    if side.is_file():
        meta = json.loads(side.read_text(encoding="utf-8"))
        if args.config is None and meta.get("config"):
            args.config = Path(meta["config"])
        if args.seed is None and "seed" in meta:
            args.seed = int(meta["seed"])
        if args.ris_mode is None and meta.get("ris_mode"):
            args.ris_mode = meta["ris_mode"]
    sc, sweep, _ = _load(args)
    grid = read_observation(args.input)
    cfg = sc.ofdm
    if grid.Y.shape != (cfg.n_subcarriers, cfg.n_symbols):
        raise ConfigError(f"dump is {grid.Y.shape[0]}x{grid.Y.shape[1]} but the config is "
                          f"{cfg.n_subcarriers}x{cfg.n_symbols}")
    # Profile and pilots are regenerated from the seed: they are drawn first, before the noise.
    scp = sc.with_power(float(meta.get("p_sweep_db", 0.0)))
    frame = simulate_frame(scp, sweep.ris_modes[0], _frame_rng(sweep.seed), noise=False)
    ch, loc = localize(grid.Y, frame.knowns, scp.ofdm, scp.estimator)
    result = {
        "position_m": loc.position.tolist(), "clock_bias_s": loc.clock_bias, "cfo": loc.cfo,
        "d_ru_m": loc.d_ru, "aod_ru_deg": np.rad2deg(np.asarray(ch.theta_ru)).tolist(),
        "tau_su_s": ch.tau_su, "nu_su": ch.nu_su, "tau_sru_s": ch.tau_sru,
    }
    if "truth" in meta:
        result["position_error_m"] = float(np.linalg.norm(
            loc.position - np.asarray(meta["truth"]["position_m"])))
    text = json.dumps(result, indent=2)
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_crlb(args) -> int:
    sc, sweep, _ = _load(args)
    lines = []
    for mode in sweep.ris_modes:
        scp = sc.with_power(args.p_sweep)
        frame = simulate_frame(scp, mode, _frame_rng(sweep.seed), noise=False)
        point = ChannelPoint.from_paths(frame.su, frame.sru, frame.pilots, frame.profile.phases,
                                        scp.array)
        rep = fim_report(point, scp.ofdm, scp.budget.noise_variance(scp.ofdm), scp.ue_position,
                         scp.ris_position, scp.ris_rotation, frame.sat.position,
                         frame.sat.velocity)
        lines.append(f"[{mode}] P_sweep {args.p_sweep:g} dB, SNR {frame.snr_db:.2f} dB")
        for name, value in rep.as_dict().items():
            label = name if name == "peb" else name.replace("crlb_", "sqrt_crlb_")
            shown = value if name == "peb" else float(np.sqrt(value))
            lines.append(f"  {label:20s} {shown:.6g}")
    text = "\n".join(lines)
    if args.out is not None:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    sc, sweep, _ = _load(args)

    def progress(row):
        if not args.quiet:
            print(f"{row.ris_mode:9s} P_sweep {row.p_sweep_db:6.1f} dB  SNR {row.snr_db:6.2f} dB  "
                  f"rmse_pos {row.rmse['pos']:.4g} m  peb {np.sqrt(row.crlb['pos']):.4g} m  "
                  f"failures {row.failures}/{row.runs}", file=sys.stderr)

    rows = run_sweep(sc, sweep, workers=max(1, args.workers), progress=progress)
    if args.out is None:
        emit_csv(rows, sys.stdout)
    else:
        emit_csv(rows, args.out)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "localize": cmd_localize, "crlb": cmd_crlb, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, DegenerateGeometryError, OSError, ValueError,
            ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
