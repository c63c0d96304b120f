import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbit_echo.channel import (
    ClockState,
    DimensionError,
    LinkBudget,
    ObservationGrid,
    OfdmConfig,
    build_model_matrices,
    complex_noise,
    fast_time_matrix,
    generate_observation,
    generate_observation_exact,
    mean_observation,
    ofdm_demodulate,
    ofdm_modulate,
    path_params_from_geometry,
    pilot_grid,
    read_observation,
    slow_time_matrix,
    snr_db,
    subcarrier_matrix,
    write_observation,
)
from orbit_echo.geometry import orbit_state

SMALL = OfdmConfig(f_c=2e9, n_subcarriers=64, n_symbols=8, subcarrier_spacing=15e3,
                   cp_fraction=0.07, p_tot=1.0)


def paths(sc, clock=None):
    sat = orbit_state(sc.orbit)
    return path_params_from_geometry(sc.ue_position, sc.ris_position, sc.ris_rotation, sat,
                                     clock or sc.clock, sc.budget, sc.ofdm)


class TestNumerology:
    def test_table_i_timing(self, full_scenario):
        cfg = full_scenario.ofdm
        assert cfg.T == pytest.approx(1 / 15e3)
        assert cfg.T_sym == pytest.approx(1.07 / 15e3)
        assert cfg.bandwidth == pytest.approx(30e6)
        assert cfg.delay_period == cfg.T

    @pytest.mark.parametrize("kw", [{"n_subcarriers": 0}, {"subcarrier_spacing": -1.0},
                                    {"cp_fraction": 1.0}])
    def test_rejects_bad_config(self, kw):
        base = dict(f_c=2e9, n_subcarriers=4, n_symbols=2, subcarrier_spacing=15e3,
                    cp_fraction=0.07, p_tot=1.0)
        with pytest.raises(ValueError):
            OfdmConfig(**(base | kw))


class TestPathParameters:
    def test_table_i_doppler_and_delay(self, full_scenario):
        su, sru = paths(full_scenario)
        assert su.nu == pytest.approx(1.73e-5, rel=0.01)
        assert sru.nu - su.nu == pytest.approx(3.09e-10, rel=0.02)
        assert sru.nu - sru.nu_sr == pytest.approx(full_scenario.clock.delta_f)
        assert (sru.tau - su.tau) * 299792458.0 == pytest.approx(14.185, abs=0.01)

    def test_amplitude_ratio(self, full_scenario):
        su, sru = paths(full_scenario)
        assert 20 * np.log10(sru.rho / su.rho) == pytest.approx(-53.6, abs=0.2)
        assert abs(su.alpha) == pytest.approx(su.rho)

    def test_clock_shifts_both_delays(self, full_scenario):
        a_su, a_sru = paths(full_scenario, ClockState(0.0, 0.0))
        b_su, b_sru = paths(full_scenario, ClockState(2e-9, 3e-7))
        assert b_su.tau - a_su.tau == pytest.approx(2e-9, abs=1e-18)
        assert b_sru.tau - a_sru.tau == pytest.approx(2e-9, abs=1e-18)
        assert b_su.nu - a_su.nu == pytest.approx(3e-7, abs=1e-18)
        assert b_sru.nu - a_sru.nu == pytest.approx(3e-7, abs=1e-18)


class TestMatrices:
    def test_zero_doppler_masks_are_ones(self):
        np.testing.assert_array_equal(fast_time_matrix(0.0, SMALL), 1.0)
        np.testing.assert_array_equal(slow_time_matrix(0.0, SMALL), 1.0)

    def test_subcarrier_delay_phase(self):
        B = subcarrier_matrix(1e-6, 0.0, SMALL)
        np.testing.assert_allclose(B[:, 0], np.exp(-2j * np.pi * np.arange(64) * 15e3 * 1e-6))
        np.testing.assert_allclose(B[:, 3], B[:, 0])

    def test_shape_checks(self, full_scenario):
        su, sru = paths(full_scenario)
        with pytest.raises(DimensionError):
            build_model_matrices(su, sru, SMALL, np.ones(3), np.ones((64, 8)))
        with pytest.raises(DimensionError):
            build_model_matrices(su, sru, SMALL, np.ones(8), np.ones((63, 8)))

    def test_pilots(self, rng):
        X = pilot_grid(SMALL, rng)
        np.testing.assert_allclose(np.abs(X), 1.0)
        assert set(np.round(X.real * np.sqrt(2)).ravel()) == {-1.0, 1.0}
        np.testing.assert_array_equal(pilot_grid(SMALL, kind="ones"), 1.0)
        with pytest.raises(ValueError):
            pilot_grid(SMALL, rng, kind="bpsk")


class TestObservation:
    def test_single_path_energy_matches_snr(self, desk, rng):
        cfg = desk.ofdm
        su, sru = paths(desk)
        sru = sru.with_alpha(0.0)
        g = np.zeros(cfg.n_symbols)
        X = pilot_grid(cfg, rng)
        Y = mean_observation(cfg, su, sru, build_model_matrices(su, sru, cfg, g, X))
        sigma2 = desk.budget.noise_variance(cfg)
        assert 10 * np.log10(np.vdot(Y, Y).real / sigma2) == pytest.approx(
            snr_db(cfg, su.alpha, 0.0, g, desk.budget), abs=1e-9)

    def test_noise_variance(self, rng):
        n = complex_noise((400, 400), 2.5, rng)
        assert np.mean(np.abs(n) ** 2) == pytest.approx(2.5, rel=0.02)
        assert abs(np.mean(n.real ** 2) - np.mean(n.imag ** 2)) < 0.05

    def test_noise_requires_rng(self, desk):
        su, sru = paths(desk)
        cfg = desk.ofdm
        m = build_model_matrices(su, sru, cfg, np.ones(cfg.n_symbols), pilot_grid(cfg, kind="ones"))
        with pytest.raises(ValueError):
            generate_observation(cfg, su, sru, m, 1.0, None)

    def test_exact_equals_matrix_without_doppler(self, desk, rng):
        cfg = desk.ofdm
        su, sru = paths(desk, ClockState(1e-9, 0.0))
        su.nu = 0.0
        sru.nu = 0.0
        g = rng.standard_normal(cfg.n_symbols) + 1j * rng.standard_normal(cfg.n_symbols)
        X = pilot_grid(cfg, rng)
        Ym = mean_observation(cfg, su, sru, build_model_matrices(su, sru, cfg, g, X))
        Ye = generate_observation_exact(cfg, su, sru, X, g).Y
        assert np.linalg.norm(Ye - Ym) / np.linalg.norm(Ym) < 1e-12

    def test_exact_deviation_grows_with_doppler(self, desk, rng):
        cfg = desk.ofdm
        su, sru = paths(desk)
        g = np.ones(cfg.n_symbols)
        X = pilot_grid(cfg, rng)
        Ym = mean_observation(cfg, su, sru, build_model_matrices(su, sru, cfg, g, X))
        dev = np.linalg.norm(generate_observation_exact(cfg, su, sru, X, g).Y - Ym) / np.linalg.norm(Ym)
        assert 1e-4 < dev < 0.1


class TestDump:
    def test_roundtrip(self, tmp_path, rng):
        Y = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))
        path = tmp_path / "y.bin"
        write_observation(path, ObservationGrid(Y, 1.0, 30e6))
        back = read_observation(path)
        np.testing.assert_array_equal(back.Y, Y)
        assert back.sample_rate == 30e6

    def test_layout_is_symbol_major(self, tmp_path):
        Y = np.arange(6).reshape(3, 2) + 0.5j
        path = tmp_path / "y.bin"
        write_observation(path, ObservationGrid(Y, 1.0, 1.0))
        raw = path.read_bytes()
        assert raw[:8] == (3).to_bytes(4, "little") + (2).to_bytes(4, "little")
        body = np.frombuffer(raw[16:], dtype="<f8")
        np.testing.assert_array_equal(body[:6], [0, 0.5, 2, 0.5, 4, 0.5])

    def test_truncated(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x01\x00")
        with pytest.raises(ValueError):
            read_observation(path)


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.integers(1, 6))
    def test_fft_unitary(self, seed, K, L):
        r = np.random.default_rng(seed)
        M = r.standard_normal((K, L)) + 1j * r.standard_normal((K, L))
        np.testing.assert_allclose(ofdm_demodulate(ofdm_modulate(M)), M, atol=1e-12)
        assert np.linalg.norm(ofdm_modulate(M)) == pytest.approx(np.linalg.norm(M), rel=1e-12)

    @settings(max_examples=150, deadline=None)
    @given(st.floats(-1e-4, 1e-4), st.floats(0, 1e-3))
    def test_masks_unit_modulus(self, nu, tau):
        for M in (fast_time_matrix(nu, SMALL), subcarrier_matrix(tau, nu, SMALL),
                  slow_time_matrix(nu, SMALL)):
            np.testing.assert_allclose(np.abs(M), 1.0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-60, 60))
    def test_snr_linear_in_power(self, offset):
        g = np.ones(8)
        budget = LinkBudget()
        a = snr_db(SMALL, 1e-6, 1e-9, g, budget)
        cfg = OfdmConfig(2e9, 64, 8, 15e3, 0.07, 10 ** (offset / 10))
        assert snr_db(cfg, 1e-6, 1e-9, g, budget) - a == pytest.approx(offset, abs=1e-9)
