import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.optimize import brentq

from decoupling import (FringeDataset, LorentzianSpectrum, NoiseTrajectory,
                        PowerLawSpectrum, PulseParams, ValidationError, WhiteSpectrum, chi,
                        coherence_curve_mc, evolve_bloch, fit_coherence_time, fit_fringe,
                        make_sequence, pulse_error_floor, ramsey_fringe)
from decoupling.montecarlo import (apply_readout_error, bloch_vectors, choose_dt,
                                   default_phases)
from decoupling.noise import _cached_powers, _grid

INSTANT = PulseParams(instantaneous=True, readout_error=0.0)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]])
SZ = np.diag([1.0, -1.0]).astype(complex)


def su2_oracle(sequence, params, samples, dt, ramsey_phase):
    """P(up) from products of 2x2 propagators exp(-i H t) on every constant piece.

    H = (delta sz + Omega (cos p sx + sin p sy)) / 2. The analysis axis is
    taken from the noiseless instantaneous-pulse state, so the oracle fixes
    its own phase reference.
    """
    t_pi = params.pi_duration
    th = 0.5 * t_pi
    tau = sequence.tau
    offset = params.axis_offset
    pulses = [(0.0, th, 0.0)]
    for a, ph in zip(sequence.alphas, sequence.pulse_phases):
        c = th + a * tau
        pulses.append((c - 0.5 * t_pi, c + 0.5 * t_pi, ph + offset))

    def rot(axis_phase, angle):
        n = math.cos(axis_phase) * SX + math.sin(axis_phase) * SY
        return expm(-0.5j * angle * n)

    # noiseless reference azimuth before the analysis pulse
    psi = rot(0.0, math.pi / 2) @ np.array([0, 1], dtype=complex)
    for _, _, ph in pulses[1:]:
        psi = rot(ph, math.pi) @ psi
    x = 2 * (np.conj(psi[0]) * psi[1]).real
    y = 2 * (np.conj(psi[0]) * psi[1]).imag
    ref = math.atan2(y, x) - math.pi / 2

    end = th + tau
    pulses.append((end, end + th, ramsey_phase + ref))
    t_end = end + th
    cuts = set(np.arange(0, int(math.ceil(t_end / dt)) + 1) * dt)
    for lo, hi, _ in pulses:
        cuts.update((lo, hi))
    cuts = np.array(sorted(c for c in cuts if c <= t_end + 1e-18))
    psi = np.array([0, 1], dtype=complex)
    omega = params.rabi_frequency
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        d = samples[min(int(mid / dt), samples.size - 1)]
        h = 0.5 * d * SZ
        for plo, phi_, ph in pulses:
            if plo <= mid < phi_:
                h = h + 0.5 * omega * (math.cos(ph) * SX + math.sin(ph) * SY)
        psi = expm(-1j * h * (hi - lo)) @ psi
    return abs(psi[0]) ** 2


def zero_trajectory(duration, dt=1e-6):
    return NoiseTrajectory(dt, np.zeros(int(math.ceil(duration / dt)) + 1))


class TestEvolve:
    @pytest.mark.parametrize("n", [0, 1, 2, 5])
    @pytest.mark.parametrize("mode", ["fixed_x", "quadrature_y"])
    def test_noiseless_extremes(self, n, mode):
        seq = make_sequence("udd", n, tau=1e-3)
        params = PulseParams(instantaneous=True, readout_error=0.0, pi_pulse_phase_mode=mode)
        traj = zero_trajectory(1e-3)
        assert evolve_bloch(seq, params, traj, 0.0) == pytest.approx(1.0, abs=1e-12)
        assert evolve_bloch(seq, params, traj, math.pi) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("n", [0, 1, 4])
    def test_noiseless_finite_pulses(self, n):
        params = PulseParams(readout_error=0.0)
        seq = make_sequence("cpmg", n, tau=1e-3)
        traj = zero_trajectory(1e-3 + params.pi_duration)
        assert evolve_bloch(seq, params, traj, 0.0) == pytest.approx(1.0, abs=1e-10)

    @given(st.floats(-2e4, 2e4))
    def test_hahn_cancels_constant_offset(self, delta):
        seq = make_sequence("hahn", 1, tau=1e-3)
        traj = NoiseTrajectory(1e-5, np.full(101, delta))
        for phase in (0.0, 1.0, math.pi / 2):
            expected = 0.5 * (1 + math.cos(phase))
            assert evolve_bloch(seq, INSTANT, traj, phase) == pytest.approx(expected, abs=1e-10)

    @given(st.floats(-2e4, 2e4), st.floats(-np.pi, np.pi))
    def test_ramsey_constant_offset(self, delta, phase):
        tau = 1e-3
        traj = NoiseTrajectory(1e-5, np.full(101, delta))
        expected = 0.5 * (1 + math.cos(phase - delta * tau))
        assert evolve_bloch(make_sequence("ramsey", 0, tau=tau), INSTANT, traj,
                            phase) == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("kind,n,mode", [("ramsey", 0, "quadrature_y"),
                                             ("hahn", 1, "fixed_x"),
                                             ("udd", 3, "quadrature_y"),
                                             ("cpmg", 4, "fixed_x")])
    def test_matches_su2_oracle(self, kind, n, mode):
        params = PulseParams(pi_pulse_phase_mode=mode, readout_error=0.0)
        tau = 4e-4
        seq = make_sequence(kind, n, tau=tau)
        dt = 2.5e-6
        rng = np.random.default_rng(n)
        samples = rng.normal(0, 2 * np.pi * 3e3, int((tau + params.pi_duration) / dt) + 2)
        traj = NoiseTrajectory(dt, samples)
        for phase in (0.0, 0.7, 2.0):
            got = evolve_bloch(seq, params, traj, phase)
            assert got == pytest.approx(su2_oracle(seq, params, samples, dt, phase), abs=1e-9)

    def test_unitarity(self, rng):
        samples = rng.normal(0, 2 * np.pi * 5e3, 600)
        traj = NoiseTrajectory(2e-6, samples)
        for params, tol in ((INSTANT, 1e-9), (PulseParams(), 1e-6)):
            for n in (0, 1, 6):
                seq = make_sequence("udd", n, tau=1e-3)
                v = bloch_vectors(seq, params, traj, 0.3)
                assert abs(np.linalg.norm(v) - 1) < tol

    def test_short_trajectory(self):
        with pytest.raises(ValidationError):
            evolve_bloch(make_sequence("hahn", 1, tau=1e-3), INSTANT, zero_trajectory(5e-4))

    def test_readout_map(self):
        assert apply_readout_error(1.0, 0.02) == pytest.approx(0.98)
        assert apply_readout_error(0.0, 0.02) == pytest.approx(0.02)
        assert apply_readout_error(0.5, 0.3) == pytest.approx(0.5)

    def test_params_validation(self):
        with pytest.raises(ValidationError):
            PulseParams(pi_pulse_phase_mode="z")
        with pytest.raises(ValidationError):
            PulseParams(readout_error=0.5)
        with pytest.raises(ValidationError):
            PulseParams(rabi_frequency=0.0)
        assert PulseParams(rabi_frequency=0.0, instantaneous=True).pi_duration == 0.0


class TestFringe:
    def test_default_phases(self):
        ph = np.degrees(default_phases())
        assert ph[0] == -450 and ph[-1] == 450 and ph.size == 21

    def test_noiseless_contrast(self):
        fr = ramsey_fringe(make_sequence("cpmg", 2, tau=1e-3), INSTANT, WhiteSpectrum(0.0),
                           seed=1)
        est = fit_fringe(fr)
        # shot noise only: fringe extremes are deterministic
        assert fr.successes[[6, 14]].tolist() == [0, 0]
        assert fr.successes[[10, 18]].tolist() == [200, 200]
        assert est.contrast == pytest.approx(1.0, abs=3 * est.uncertainty)
        assert fr.trials[0] == 200

    def test_readout_error_contrast(self):
        params = PulseParams(instantaneous=True, readout_error=0.02)
        fr = ramsey_fringe(make_sequence("hahn", 1, tau=1e-3), params, WhiteSpectrum(0.0),
                           shots_per_phase=1000, seed=2)
        est = fit_fringe(fr)
        assert est.contrast == pytest.approx(0.96, abs=3 * est.uncertainty + 1e-3)

    def test_ou_ramsey_at_analytic_e_fold(self):
        spec = LorentzianSpectrum((2 * np.pi * 300) ** 2, 2 * np.pi * 1e3)
        ramsey = make_sequence("ramsey", 0)
        tau = brentq(lambda t: chi(ramsey, t, spec) - 1.0, 1e-5, 1e-1)
        fr = ramsey_fringe(ramsey.with_tau(tau), INSTANT, spec, shots_per_phase=500, seed=3)
        est = fit_fringe(fr)
        assert abs(est.contrast - math.exp(-1)) < 3 * est.uncertainty

    def test_worker_independent(self):
        spec = LorentzianSpectrum((2 * np.pi * 300) ** 2, 2 * np.pi * 1e3)
        seq = make_sequence("udd", 2, tau=5e-4)
        serial = ramsey_fringe(seq, PulseParams(), spec, shots_per_phase=30, seed=4)
        with ProcessPoolExecutor(2) as pool:
            par = ramsey_fringe(seq, PulseParams(), spec, shots_per_phase=30, seed=4,
                                executor=pool)
        np.testing.assert_array_equal(serial.successes, par.successes)

    def test_seed_changes_outcomes(self):
        spec = WhiteSpectrum(2000.0, 2 * np.pi * 5e4)
        seq = make_sequence("ramsey", 0, tau=1e-3)
        a = ramsey_fringe(seq, INSTANT, spec, shots_per_phase=50, seed=0)
        b = ramsey_fringe(seq, INSTANT, spec, shots_per_phase=50, seed=1)
        assert not np.array_equal(a.successes, b.successes)

    def test_shots_validation(self):
        with pytest.raises(ValidationError):
            ramsey_fringe(make_sequence("hahn", 1), INSTANT, WhiteSpectrum(0.0),
                          shots_per_phase=0)

    def test_duration_validation(self):
        with pytest.raises(ValidationError):
            ramsey_fringe(make_sequence("hahn", 1, tau=1e-3), INSTANT, WhiteSpectrum(0.0),
                          shots_per_phase=1, duration=5e-4)

    def test_choose_dt_bounds_step_phase(self):
        spec = LorentzianSpectrum((2 * np.pi * 3e4) ** 2, 2 * np.pi * 1e3)
        seq = make_sequence("hahn", 1)
        dt = choose_dt(seq, INSTANT, spec, 1e-3)
        _, m, dw = _grid(dt, 1e-3)
        rms = math.sqrt(float(np.sum(_cached_powers(spec, m // 2 + 1, dw))))
        assert rms * dt <= 0.05
        assert dt <= 1e-3 / 1024


class TestFitFringe:
    def make(self, contrast, phi0=0.3, trials=10**6):
        ph = default_phases()
        p = 0.5 * (1 + contrast * np.cos(ph - phi0))
        return FringeDataset(ph, np.round(p * trials).astype(int), np.full(ph.size, trials))

    def test_exact_sinusoid(self):
        est = fit_fringe(self.make(0.8), n_bootstrap=0)
        assert est.contrast == pytest.approx(0.8, abs=1e-6)
        assert est.phase_offset == pytest.approx(0.3, abs=1e-5)
        assert est.uncertainty == 0.0
        assert fit_fringe(self.make(0.8), n_bootstrap=200).uncertainty < 1e-3

    def test_flat_fringe(self):
        ph = default_phases()
        fr = FringeDataset(ph, np.full(ph.size, 100), np.full(ph.size, 200))
        est = fit_fringe(fr)
        assert est.contrast == pytest.approx(0.0, abs=1e-12)
        # each LSQ coefficient has sd sqrt(1 / (trials sum cos^2)); C is Rayleigh
        sd = math.sqrt(1 / (200 * np.sum(np.cos(ph) ** 2)))
        assert est.uncertainty == pytest.approx(sd * math.sqrt(2 - math.pi / 2), rel=0.15)

    def test_bootstrap_matches_repetition(self):
        rng = np.random.default_rng(7)
        ph = default_phases()
        p = 0.5 * (1 + 0.5 * np.cos(ph))
        cs, sigmas, hits = [], [], 0
        for rep in range(200):
            fr = FringeDataset(ph, rng.binomial(200, p), np.full(ph.size, 200))
            est = fit_fringe(fr, n_bootstrap=300, seed=rep)
            cs.append(est.contrast)
            sigmas.append(est.uncertainty)
            hits += abs(est.contrast - 0.5) < 3 * est.uncertainty
        assert np.mean(sigmas) == pytest.approx(np.std(cs, ddof=1), rel=0.3)
        assert hits >= 0.97 * 200

    def test_at_bound_flag(self):
        ph = default_phases()
        k = np.where(np.cos(ph) > 0, 200, 0)
        est = fit_fringe(FringeDataset(ph, k, np.full(ph.size, 200)), n_bootstrap=0)
        assert est.contrast == 1.0 and est.at_bound

    def test_narrow_scan_rejected(self):
        ph = np.linspace(0, np.pi, 10)
        with pytest.raises(ValidationError):
            fit_fringe(FringeDataset(ph, np.full(10, 5), np.full(10, 10)))

    @pytest.mark.parametrize("kwargs", [
        {"successes": np.full(21, 300)},
        {"trials": np.zeros(21, dtype=int)},
        {"phases": np.zeros(21)},
    ])
    def test_dataset_validation(self, kwargs):
        base = {"phases": default_phases(), "successes": np.full(21, 10),
                "trials": np.full(21, 200)}
        base.update(kwargs)
        with pytest.raises(ValidationError):
            FringeDataset(**base)

    def test_csv_round_trip(self, tmp_path):
        fr = self.make(0.6, trials=500)
        fr.to_csv(tmp_path / "f.csv")
        assert (tmp_path / "f.csv").read_text().startswith("phase_deg,successes,trials\n")
        back = FringeDataset.from_csv(tmp_path / "f.csv")
        np.testing.assert_allclose(back.phases, fr.phases, atol=1e-12)
        np.testing.assert_array_equal(back.successes, fr.successes)


class TestCoherenceCurveMC:
    def test_zero_noise_plateau(self):
        params = PulseParams(readout_error=0.01)
        curve = coherence_curve_mc(make_sequence("cpmg", 4), params, WhiteSpectrum(0.0),
                                   [2e-4, 5e-4, 1e-3], shots_per_phase=100, n_bootstrap=50)
        np.testing.assert_allclose(curve.contrasts, 0.98, atol=0.02)
        assert curve.source == "simulated"

    def test_white_ramsey_e_fold(self):
        s0 = 2000.0
        spec = WhiteSpectrum(s0, 2 * np.pi * 2e5)
        taus = np.geomspace(2e-4, 3e-3, 10)
        curve = coherence_curve_mc(make_sequence("ramsey", 0), INSTANT, spec, taus,
                                   shots_per_phase=200, seed=5, n_bootstrap=100)
        tau_c, _ = fit_coherence_time(curve)
        assert tau_c == pytest.approx(2 / s0, rel=0.1)

    def test_more_pulses_decay_slower(self):
        spec = PowerLawSpectrum(1e-2 * (2 * np.pi * 1e3) ** 4, 4.0, 2 * np.pi * 10,
                                2 * np.pi * 1e5, 1.0)
        udd3, udd6 = make_sequence("udd", 3), make_sequence("udd", 6)
        tc3 = brentq(lambda t: chi(udd3, t, spec) - 1.0, 1e-5, 1.0)
        taus = tc3 * np.array([0.8, 1.0, 1.3])
        c3 = coherence_curve_mc(udd3, INSTANT, spec, taus, shots_per_phase=200, seed=6,
                                n_bootstrap=100)
        c6 = coherence_curve_mc(udd6, INSTANT, spec, taus, shots_per_phase=200, seed=6,
                                n_bootstrap=100)
        assert np.all(c6.contrasts > c3.contrasts)
        analytic = [math.exp(-chi(udd6, t, spec)) for t in taus]
        assert np.all(np.array(analytic) > np.exp(-np.array([chi(udd3, t, spec) for t in taus])))

    def test_taus_must_increase(self):
        with pytest.raises(ValidationError):
            coherence_curve_mc(make_sequence("hahn", 1), INSTANT, WhiteSpectrum(0.0),
                               [1e-3, 5e-4])


class TestPulseErrorFloor:
    def test_needs_finite_pulses(self):
        with pytest.raises(ValidationError):
            pulse_error_floor(INSTANT, WhiteSpectrum(0.0))

    def test_noiseless_pulses_are_perfect(self):
        floor = pulse_error_floor(PulseParams(readout_error=0.0), WhiteSpectrum(0.0),
                                  ns=(0, 2, 4), shots_per_phase=20, n_bootstrap=0)
        # shared shot seeds: identical Bernoulli draws for every n
        assert np.ptp(floor.contrasts) < 1e-12
        assert floor.fidelity == pytest.approx(1.0, abs=1e-9)

    def test_static_offset_finite_pi_half(self):
        # a constant detuning during the two pi/2 pulses adds a phase 2 delta / Omega
        params = PulseParams(readout_error=0.0)
        delta = 2 * np.pi * 1e3
        traj = NoiseTrajectory(params.pi_duration / 64, np.full(512, delta))
        gap = 1e-3 * params.pi_duration
        got = evolve_bloch(make_sequence("ramsey", 0, tau=gap), params, traj, 0.0)
        expected = 0.5 * (1 + math.cos(2 * delta / params.rabi_frequency + delta * gap))
        assert got == pytest.approx(expected, abs=1e-5)
        for n in (1, 2, 3):
            seq = make_sequence("cpmg", n, tau=gap + n * params.pi_duration)
            assert evolve_bloch(seq, params, traj, 0.0) == pytest.approx(
                su2_oracle(seq, params, traj.samples, traj.dt, 0.0), abs=1e-10)
