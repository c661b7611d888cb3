"""Tests for channel module."""

import math

import numpy as np
import pytest

from simplexlink.channel import (
    ChannelDomainError,
    ChannelParameterError,
    FiberSpec,
    ImpairmentConfig,
    NumericalConfigError,
    WaveformShapeError,
    apply_cd,
    apply_freq_offset,
    apply_jones_matrix,
    apply_jones_rotation,
    apply_phase_noise,
    apply_timing_drift,
    bpf_response,
    jones_matrix,
    load_awgn_to_osnr,
    measure_osnr,
    optical_bpf,
    phase_noise_walk,
    random_jones_angles,
    ssfm_span,
)
from simplexlink.txchain import DualPolWaveform
from simplexlink.utils import linear_to_db, relative_rms


def _lossless(**changes: float) -> FiberSpec:
    base = {
        "length_km": 50.0,
        "attenuation_db_per_km": 0.0,
        "dispersion_ps_nm_km": 16.5,
        "gamma_per_w_km": 0.0,
        "raman_gain_db": 0.0,
    }
    base.update(changes)
    return FiberSpec(**base)


class TestNoiseLoading:
    """Tests for ASE noise loading and OSNR measurement."""

    @pytest.mark.parametrize("osnr_db", [5.0, 12.9, 20.0])
    def test_measured_osnr_is_exact(self, make_signal, osnr_db: float) -> None:
        """The realized OSNR equals the target for any record."""
        clean = make_signal(dac_bandwidth=13e9).sig
        noisy = load_awgn_to_osnr(clean, osnr_db, 16e9, seed=3)
        assert measure_osnr(noisy, clean) == pytest.approx(osnr_db, abs=1e-9)

    def test_noise_is_polarization_balanced(self, make_signal) -> None:
        """Each polarization receives half the noise power."""
        clean = make_signal().sig
        noisy = load_awgn_to_osnr(clean, 10.0, 16e9, seed=1)
        px = np.mean(np.abs(noisy.ex - clean.ex) ** 2)
        py = np.mean(np.abs(noisy.ey - clean.ey) ** 2)
        assert px == pytest.approx(py, rel=1e-12)

    def test_none_bypasses(self, make_signal) -> None:
        """A None target returns the input unchanged."""
        clean = make_signal().sig
        assert load_awgn_to_osnr(clean, None, 16e9, seed=1) is clean

    def test_seed_determines_noise(self, make_signal) -> None:
        """Equal seeds give equal noise, different seeds do not."""
        clean = make_signal().sig
        a = load_awgn_to_osnr(clean, 10.0, 16e9, seed=5)
        b = load_awgn_to_osnr(clean, 10.0, 16e9, seed=5)
        c = load_awgn_to_osnr(clean, 10.0, 16e9, seed=6)
        assert np.array_equal(a.ex, b.ex)
        assert not np.array_equal(a.ex, c.ex)

    def test_undersampled_symbol_rate_raises(self, make_signal) -> None:
        """A symbol rate above half the sample rate is rejected."""
        clean = make_signal().sig
        with pytest.raises(ChannelParameterError):
            load_awgn_to_osnr(clean, 10.0, 1e12, seed=1)

    def test_silent_signal_raises(self) -> None:
        """Noise cannot be referred to a zero-power signal."""
        silent = DualPolWaveform(np.zeros(64), np.zeros(64), 64e9, 16e9)
        with pytest.raises(ChannelDomainError):
            load_awgn_to_osnr(silent, 10.0, 16e9, seed=1)

    def test_identical_records_measure_infinite(self, make_signal) -> None:
        """A record compared with itself has no noise."""
        clean = make_signal().sig
        assert measure_osnr(clean, clean) == math.inf

    def test_mismatched_records_raise(self, make_signal) -> None:
        """Records of different length cannot be compared."""
        a = make_signal(order=6).sig
        b = make_signal(order=7).sig
        with pytest.raises(WaveformShapeError):
            measure_osnr(a, b)


class TestDispersion:
    """Tests for chromatic dispersion."""

    def test_zero_is_identity(self, make_signal) -> None:
        """Zero dispersion returns the input."""
        sig = make_signal().sig
        assert apply_cd(sig, 0.0) is sig

    def test_inverse(self, make_signal) -> None:
        """Opposite dispersion undoes dispersion."""
        sig = make_signal(dac_bandwidth=13e9).sig
        back = apply_cd(apply_cd(sig, 4950.0), -4950.0)
        assert relative_rms(back.ex, sig.ex) < 1e-9
        assert relative_rms(back.ey, sig.ey) < 1e-9

    def test_all_pass(self, make_signal) -> None:
        """Dispersion preserves power but changes the waveform."""
        sig = make_signal(dac_bandwidth=13e9).sig
        out = apply_cd(sig, 2000.0)
        assert out.power == pytest.approx(sig.power, rel=1e-12)
        assert relative_rms(out.ex, sig.ex) > 0.1

    def test_additive(self, make_signal) -> None:
        """Two dispersion stages add."""
        sig = make_signal().sig
        once = apply_cd(sig, 3000.0)
        twice = apply_cd(apply_cd(sig, 1000.0), 2000.0)
        assert relative_rms(twice.ex, once.ex) < 1e-9


class TestJones:
    """Tests for polarization rotation."""

    def test_unitary(self, rng: np.random.Generator) -> None:
        """Every rotation matrix is unitary."""
        for _ in range(20):
            u = jones_matrix(random_jones_angles(rng))
            assert np.allclose(u @ u.conj().T, np.eye(2))

    def test_zero_angles_identity(self, make_signal) -> None:
        """Zero angles leave the signal untouched."""
        sig = make_signal().sig
        assert apply_jones_rotation(sig, (0.0, 0.0, 0.0)) is sig
        assert np.allclose(jones_matrix((0.0, 0.0, 0.0)), np.eye(2))

    def test_quarter_turn_swaps(self, make_signal) -> None:
        """alpha = pi/2 moves y onto x and x onto y."""
        sig = make_signal().sig
        out = apply_jones_rotation(sig, (math.pi / 2, 0.0, 0.0))
        assert np.allclose(out.ex, -sig.ey)
        assert np.allclose(out.ey, sig.ex)

    def test_power_preserved_per_sample(self, make_signal) -> None:
        """Rotation preserves |ex|^2 + |ey|^2 at every sample."""
        sig = make_signal().sig
        out = apply_jones_rotation(sig, (0.4, 1.1, -2.0))
        before = np.abs(sig.ex) ** 2 + np.abs(sig.ey) ** 2
        after = np.abs(out.ex) ** 2 + np.abs(out.ey) ** 2
        assert np.allclose(before, after)

    def test_bad_matrix_shape_raises(self, make_signal) -> None:
        """Only 2x2 matrices act on Jones vectors."""
        with pytest.raises(ChannelParameterError):
            apply_jones_matrix(make_signal().sig, np.eye(3))

    def test_random_angles_cover_sphere(self, rng: np.random.Generator) -> None:
        """cos(2 alpha) is uniform on [-1, 1]."""
        alphas = np.array([random_jones_angles(rng)[0] for _ in range(20000)])
        assert np.all((alphas >= 0) & (alphas <= math.pi / 2))
        assert abs(np.mean(np.cos(2 * alphas))) < 0.02


class TestPhaseAndFrequency:
    """Tests for laser phase noise and frequency offset."""

    def test_walk_increment_variance(self) -> None:
        """Phase increments have variance 2 pi linewidth / sample_rate."""
        phi = phase_noise_walk(200_000, 1e6, 64e9, seed=2)
        expected = 2 * math.pi * 1e6 / 64e9
        assert np.var(np.diff(phi)) == pytest.approx(expected, rel=0.02)

    def test_zero_linewidth_identity(self, make_signal) -> None:
        """Zero linewidth is a bypass."""
        sig = make_signal().sig
        assert apply_phase_noise(sig, 0.0, seed=1) is sig
        assert np.all(phase_noise_walk(10, 0.0, 64e9, seed=1) == 0.0)

    def test_common_to_both_polarizations(self, make_signal) -> None:
        """Both polarizations see the same phase and keep their modulus."""
        sig = make_signal(dac_bandwidth=13e9).sig
        out = apply_phase_noise(sig, 200e3, seed=4)
        mask = (np.abs(sig.ex) > 1e-6) & (np.abs(sig.ey) > 1e-6)
        phase_x = np.angle(out.ex[mask] / sig.ex[mask])
        phase_y = np.angle(out.ey[mask] / sig.ey[mask])
        assert np.allclose(phase_x, phase_y)
        assert np.allclose(np.abs(out.ex), np.abs(sig.ex))

    def test_negative_linewidth_raises(self) -> None:
        """Linewidth cannot be negative."""
        with pytest.raises(ChannelParameterError):
            phase_noise_walk(10, -1.0, 64e9, seed=1)

    def test_offset_rotates_at_rate(self) -> None:
        """A constant field acquires phase 2 pi df t."""
        sig = DualPolWaveform(np.ones(1000), np.ones(1000), 64e9, 16e9)
        out = apply_freq_offset(sig, 1e9)
        slope = np.diff(np.unwrap(np.angle(out.ex)))
        assert np.allclose(slope, 2 * math.pi * 1e9 / 64e9)

    def test_offset_limit(self, make_signal) -> None:
        """Offsets at or beyond a quarter of the sample rate raise."""
        sig = make_signal().sig
        with pytest.raises(ChannelParameterError):
            apply_freq_offset(sig, sig.sample_rate / 4)


class TestFilterAndDrift:
    """Tests for the optical bandpass and timing drift."""

    def test_half_power_at_edge(self) -> None:
        """|H|^2 is one half at +/- bandwidth/2 and one at DC."""
        h = bpf_response(np.array([-17.5e9, 0.0, 17.5e9]), 35e9)
        assert np.allclose(np.abs(h) ** 2, [0.5, 1.0, 0.5])

    def test_none_bypasses(self, make_signal) -> None:
        """A None bandwidth is a bypass."""
        sig = make_signal().sig
        assert optical_bpf(sig, None) is sig

    def test_white_noise_power(self, rng: np.random.Generator) -> None:
        """White noise power scales by the mean of |H|^2."""
        n = 1 << 16
        noise = rng.normal(size=n) + 1j * rng.normal(size=n)
        sig = DualPolWaveform(noise, noise, 64e9, 16e9)
        out = optical_bpf(sig, 20e9)
        freqs = np.fft.fftfreq(n, d=1 / 64e9)
        expected = np.mean(np.abs(bpf_response(freqs, 20e9)) ** 2)
        assert out.power / sig.power == pytest.approx(expected, rel=0.03)

    def test_invalid_bandwidth_raises(self, make_signal) -> None:
        """A non-positive bandwidth is rejected."""
        with pytest.raises(ChannelParameterError):
            optical_bpf(make_signal().sig, 0.0)

    def test_drift_changes_length(self, make_signal) -> None:
        """A positive ppm offset shortens the record."""
        sig = make_signal().sig
        out = apply_timing_drift(sig, 100.0)
        assert len(out) == int(len(sig) / (1 + 100e-6))
        assert apply_timing_drift(sig, 0.0) is sig


class TestImpairmentConfig:
    """Tests for impairment settings."""

    def test_defaults_are_clean(self) -> None:
        """Defaults switch every impairment off."""
        cfg = ImpairmentConfig()
        assert cfg.jones_angles == (0.0, 0.0, 0.0)
        assert cfg.linewidth_total_hz == 0.0
        assert cfg.bpf_bandwidth_hz is None

    def test_rejects_negative_linewidth(self) -> None:
        """Negative linewidth raises."""
        with pytest.raises(ChannelParameterError):
            ImpairmentConfig(linewidth_total_hz=-1.0)

    def test_rejects_bad_angles(self) -> None:
        """Jones angles need three values."""
        with pytest.raises(ChannelParameterError):
            ImpairmentConfig(jones_angles=(0.1, 0.2))


class TestSsfm:
    """Tests for split-step fiber propagation."""

    def test_fiber_defaults(self) -> None:
        """The default span has 63 dB loss and 4950 ps/nm dispersion."""
        fiber = FiberSpec()
        assert fiber.loss_db == pytest.approx(63.0)
        assert fiber.total_dispersion_ps_nm == pytest.approx(4950.0)

    def test_rejects_zero_length(self) -> None:
        """A span must have positive length."""
        with pytest.raises(ChannelParameterError):
            FiberSpec(length_km=0.0)

    def test_linear_span_is_dispersion(self, make_signal) -> None:
        """Without loss or nonlinearity the span equals lumped dispersion."""
        sig = make_signal(order=10, dac_bandwidth=13e9).sig
        fiber = _lossless()
        out = ssfm_span(sig, fiber)
        ref = apply_cd(sig, fiber.total_dispersion_ps_nm)
        assert relative_rms(out.ex, ref.ex) < 1e-6
        assert relative_rms(out.ey, ref.ey) < 1e-6

    def test_spm_keeps_modulus(self, make_signal) -> None:
        """With zero dispersion the Kerr effect only changes phase."""
        sig = make_signal(order=10, dac_bandwidth=13e9, launch_dbm=10.0).sig
        out = ssfm_span(sig, _lossless(dispersion_ps_nm_km=0.0, gamma_per_w_km=1.3))
        before = np.abs(sig.ex) ** 2 + np.abs(sig.ey) ** 2
        after = np.abs(out.ex) ** 2 + np.abs(out.ey) ** 2
        assert np.allclose(after, before, rtol=1e-9, atol=1e-15)
        assert relative_rms(out.ex, sig.ex) > 1e-3

    def test_attenuation(self, make_signal) -> None:
        """A linear lossy span attenuates by alpha * L."""
        sig = make_signal(order=8).sig
        out = ssfm_span(sig, _lossless(length_km=10.0, attenuation_db_per_km=0.2))
        assert linear_to_db(out.power / sig.power) == pytest.approx(-2.0, abs=1e-9)

    def test_raman_gain(self, make_signal) -> None:
        """Distributed Raman gain integrates to its configured total."""
        sig = make_signal(order=8).sig
        fiber = _lossless(
            length_km=100.0,
            dispersion_ps_nm_km=0.0,
            raman_gain_db=10.0,
            raman_length_km=80.0,
        )
        out = ssfm_span(sig, fiber)
        assert linear_to_db(out.power / sig.power) == pytest.approx(10.0, abs=0.01)

    def test_raman_profile_in_last_section(self) -> None:
        """Raman gain is zero before the pumped section."""
        fiber = FiberSpec()
        assert fiber.raman_gain_coefficient(100.0) == 0.0
        assert fiber.raman_gain_coefficient(299.0) > fiber.raman_gain_coefficient(230.0)

    @pytest.mark.timeout(60)
    def test_step_halving_converges(self, make_signal) -> None:
        """Halving the step changes the output by less than 5e-4."""
        sig = make_signal(order=11, dac_bandwidth=13e9, launch_dbm=5.0).sig
        coarse = FiberSpec(length_km=50.0, raman_gain_db=0.0, steps_per_km=4.0)
        fine = FiberSpec(length_km=50.0, raman_gain_db=0.0, steps_per_km=8.0)
        a = ssfm_span(sig, coarse)
        b = ssfm_span(sig, fine)
        assert relative_rms(a.ex, b.ex) < 5e-4
        assert relative_rms(a.ey, b.ey) < 5e-4

    def test_step_floor_raises(self, make_signal) -> None:
        """An unreachable nonlinear phase bound raises NumericalConfigError."""
        sig = make_signal(order=6).sig
        with pytest.raises(NumericalConfigError):
            ssfm_span(sig, FiberSpec(length_km=1.0, max_nonlinear_phase=1e-9))
