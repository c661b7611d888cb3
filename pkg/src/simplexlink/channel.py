"""Link impairments: ASE loading, dispersion, polarization, lasers, fiber, filter."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import constants

from .txchain import DualPolWaveform
from .utils import REFERENCE_BANDWIDTH_HZ, db_to_linear, linear_to_db, mean_power

logger = logging.getLogger(__name__)

MANAKOV_FACTOR = 8.0 / 9.0
BPF_ORDER = 2
MIN_STEP_KM = 1e-4


class ChannelError(Exception):
    """Base class for channel errors."""

    pass


class ChannelParameterError(ChannelError):
    """Raised when an impairment parameter is out of range."""

    pass


class ChannelDomainError(ChannelError):
    """Raised when a signal cannot be processed, e.g. it carries no power."""

    pass


class WaveformShapeError(ChannelError):
    """Raised when two waveforms that must match in length or rate do not."""

    pass


class NumericalConfigError(ChannelError):
    """Raised when the split-step integration cannot meet its step constraint."""

    pass


@dataclass
class FiberSpec:
    """Single-span fiber description.

    Attenuation defaults to 63 dB over 300 km. ``raman_gain_db`` is the total
    distributed counter-pumped gain, concentrated in the last
    ``raman_length_km`` with an exponential profile set by the pump attenuation.
    """

    length_km: float = 300.0
    attenuation_db_per_km: float = 0.21
    dispersion_ps_nm_km: float = 16.5
    gamma_per_w_km: float = 1.3
    raman_gain_db: float = 20.0
    raman_length_km: float = 80.0
    pump_attenuation_db_per_km: float = 0.25
    steps_per_km: float = 1.0
    max_nonlinear_phase: float = 0.05

    def __post_init__(self) -> None:
        if not self.length_km > 0:
            raise ChannelParameterError(f"length_km must be > 0, got {self.length_km}")
        if self.attenuation_db_per_km < 0:
            raise ChannelParameterError(
                f"attenuation_db_per_km must be >= 0, got {self.attenuation_db_per_km}"
            )
        if not self.steps_per_km > 0:
            raise ChannelParameterError(f"steps_per_km must be > 0, got {self.steps_per_km}")
        if not self.max_nonlinear_phase > 0:
            raise ChannelParameterError(
                f"max_nonlinear_phase must be > 0, got {self.max_nonlinear_phase}"
            )
        if self.raman_gain_db < 0 or self.raman_length_km < 0:
            raise ChannelParameterError("Raman gain and length must be >= 0")

    @property
    def total_dispersion_ps_nm(self) -> float:
        return self.dispersion_ps_nm_km * self.length_km

    @property
    def loss_db(self) -> float:
        return self.attenuation_db_per_km * self.length_km

    def raman_gain_coefficient(self, z_km: float | np.ndarray) -> float | np.ndarray:
        """Raman power gain coefficient g(z) in 1/km."""
        if self.raman_gain_db == 0 or self.raman_length_km == 0:
            return np.zeros_like(np.asarray(z_km, dtype=float))
        total = self.raman_gain_db * math.log(10.0) / 10.0
        alpha_p = self.pump_attenuation_db_per_km * math.log(10.0) / 10.0
        length = min(self.raman_length_km, self.length_km)
        if alpha_p > 0:
            norm_integral = (1.0 - math.exp(-alpha_p * length)) / alpha_p
        else:
            norm_integral = length
        g0 = total / norm_integral
        distance_to_end = self.length_km - np.asarray(z_km, dtype=float)
        inside = distance_to_end <= length
        return np.where(inside, g0 * np.exp(-alpha_p * distance_to_end), 0.0)


@dataclass
class ImpairmentConfig:
    """Channel impairments applied around the span.

    ``bpf_bandwidth_hz`` accepts None for "off".
    ``jones_angles`` of None draws a random rotation per frame.
    """

    jones_angles: tuple[float, float, float] | None = (0.0, 0.0, 0.0)
    linewidth_total_hz: float = 0.0
    freq_offset_hz: float = 0.0
    bpf_bandwidth_hz: float | None = None
    ppm_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.linewidth_total_hz < 0:
            raise ChannelParameterError(
                f"linewidth_total_hz must be >= 0, got {self.linewidth_total_hz}"
            )
        if self.bpf_bandwidth_hz is not None and not self.bpf_bandwidth_hz > 0:
            raise ChannelParameterError(
                f"bpf_bandwidth_hz must be > 0 when active, got {self.bpf_bandwidth_hz}"
            )
        if self.jones_angles is not None:
            if len(self.jones_angles) != 3:
                raise ChannelParameterError("jones_angles must be (alpha, phi, theta)")
            self.jones_angles = tuple(float(a) for a in self.jones_angles)


def _frequencies(sig: DualPolWaveform) -> np.ndarray:
    return np.fft.fftfreq(len(sig), d=1.0 / sig.sample_rate)


def _dispersion_phase(sig: DualPolWaveform, dispersion_ps_nm: float) -> np.ndarray:
    """Quadratic spectral phase pi * lambda^2 * D * f^2 / c for D in ps/nm."""
    d_s_per_m = dispersion_ps_nm * 1e-3
    f = _frequencies(sig)
    return np.pi * sig.center_wavelength**2 * d_s_per_m / constants.c * f**2


def _filter_both(sig: DualPolWaveform, response: np.ndarray) -> DualPolWaveform:
    ex = np.fft.ifft(np.fft.fft(sig.ex) * response)
    ey = np.fft.ifft(np.fft.fft(sig.ey) * response)
    return sig.with_fields(ex, ey)


def load_awgn_to_osnr(
    sig: DualPolWaveform, osnr_db: float | None, symbol_rate: float, seed: int
) -> DualPolWaveform:
    """Add white Gaussian ASE noise so that the OSNR in 12.5 GHz hits a target.

    The drawn noise is rescaled per polarization so that its realized power is
    exactly half the target noise power, which makes the loading exact and
    polarization-balanced for any record length.

    Args:
        sig: Clean dual-polarization signal.
        osnr_db: Target OSNR in dB, or None to bypass.
        symbol_rate: Symbol rate of the content in Hz.
        seed: Seed for the noise generator.

    Returns:
        Noisy waveform (the input object itself when bypassed).
    """
    if osnr_db is None:
        return sig
    if symbol_rate <= 0 or sig.sample_rate < 2.0 * symbol_rate * (1.0 - 1e-9):
        raise ChannelParameterError(
            f"sample_rate {sig.sample_rate:g} too low for symbol_rate {symbol_rate:g}"
        )
    signal_power = sig.power
    if not signal_power > 0:
        raise ChannelDomainError("Cannot load noise onto a signal with no power")

    noise_power = signal_power * sig.sample_rate / (db_to_linear(osnr_db) * REFERENCE_BANDWIDTH_HZ)
    rng = np.random.default_rng(seed)
    n = len(sig)
    fields = []
    for pol in (sig.ex, sig.ey):
        noise = rng.normal(size=n) + 1j * rng.normal(size=n)
        noise *= math.sqrt(0.5 * noise_power / np.mean(np.abs(noise) ** 2))
        fields.append(pol + noise)

    logger.debug(f"Loaded ASE: OSNR {osnr_db:.2f} dB, noise power {noise_power:.3e} W")
    return sig.with_fields(*fields)


def measure_osnr(sig_plus_noise: DualPolWaveform, clean_ref: DualPolWaveform) -> float:
    """OSNR in dB referred to 12.5 GHz, from a noisy record and its clean source.

    Returns:
        OSNR in dB; ``math.inf`` when the records are identical.
    """
    if len(sig_plus_noise) != len(clean_ref) or not math.isclose(
        sig_plus_noise.sample_rate, clean_ref.sample_rate
    ):
        raise WaveformShapeError(
            f"Records differ: {len(sig_plus_noise)} @ {sig_plus_noise.sample_rate:g} vs "
            f"{len(clean_ref)} @ {clean_ref.sample_rate:g}"
        )
    noise_power = mean_power(sig_plus_noise.ex - clean_ref.ex, sig_plus_noise.ey - clean_ref.ey)
    if noise_power == 0.0:
        return math.inf
    in_reference = noise_power * REFERENCE_BANDWIDTH_HZ / clean_ref.sample_rate
    return linear_to_db(clean_ref.power / in_reference)


def apply_cd(sig: DualPolWaveform, dispersion_total: float) -> DualPolWaveform:
    """All-pass chromatic dispersion of ``dispersion_total`` ps/nm on both polarizations."""
    if dispersion_total == 0:
        return sig
    return _filter_both(sig, np.exp(1j * _dispersion_phase(sig, dispersion_total)))


def jones_matrix(angles: tuple[float, float, float]) -> np.ndarray:
    """Unitary U = Rz(phi) Ry(alpha) Rz(theta) acting on the Jones vector."""
    alpha, phi, theta = angles

    def rz(a: float) -> np.ndarray:
        return np.diag([np.exp(1j * a / 2.0), np.exp(-1j * a / 2.0)])

    ry = np.array(
        [[math.cos(alpha), -math.sin(alpha)], [math.sin(alpha), math.cos(alpha)]],
        dtype=complex,
    )
    return rz(phi) @ ry @ rz(theta)


def apply_jones_matrix(sig: DualPolWaveform, matrix: np.ndarray) -> DualPolWaveform:
    """Multiply every Jones vector (ex, ey) by a 2x2 matrix."""
    matrix = np.asarray(matrix, dtype=complex)
    if matrix.shape != (2, 2):
        raise ChannelParameterError(f"Jones matrix must be 2x2, got {matrix.shape}")
    out = matrix @ np.vstack([sig.ex, sig.ey])
    return sig.with_fields(out[0], out[1])


def apply_jones_rotation(
    sig: DualPolWaveform, angles: tuple[float, float, float]
) -> DualPolWaveform:
    """Apply the polarization rotation U(alpha, phi, theta)."""
    if tuple(angles) == (0.0, 0.0, 0.0):
        return sig
    return apply_jones_matrix(sig, jones_matrix(angles))


def random_jones_angles(rng: np.random.Generator) -> tuple[float, float, float]:
    """Rotation angles uniformly distributed over the Poincare sphere."""
    alpha = 0.5 * math.acos(1.0 - 2.0 * rng.random())
    phi = 2.0 * math.pi * rng.random()
    theta = 2.0 * math.pi * rng.random()
    return alpha, phi, theta


def phase_noise_walk(n: int, linewidth_total: float, sample_rate: float, seed: int) -> np.ndarray:
    """Wiener phase process with increment variance 2*pi*linewidth/sample_rate."""
    if linewidth_total < 0:
        raise ChannelParameterError(f"linewidth must be >= 0, got {linewidth_total}")
    if linewidth_total == 0 or n == 0:
        return np.zeros(n)
    rng = np.random.default_rng(seed)
    step = math.sqrt(2.0 * math.pi * linewidth_total / sample_rate)
    return np.cumsum(rng.normal(0.0, step, size=n))


def apply_phase_noise(
    sig: DualPolWaveform, linewidth_total: float, seed: int
) -> DualPolWaveform:
    """Common laser phase noise on both polarizations (Tx and LO combined)."""
    if linewidth_total == 0:
        return sig
    phi = phase_noise_walk(len(sig), linewidth_total, sig.sample_rate, seed)
    rotor = np.exp(1j * phi)
    return sig.with_fields(sig.ex * rotor, sig.ey * rotor)


def apply_freq_offset(sig: DualPolWaveform, freq_offset: float) -> DualPolWaveform:
    """Carrier frequency offset between transmitter laser and LO.

    Raises:
        ChannelParameterError: If |freq_offset| >= sample_rate / 4.
    """
    if abs(freq_offset) >= sig.sample_rate / 4.0:
        raise ChannelParameterError(
            f"Frequency offset {freq_offset:g} Hz exceeds sample_rate/4 = {sig.sample_rate / 4:g}"
        )
    if freq_offset == 0:
        return sig
    t = np.arange(len(sig)) / sig.sample_rate
    rotor = np.exp(1j * 2.0 * np.pi * freq_offset * t)
    return sig.with_fields(sig.ex * rotor, sig.ey * rotor)


def apply_timing_drift(sig: DualPolWaveform, ppm: float) -> DualPolWaveform:
    """Resample so the content symbol rate differs from nominal by ``ppm``.

    The sample rate metadata is unchanged; the record stretches by (1 + ppm).
    """
    if ppm == 0:
        return sig
    n = len(sig)
    positions = np.arange(int(n / (1.0 + ppm * 1e-6))) * (1.0 + ppm * 1e-6)
    grid = np.arange(n)
    ex = np.interp(positions, grid, sig.ex.real) + 1j * np.interp(positions, grid, sig.ex.imag)
    ey = np.interp(positions, grid, sig.ey.real) + 1j * np.interp(positions, grid, sig.ey.imag)
    return sig.with_fields(ex, ey)


def optical_bpf(sig: DualPolWaveform, bandwidth: float | None) -> DualPolWaveform:
    """Second-order super-Gaussian bandpass with 3-dB full width ``bandwidth``."""
    if bandwidth is None:
        return sig
    if not bandwidth > 0:
        raise ChannelParameterError(f"bandwidth must be > 0, got {bandwidth}")
    return _filter_both(sig, bpf_response(_frequencies(sig), bandwidth))


def bpf_response(freqs: np.ndarray, bandwidth: float) -> np.ndarray:
    """Field transfer function with |H(bandwidth/2)|^2 = 1/2."""
    return np.exp(-0.5 * math.log(2.0) * (2.0 * freqs / bandwidth) ** (2 * BPF_ORDER))


@dataclass
class _SpanState:
    z_km: float = 0.0
    steps: int = 0
    step_sizes: list[float] = field(default_factory=list)


def ssfm_span(sig: DualPolWaveform, fiber: FiberSpec) -> DualPolWaveform:
    """Propagate over one span with the symmetric split-step Fourier method.

    Solves the Manakov equation with loss, distributed Raman gain and
    dispersion. The step is the smaller of 1/steps_per_km and the length that
    keeps the peak nonlinear phase per step below ``max_nonlinear_phase``.

    Raises:
        NumericalConfigError: If the required step drops below 1e-4 km or the
            field becomes non-finite.
    """
    alpha = fiber.attenuation_db_per_km * math.log(10.0) / 10.0
    gamma = MANAKOV_FACTOR * fiber.gamma_per_w_km
    half_dispersion = _dispersion_phase(sig, fiber.dispersion_ps_nm_km)

    spec_x = np.fft.fft(sig.ex)
    spec_y = np.fft.fft(sig.ey)
    state = _SpanState()
    max_step = 1.0 / fiber.steps_per_km

    while state.z_km < fiber.length_km * (1.0 - 1e-12):
        ex = np.fft.ifft(spec_x)
        ey = np.fft.ifft(spec_y)
        peak = float(np.max(np.abs(ex) ** 2 + np.abs(ey) ** 2))
        h = min(max_step, fiber.length_km - state.z_km)
        if gamma > 0 and peak > 0:
            h = min(h, fiber.max_nonlinear_phase / (gamma * peak))
        if h < MIN_STEP_KM:
            raise NumericalConfigError(
                f"Step {h:.2e} km below {MIN_STEP_KM} km at z={state.z_km:.2f} km "
                f"(peak power {peak:.3f} W)"
            )

        gain = 0.5 * (-alpha + fiber.raman_gain_coefficient(state.z_km + 0.5 * h))
        linear_half = np.exp(0.5 * h * (gain + 1j * half_dispersion))

        # half linear, full nonlinear, half linear
        spec_x *= linear_half
        spec_y *= linear_half
        if gamma > 0:
            ex = np.fft.ifft(spec_x)
            ey = np.fft.ifft(spec_y)
            rotor = np.exp(-1j * gamma * (np.abs(ex) ** 2 + np.abs(ey) ** 2) * h)
            spec_x = np.fft.fft(ex * rotor)
            spec_y = np.fft.fft(ey * rotor)
        spec_x *= linear_half
        spec_y *= linear_half

        state.z_km += h
        state.steps += 1
        state.step_sizes.append(h)

        if not (np.all(np.isfinite(spec_x)) and np.all(np.isfinite(spec_y))):
            raise NumericalConfigError(f"Field diverged at z={state.z_km:.2f} km")

    logger.debug(
        f"SSFM: {fiber.length_km} km in {state.steps} steps "
        f"(min step {min(state.step_sizes):.3f} km)"
    )
    return sig.with_fields(np.fft.ifft(spec_x), np.fft.ifft(spec_y))
