"""Blind coherent receiver: CD compensation, clock recovery, butterfly equalizer,
frequency and phase recovery, tributary alignment and decisions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .channel import apply_cd
from .constellation import (
    DPBPSK,
    SIMPLEX3D,
    avg_power,
    codebook_for,
    demap_ml_many,
    simplex_codebook,
)
from .metrics import MetricsError, synchronize
from .txchain import BitStream, DualPolWaveform, differential_decode_lanes

logger = logging.getLogger(__name__)

TIMING_BLOCK_SYMBOLS = 256
TIMING_GRID = np.linspace(-1.0, 1.0, 17)
SINGULARITY_CHECK_SYMBOLS = 256
SINGULARITY_THRESHOLD = 0.9
DIVERGENCE_LIMIT = 1e3
MIN_FO_SYMBOLS = 4096
FO_ZERO_PAD = 16
FO_MIN_PEAK_DB = 6.0
PARITY_THRESHOLD = 0.75
TAIL_GUARD_SYMBOLS = 64
CONVERGED_SPREAD = 0.5
BLIND_ACCEPT_ERROR = 0.4


class RxDspError(Exception):
    """Base class for receiver DSP errors."""

    pass


class RxParameterError(RxDspError):
    """Raised when a DSP parameter or input shape is invalid."""

    pass


class ConvergenceError(RxDspError):
    """Raised when the timing loop finds no stable sampling phase."""

    pass


class EqualizerDivergenceError(RxDspError):
    """Raised when equalizer taps blow up."""

    def __init__(self, message: str, symbols_processed: int):
        super().__init__(message)
        self.symbols_processed = symbols_processed


class FrequencyEstimateError(RxDspError):
    """Raised when the frequency-offset spectrum has no dominant peak."""

    pass


class AlignmentError(RxDspError):
    """Raised when no tributary hypothesis satisfies the simplex parity."""

    pass


class EqualizerMode(str, Enum):
    """Error criterion per butterfly output row."""

    CMA_QPSK = "CmaQpsk"
    BPSK_DD = "BpskDD"
    SIMPLEX_COMBINED = "SimplexCombined"


class DspMode(str, Enum):
    """Blind runs every adaptive stage; Ideal is a genie integrate-and-dump receiver."""

    BLIND = "blind"
    IDEAL = "ideal"


@dataclass
class EqualizerConfig:
    """Butterfly equalizer settings."""

    num_taps: int = 13
    step_size: float = 1e-3
    mode: EqualizerMode = EqualizerMode.SIMPLEX_COMBINED
    cma_radius_sq: float = 2.0
    bpsk_radius_sq: float = 1.0
    kappa: float = 0.5
    convergence_symbols: int = 2048
    pretrain: bool = True

    def __post_init__(self) -> None:
        self.mode = EqualizerMode(self.mode)
        if self.num_taps < 1 or self.num_taps % 2 == 0:
            raise RxParameterError(f"num_taps must be odd and >= 1, got {self.num_taps}")
        if not 0.0 < self.step_size <= 0.1:
            raise RxParameterError(f"step_size must be in (0, 0.1], got {self.step_size}")
        if self.cma_radius_sq <= 0 or self.bpsk_radius_sq <= 0:
            raise RxParameterError("Radii must be > 0")
        if self.kappa < 0:
            raise RxParameterError(f"kappa must be >= 0, got {self.kappa}")
        if self.convergence_symbols < 1:
            raise RxParameterError(
                f"convergence_symbols must be >= 1, got {self.convergence_symbols}"
            )

    @property
    def row_criteria(self) -> tuple[str, str]:
        """Criterion ("cma" or "bpsk") used on the x and y outputs."""
        if self.mode is EqualizerMode.CMA_QPSK:
            return ("cma", "cma")
        if self.mode is EqualizerMode.BPSK_DD:
            return ("bpsk", "bpsk")
        return ("cma", "bpsk")

    @property
    def target_power(self) -> float:
        radii = {"cma": self.cma_radius_sq, "bpsk": self.bpsk_radius_sq}
        return sum(radii[c] for c in self.row_criteria)


@dataclass
class EqualizerState:
    """Butterfly taps after adaptation."""

    hxx: np.ndarray
    hxy: np.ndarray
    hyx: np.ndarray
    hyy: np.ndarray
    symbols_processed: int = 0
    resets: int = 0

    @classmethod
    def center_spike(cls, num_taps: int) -> "EqualizerState":
        hxx = np.zeros(num_taps, dtype=complex)
        hxx[num_taps // 2] = 1.0
        return cls(hxx, np.zeros(num_taps, complex), np.zeros(num_taps, complex), hxx.copy())

    def matrix(self) -> np.ndarray:
        """Taps as a (2, 2 * num_taps) array, rows [hxx hxy] and [hyx hyy]."""
        return np.vstack([np.concatenate([self.hxx, self.hxy]), np.concatenate([self.hyx, self.hyy])])

    @classmethod
    def from_matrix(cls, h: np.ndarray, symbols_processed: int, resets: int) -> "EqualizerState":
        n = h.shape[1] // 2
        return cls(h[0, :n].copy(), h[0, n:].copy(), h[1, :n].copy(), h[1, n:].copy(),
                   symbols_processed, resets)


@dataclass(frozen=True)
class TributaryRotation:
    """Residual rotation hypothesis removed by :func:`tributary_align`."""

    x_quarter_turns: int = 0
    y_sign: int = 1
    swapped: bool = False

    @property
    def name(self) -> str:
        if self.swapped:
            return "swap"
        if self.x_quarter_turns == 0 and self.y_sign == 1:
            return "identity"
        return f"x*{90 * self.x_quarter_turns}deg,y*{'+' if self.y_sign > 0 else '-'}1"


@dataclass
class DspReport:
    """Diagnostics of one receiver run; fields stay None for stages that did not run."""

    mode: DspMode = DspMode.BLIND
    timing_offset_ui: float | None = None
    est_freq_offset: float | None = None
    mean_phase_trajectory: np.ndarray | None = field(default=None, repr=False)
    tributary_rotation: str | None = None
    parity_score: float | None = None
    converged: bool | None = None
    equalizer_resets: int = 0
    equalizer_start: str | None = None
    lock_failure: str | None = None

    def to_dict(self) -> dict:
        phase = self.mean_phase_trajectory
        return {
            "mode": self.mode.value,
            "timing_offset_ui": self.timing_offset_ui,
            "est_freq_offset": self.est_freq_offset,
            "phase_mean": None if phase is None else float(np.mean(phase)),
            "phase_std": None if phase is None else float(np.std(phase)),
            "tributary_rotation": self.tributary_rotation,
            "parity_score": self.parity_score,
            "converged": self.converged,
            "equalizer_resets": self.equalizer_resets,
            "equalizer_start": self.equalizer_start,
            "lock_failure": self.lock_failure,
        }


@dataclass
class ReceiverConfig:
    """Receiver chain settings."""

    mode: DspMode = DspMode.BLIND
    equalizer: EqualizerConfig = field(default_factory=EqualizerConfig)
    cd_compensation_ps_nm: float | None = None
    estimate_frequency: bool = True
    cpe_window: int = 33
    timing_block_symbols: int = TIMING_BLOCK_SYMBOLS

    def __post_init__(self) -> None:
        self.mode = DspMode(self.mode)
        if self.cpe_window < 5 or self.cpe_window % 2 == 0:
            raise RxParameterError(f"cpe_window must be odd and >= 5, got {self.cpe_window}")
        if self.timing_block_symbols < 16:
            raise RxParameterError(
                f"timing_block_symbols must be >= 16, got {self.timing_block_symbols}"
            )


@dataclass
class ReceiveResult:
    """Decoded bits plus the symbols they were decided from."""

    bits: BitStream
    x_symbols: np.ndarray
    y_symbols: np.ndarray
    report: DspReport
    stages: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)


def cd_compensate(sig: DualPolWaveform, dispersion_total: float) -> DualPolWaveform:
    """Undo ``dispersion_total`` ps/nm of chromatic dispersion."""
    return apply_cd(sig, -dispersion_total)


def _lagrange_interpolate(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Cubic Lagrange interpolation of a cyclic sequence at fractional positions."""
    base = np.floor(positions).astype(np.int64)
    mu = positions - base
    weights = np.stack(
        [
            -mu * (mu - 1.0) * (mu - 2.0) / 6.0,
            (mu + 1.0) * (mu - 1.0) * (mu - 2.0) / 2.0,
            -(mu + 1.0) * mu * (mu - 2.0) / 2.0,
            (mu + 1.0) * mu * (mu - 1.0) / 6.0,
        ],
        axis=1,
    )
    idx = (base[:, None] + np.arange(-1, 3)[None, :]) % x.size
    return np.sum(x[idx] * weights, axis=1)


def _to_two_sps(sig: DualPolWaveform) -> tuple[np.ndarray, np.ndarray]:
    if math.isclose(sig.samples_per_symbol, 2.0):
        return sig.ex.copy(), sig.ey.copy()
    n_out = int(round(len(sig) * 2.0 * sig.symbol_rate / sig.sample_rate))
    n_out -= n_out % 2
    return signal.resample(sig.ex, n_out), signal.resample(sig.ey, n_out)


def _gardner_error(ex: np.ndarray, ey: np.ndarray, symbols: np.ndarray, delay: float) -> float:
    """Mean Gardner detector output over ``symbols`` when sampling ``delay`` samples late."""
    strobe = 2.0 * symbols + delay
    total = 0.0
    for pol in (ex, ey):
        current = _lagrange_interpolate(pol, strobe)
        middle = _lagrange_interpolate(pol, strobe + 1.0)
        following = _lagrange_interpolate(pol, strobe + 2.0)
        total += float(np.mean(np.real(middle * np.conj(following - current))))
    return total


def _solve_block(
    ex: np.ndarray, ey: np.ndarray, symbols: np.ndarray, start: float | None
) -> float:
    """Sampling delay (in samples) nulling the Gardner error with positive slope."""
    delta = 0.05
    anchor = 0.0 if start is None else start

    def slope_at(d: float) -> float:
        return (_gardner_error(ex, ey, symbols, d + delta) - _gardner_error(ex, ey, symbols, d - delta)) / (2 * delta)

    d = start
    if d is not None:
        for _ in range(4):
            err = _gardner_error(ex, ey, symbols, d)
            slope = slope_at(d)
            if slope <= 0:
                d = None
                break
            d += float(np.clip(-err / slope, -0.5, 0.5))
        if d is not None and abs(d - anchor) < 0.5:
            return d

    grid = anchor + TIMING_GRID
    values = np.array([_gardner_error(ex, ey, symbols, g) for g in grid])
    crossings = np.nonzero((values[:-1] <= 0.0) & (values[1:] > 0.0))[0]
    if crossings.size == 0:
        raise ConvergenceError("Timing error detector has no stable zero crossing")
    roots = grid[crossings] - values[crossings] * (grid[crossings + 1] - grid[crossings]) / (
        values[crossings + 1] - values[crossings]
    )
    d = float(roots[np.argmin(np.abs(roots - anchor))])
    for _ in range(3):
        slope = slope_at(d)
        if slope <= 0:
            raise ConvergenceError(f"Timing detector slope {slope:.3g} not positive at {d:.3f}")
        d += float(np.clip(-_gardner_error(ex, ey, symbols, d) / slope, -0.5, 0.5))
    return d


def _timing_delays(
    ex: np.ndarray, ey: np.ndarray, block_symbols: int
) -> np.ndarray:
    """Per-symbol sampling delay in samples at 2 samples per symbol."""
    n_symbols = ex.size // 2
    if n_symbols < 2:
        raise RxParameterError("Need at least 2 symbols for timing recovery")
    power = np.mean(np.abs(ex) ** 2 + np.abs(ey) ** 2)
    if not power > 0:
        raise RxParameterError("Cannot recover timing of a signal with no power")
    scale = 1.0 / math.sqrt(power)
    ex, ey = ex * scale, ey * scale

    starts = range(0, n_symbols, block_symbols)
    centres = []
    delays = []
    previous = None
    for start in starts:
        symbols = np.arange(start, min(start + block_symbols, n_symbols), dtype=float)
        previous = _solve_block(ex, ey, symbols, previous)
        centres.append(symbols.mean())
        delays.append(previous)

    return np.interp(np.arange(n_symbols), centres, delays)


def estimate_timing(sig: DualPolWaveform, block_symbols: int = TIMING_BLOCK_SYMBOLS) -> np.ndarray:
    """Per-symbol timing offset in UI (positive when symbol centres arrive late).

    Raises:
        ConvergenceError: If a block has no stable Gardner zero crossing.
    """
    ex, ey = _to_two_sps(sig)
    return _timing_delays(ex, ey, block_symbols) / 2.0


def clock_recover(
    sig: DualPolWaveform,
    symbol_rate: float | None = None,
    block_symbols: int = TIMING_BLOCK_SYMBOLS,
) -> DualPolWaveform:
    """Resample to 2 samples/symbol with symbol centres on even samples.

    A feedforward Gardner detector estimates the sampling phase block by block;
    the phase is interpolated per symbol and applied to both polarizations with
    cubic Lagrange interpolation.
    """
    recovered, _ = _clock_recover(sig, symbol_rate, block_symbols)
    return recovered


def _clock_recover(
    sig: DualPolWaveform, symbol_rate: float | None, block_symbols: int
) -> tuple[DualPolWaveform, np.ndarray]:
    if symbol_rate is not None and not math.isclose(symbol_rate, sig.symbol_rate):
        sig = sig.with_fields(sig.ex, sig.ey, symbol_rate=symbol_rate)
    ex, ey = _to_two_sps(sig)
    delays = _timing_delays(ex, ey, block_symbols)

    positions = np.empty(2 * delays.size)
    positions[0::2] = 2.0 * np.arange(delays.size) + delays
    positions[1::2] = positions[0::2] + 1.0
    out_x = _lagrange_interpolate(ex, positions)
    out_y = _lagrange_interpolate(ey, positions)

    logger.debug(
        f"Clock recovery: mean offset {np.mean(delays) / 2:.3f} UI, "
        f"drift {(delays[-1] - delays[0]) / 2:.3f} UI"
    )
    return sig.with_fields(out_x, out_y, sample_rate=2.0 * sig.symbol_rate), delays / 2.0


def _row_error(criterion: str, out: complex, previous: complex, psi_rotor: complex,
               cfg: EqualizerConfig) -> complex:
    modulus = out.real * out.real + out.imag * out.imag
    if criterion == "cma":
        return (cfg.cma_radius_sq - modulus) * out
    collinear = -1j * (out * np.conj(previous) * np.conj(psi_rotor)).imag * previous * psi_rotor
    return (cfg.bpsk_radius_sq - modulus) * out + cfg.kappa * collinear


def _row_correlation(h: np.ndarray) -> float:
    norms = np.linalg.norm(h[0]) * np.linalg.norm(h[1])
    if norms == 0:
        return 1.0
    return float(abs(np.vdot(h[0], h[1])) / norms)


def _reinitialize(h: np.ndarray, cfg: EqualizerConfig) -> None:
    n = cfg.num_taps
    if cfg.mode is EqualizerMode.SIMPLEX_COMBINED:
        h[0, :n] = np.conj(h[1, n:][::-1])
        h[0, n:] = -np.conj(h[1, :n][::-1])
    else:
        h[1, n:] = np.conj(h[0, :n][::-1])
        h[1, :n] = -np.conj(h[0, n:][::-1])


def _equalize_pass(
    h: np.ndarray, windows: np.ndarray, count: int, cfg: EqualizerConfig, state: dict
) -> np.ndarray:
    criteria = cfg.row_criteria
    mu = cfg.step_size
    out = np.empty((count, 2), dtype=complex)
    previous = np.zeros(2, dtype=complex)
    average = np.ones(2, dtype=complex)

    for k in range(count):
        u = windows[k]
        y = h @ u
        errors = np.empty(2, dtype=complex)
        for row in range(2):
            if criteria[row] == "bpsk":
                z = y[row] * np.conj(previous[row])
                average[row] = 0.99 * average[row] + 0.01 * z * z
                rotor = np.exp(0.5j * np.angle(average[row]))
                errors[row] = _row_error("bpsk", y[row], previous[row], rotor, cfg)
            else:
                errors[row] = _row_error("cma", y[row], previous[row], 1.0, cfg)
        h += mu * np.outer(errors, np.conj(u))
        previous = y
        out[k] = y
        state["symbols"] += 1

        if (k + 1) % SINGULARITY_CHECK_SYMBOLS == 0:
            if not np.all(np.isfinite(h)) or np.max(np.abs(h)) > DIVERGENCE_LIMIT:
                raise EqualizerDivergenceError(
                    f"Equalizer diverged after {state['symbols']} symbols", state["symbols"]
                )
            if _row_correlation(h) > SINGULARITY_THRESHOLD:
                _reinitialize(h, cfg)
                state["resets"] += 1
                logger.warning(
                    f"Equalizer outputs converged to one source; re-initialized "
                    f"(symbol {state['symbols']})"
                )

    if not np.all(np.isfinite(h)) or np.max(np.abs(h)) > DIVERGENCE_LIMIT:
        raise EqualizerDivergenceError(
            f"Equalizer diverged after {state['symbols']} symbols", state["symbols"]
        )
    return out


def stokes_vectors(ex: np.ndarray, ey: np.ndarray) -> np.ndarray:
    """Stokes components (S1, S2, S3) of each Jones sample, shape (3, n)."""
    cross = np.conj(ex) * ey
    return np.vstack([np.abs(ex) ** 2 - np.abs(ey) ** 2, 2.0 * cross.real, 2.0 * cross.imag])


def _unitary_to_s1(axis: np.ndarray) -> np.ndarray:
    """Jones matrix whose Poincare sphere rotation takes unit vector ``axis`` onto +S1."""
    theta = math.acos(float(np.clip(axis[0], -1.0, 1.0)))
    psi = math.atan2(float(axis[2]), float(axis[1]))
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array(
        [[c, s * np.exp(-1j * psi)], [-s * np.exp(1j * psi), c]],
        dtype=complex,
    )


def stokes_demux_matrix(x_symbols: np.ndarray, y_symbols: np.ndarray, fmt: str) -> np.ndarray:
    """Blind 2x2 polarization demultiplexer estimated in Stokes space.

    Common carrier phase cancels in the Stokes vector, so the estimate is
    unaffected by frequency offset and laser phase noise. Simplex carries
    twice the power on x, which puts the mean Stokes vector on the rotated
    S1 axis. DP-BPSK symbols sit on the rotated +-S2 axis; the principal
    axis of their Stokes cloud fixes it, and the remaining rotation about
    that axis comes from the fourth-order term p_k^2 conj(m_{k+1})^2 of the
    two projections.

    Args:
        x_symbols: Received x samples at one sample per symbol.
        y_symbols: Received y samples at one sample per symbol.
        fmt: Format identifier.

    Returns:
        Unitary W such that W @ (x, y) recovers the transmitted tributaries
        up to per-tributary phase (and a swap for DP-BPSK).
    """
    x = np.asarray(x_symbols, dtype=complex)
    y = np.asarray(y_symbols, dtype=complex)
    stokes = stokes_vectors(x, y)
    scale = float(np.mean(np.abs(x) ** 2 + np.abs(y) ** 2))
    if not scale > 0:
        raise RxParameterError("Cannot demultiplex a signal with no power")

    if fmt == SIMPLEX3D:
        mean = np.mean(stokes, axis=1)
        norm = float(np.linalg.norm(mean))
        if norm < 0.05 * scale:
            logger.warning(f"Mean Stokes vector too short ({norm / scale:.3f}), using identity")
            return np.eye(2, dtype=complex)
        return _unitary_to_s1(mean / norm)

    if fmt == DPBPSK:
        _, vectors = np.linalg.eigh(stokes @ stokes.T / stokes.shape[1])
        to_s1 = _unitary_to_s1(vectors[:, -1])
        p, m = to_s1 @ np.vstack([x, y])
        z = np.sum(p[:-1] ** 2 * np.conj(m[1:] ** 2) + p[1:] ** 2 * np.conj(m[:-1] ** 2))
        beta = float(np.angle(z)) / 4.0 if abs(z) > 0 else 0.0
        # +S1 -> +S2 rotation after removing the residual angle
        to_s2 = np.array([[1.0, -1.0], [1.0, 1.0]], dtype=complex) / math.sqrt(2.0)
        return to_s2 @ np.diag([np.exp(-1j * beta), np.exp(1j * beta)]) @ to_s1

    raise RxParameterError(f"Unknown format '{fmt}'")


def butterfly_equalize(
    sig: DualPolWaveform, cfg: EqualizerConfig, initial: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, EqualizerState]:
    """T/2-spaced 2x2 butterfly FIR adapted blindly per output row.

    Output x_k = hxx.u_x + hxy.u_y and y_k = hyx.u_x + hyy.u_y over the window
    centred on sample 2k. Taps move by h += mu * e * conj(u). ``initial`` (a 2x2
    Jones matrix, see :func:`stokes_demux_matrix`) seeds the centre taps; None
    starts from the centre spike.

    Returns:
        Tuple of (x symbols, y symbols, final equalizer state).

    Raises:
        RxParameterError: If the signal is not at 2 sps or is too short.
        EqualizerDivergenceError: If any tap exceeds 1e3 in magnitude.
    """
    if not math.isclose(sig.samples_per_symbol, 2.0):
        raise RxParameterError(f"Equalizer needs 2 samples/symbol, got {sig.samples_per_symbol:g}")
    n_symbols = len(sig) // 2
    if n_symbols < cfg.convergence_symbols:
        raise RxParameterError(
            f"Signal has {n_symbols} symbols, equalizer needs >= {cfg.convergence_symbols}"
        )

    power = sig.power
    if not power > 0:
        raise RxParameterError("Cannot equalize a signal with no power")
    scale = math.sqrt(cfg.target_power / power)
    half = cfg.num_taps // 2
    padded = []
    for pol in (sig.ex[: 2 * n_symbols] * scale, sig.ey[: 2 * n_symbols] * scale):
        padded.append(np.concatenate([pol[len(pol) - half:] if half else pol[:0], pol, pol[:half]]))
    wx = sliding_window_view(padded[0], cfg.num_taps)[::2][:n_symbols]
    wy = sliding_window_view(padded[1], cfg.num_taps)[::2][:n_symbols]
    windows = np.concatenate([wx, wy], axis=1)

    h = EqualizerState.center_spike(cfg.num_taps).matrix()
    if initial is not None:
        initial = np.asarray(initial, dtype=complex)
        if initial.shape != (2, 2):
            raise RxParameterError(f"initial must be a 2x2 matrix, got {initial.shape}")
        centre = cfg.num_taps // 2
        h[:, centre] = initial[:, 0]
        h[:, cfg.num_taps + centre] = initial[:, 1]
    counters = {"symbols": 0, "resets": 0}
    if cfg.pretrain:
        _equalize_pass(h, windows, cfg.convergence_symbols, cfg, counters)
    out = _equalize_pass(h, windows, n_symbols, cfg, counters)

    state = EqualizerState.from_matrix(h, counters["symbols"], counters["resets"])
    return out[:, 0].copy(), out[:, 1].copy(), state


def equalizer_converged(x_symbols: np.ndarray, y_symbols: np.ndarray) -> bool:
    """True when the output modulus spread over the last quarter is small."""
    tail = max(len(x_symbols) // 4, 1)
    spreads = []
    for out in (x_symbols[-tail:], y_symbols[-tail:]):
        modulus = np.abs(out) ** 2
        spreads.append(np.std(modulus) / max(np.mean(modulus), 1e-30))
    return bool(max(spreads) < CONVERGED_SPREAD)


def estimate_freq_offset(x_symbols: np.ndarray, symbol_rate: float, power: int = 4) -> float:
    """Carrier frequency offset from the spectral line of ``x ** power``.

    Args:
        x_symbols: One tributary at one sample per symbol, >= 4096 symbols.
        symbol_rate: Symbol rate in Hz.
        power: 4 for QPSK, 2 for BPSK tributaries.

    Returns:
        Offset in Hz within +-symbol_rate / (2 * power).

    Raises:
        FrequencyEstimateError: If the record is short or the peak is not
            at least 6 dB above the spectral median.
    """
    x = np.asarray(x_symbols, dtype=complex)
    if x.size < MIN_FO_SYMBOLS:
        raise FrequencyEstimateError(f"Need >= {MIN_FO_SYMBOLS} symbols, got {x.size}")
    nfft = FO_ZERO_PAD * (1 << int(math.ceil(math.log2(x.size))))
    spectrum = np.abs(np.fft.fft(x**power, nfft))
    peak = int(np.argmax(spectrum))
    if not spectrum[peak] > 0:
        raise FrequencyEstimateError("Tributary carries no signal")
    peak_db = 20.0 * math.log10(spectrum[peak] / max(np.median(spectrum), 1e-300))
    if peak_db < FO_MIN_PEAK_DB:
        raise FrequencyEstimateError(f"Spectral peak only {peak_db:.1f} dB above median")

    left, centre, right = spectrum[peak - 1], spectrum[peak], spectrum[(peak + 1) % nfft]
    denom = left - 2.0 * centre + right
    shift = 0.5 * (left - right) / denom if denom != 0 else 0.0
    freqs = np.fft.fftfreq(nfft, d=1.0 / symbol_rate)
    f_peak = freqs[peak] + shift * symbol_rate / nfft
    return float(f_peak / power)


def compensate_freq_offset(
    x_symbols: np.ndarray, y_symbols: np.ndarray, freq_offset: float, symbol_rate: float
) -> tuple[np.ndarray, np.ndarray]:
    """Remove a frequency offset from both tributaries."""
    rotor = np.exp(-2j * np.pi * freq_offset * np.arange(len(x_symbols)) / symbol_rate)
    return x_symbols * rotor, y_symbols * rotor[: len(y_symbols)]


def _vv_phase(symbols: np.ndarray, power: int, window: int | None) -> np.ndarray:
    raised = symbols**power
    if power == 4:
        raised = -raised
    if window is None or window >= len(symbols):
        return np.full(len(symbols), np.angle(np.mean(raised)) / power)
    averaged = np.convolve(raised, np.ones(window) / window, mode="same")
    return np.unwrap(np.angle(averaged)) / power


def carrier_phase_estimate(
    x_symbols: np.ndarray,
    y_symbols: np.ndarray,
    window: int | None = 33,
    x_power: int = 4,
    y_power: int = 2,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Viterbi-Viterbi phase recovery on each tributary.

    ``window`` None estimates a single phase over the whole record.

    Returns:
        Tuple of (derotated x, derotated y, x phase trajectory in rad).
    """
    if window is not None and (window < 5 or window % 2 == 0):
        raise RxParameterError(f"window must be odd and >= 5, got {window}")
    x = np.asarray(x_symbols, dtype=complex)
    y = np.asarray(y_symbols, dtype=complex)
    theta_x = _vv_phase(x, x_power, window)
    theta_y = _vv_phase(y, y_power, window)
    return x * np.exp(-1j * theta_x), y * np.exp(-1j * theta_y), theta_x


def simplex_parity(x_symbols: np.ndarray, y_symbols: np.ndarray) -> float:
    """Fraction of symbols with sign(Re y) == -sign(Re x) * sign(Im x)."""
    x_sign = np.sign(x_symbols.real) * np.sign(x_symbols.imag)
    return float(np.mean(np.sign(y_symbols.real) == -x_sign))


def _hypotheses(fmt: str) -> list[TributaryRotation]:
    if fmt == SIMPLEX3D:
        return [TributaryRotation(q, s) for q in range(4) for s in (1, -1)]
    return [TributaryRotation(), TributaryRotation(swapped=True)]


def _apply_hypothesis(
    x: np.ndarray, y: np.ndarray, hypothesis: TributaryRotation
) -> tuple[np.ndarray, np.ndarray]:
    if hypothesis.swapped:
        x, y = y, x
    return x * (1j**hypothesis.x_quarter_turns), y * hypothesis.y_sign


def _reference_score(bits: BitStream, reference_bits: BitStream) -> float:
    try:
        sync = synchronize(reference_bits, bits, min_agreement=0.0)
    except MetricsError:
        return 0.0
    return sync.agreement if sync.polarity > 0 else 1.0 - sync.agreement


def tributary_align(
    x_symbols: np.ndarray,
    y_symbols: np.ndarray,
    reference_bits: BitStream | None = None,
    fmt: str = SIMPLEX3D,
) -> tuple[np.ndarray, np.ndarray, TributaryRotation, float]:
    """Remove the residual rotation left by per-tributary phase recovery.

    Simplex candidates are scored by the codebook parity; the four hypotheses
    that map the codebook onto itself tie, and ``reference_bits`` (when given)
    picks the one whose decisions agree with the reference at polarity +1.
    DP-BPSK candidates are identity and polarization swap, resolved only by
    reference bits.

    Returns:
        Tuple of (aligned x, aligned y, chosen hypothesis, parity score).

    Raises:
        AlignmentError: If the best simplex parity score is below 0.75.
    """
    x = np.asarray(x_symbols, dtype=complex)
    y = np.asarray(y_symbols, dtype=complex)
    candidates = _hypotheses(fmt)

    if fmt == SIMPLEX3D:
        scores = [simplex_parity(*_apply_hypothesis(x, y, h)) for h in candidates]
        best = max(scores)
        if best < PARITY_THRESHOLD:
            raise AlignmentError(f"Best parity score {best:.3f} below {PARITY_THRESHOLD}")
        tied = [h for h, s in zip(candidates, scores) if s == best]
    else:
        best = 1.0
        tied = candidates

    chosen = tied[0]
    if reference_bits is not None and len(tied) > 1:
        agreements = [
            _reference_score(decide_and_decode(*_apply_hypothesis(x, y, h), fmt), reference_bits)
            for h in tied
        ]
        chosen = tied[int(np.argmax(agreements))]

    ax, ay = _apply_hypothesis(x, y, chosen)
    return ax, ay, chosen, best


def decide_and_decode(x_symbols: np.ndarray, y_symbols: np.ndarray, fmt: str) -> BitStream:
    """Hard decisions on aligned tributaries.

    Simplex symbols are demapped jointly in (Re x, Im x, Re y); DP-BPSK signs
    are differentially decoded per polarization.
    """
    x = np.asarray(x_symbols, dtype=complex)
    y = np.asarray(y_symbols, dtype=complex)
    if x.shape != y.shape:
        raise RxParameterError(f"Tributary lengths differ: {x.shape} vs {y.shape}")
    if fmt == SIMPLEX3D:
        received = np.column_stack([x.real, x.imag, y.real, np.zeros(x.size)])
        bits, _ = demap_ml_many(simplex_codebook(), received)
        return BitStream(bits)
    if fmt == DPBPSK:
        encoded = np.column_stack([x.real > 0, y.real > 0]).astype(np.uint8).ravel()
        return differential_decode_lanes(encoded, lanes=2)
    raise RxParameterError(f"Unknown format '{fmt}'")


def ideal_sample(sig: DualPolWaveform) -> tuple[np.ndarray, np.ndarray]:
    """Integrate-and-dump over each symbol period at the known timing."""
    sps = sig.samples_per_symbol
    if not math.isclose(sps, round(sps)):
        raise RxParameterError(f"Ideal sampling needs integer samples/symbol, got {sps:g}")
    sps = int(round(sps))
    n = len(sig) // sps
    out = []
    for pol in (sig.ex, sig.ey):
        centred = np.roll(pol, sps // 2)[: n * sps]
        out.append(centred.reshape(n, sps).mean(axis=1))
    return out[0], out[1]


def _normalize(x: np.ndarray, y: np.ndarray, fmt: str) -> tuple[np.ndarray, np.ndarray]:
    """Scale tributaries to the codebook mean symbol energy."""
    power = np.mean(np.abs(x) ** 2 + np.abs(y) ** 2)
    if not power > 0:
        raise RxParameterError("Received symbols carry no power")
    scale = math.sqrt(avg_power(codebook_for(fmt)) / power)
    return x * scale, y * scale


def decision_error(x_symbols: np.ndarray, y_symbols: np.ndarray, fmt: str) -> float:
    """Mean squared distance to the nearest codebook point, relative to P_avg."""
    x = np.asarray(x_symbols, dtype=complex)
    y = np.asarray(y_symbols, dtype=complex)
    if x.size == 0:
        return math.inf
    cb = codebook_for(fmt)
    received = np.column_stack([x.real, x.imag, y.real, y.imag])
    _, indices = demap_ml_many(cb, received)
    residual = np.sum((received - cb.points[indices]) ** 2, axis=1)
    return float(np.mean(residual) / avg_power(cb))


@dataclass
class _BlindCandidate:
    name: str
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    state: EqualizerState
    converged: bool
    freq_offset: float | None
    hypothesis: TributaryRotation
    score: float
    error: float
    stages: dict[str, tuple[np.ndarray, np.ndarray]]


def _blind_candidate(
    name: str,
    resampled: DualPolWaveform,
    fmt: str,
    cfg: ReceiverConfig,
    eq_cfg: EqualizerConfig,
    initial: np.ndarray | None,
    reference_bits: BitStream | None,
    keep_stages: bool,
) -> _BlindCandidate:
    x_power = 4 if fmt == SIMPLEX3D else 2
    stages: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    x, y, state = butterfly_equalize(resampled, eq_cfg, initial)
    converged = equalizer_converged(x, y)
    if keep_stages:
        stages["equalizer"] = (x, y)

    stop = len(x) - TAIL_GUARD_SYMBOLS
    x = x[eq_cfg.convergence_symbols:stop]
    y = y[eq_cfg.convergence_symbols:stop]

    offset = None
    if cfg.estimate_frequency:
        offset = estimate_freq_offset(x, resampled.symbol_rate, power=x_power)
        x, y = compensate_freq_offset(x, y, offset, resampled.symbol_rate)
    x, y = _normalize(x, y, fmt)
    x, y, theta = carrier_phase_estimate(x, y, window=cfg.cpe_window, x_power=x_power)
    if keep_stages:
        stages["phase"] = (x, y)

    x, y, hypothesis, score = tributary_align(x, y, reference_bits, fmt)
    error = decision_error(x, y, fmt)
    logger.debug(f"Equalizer start '{name}': decision error {error:.3f}, parity {score:.3f}")
    return _BlindCandidate(
        name, x, y, theta, state, converged, offset, hypothesis, score, error, stages
    )


def _blind_receive(
    sig: DualPolWaveform,
    fmt: str,
    cfg: ReceiverConfig,
    reference_bits: BitStream | None,
    keep_stages: bool,
    report: DspReport,
) -> _BlindCandidate:
    """Equalize from the Stokes-space estimate, falling back to the centre spike.

    The first start whose decision error is at most ``BLIND_ACCEPT_ERROR`` is
    kept; otherwise the start with the lowest error wins.

    Raises:
        AlignmentError: If no start passes the simplex parity check.
    """
    eq_cfg = cfg.equalizer
    if fmt == DPBPSK and eq_cfg.mode is EqualizerMode.SIMPLEX_COMBINED:
        eq_cfg = replace(eq_cfg, mode=EqualizerMode.BPSK_DD)

    resampled, timing = _clock_recover(sig, None, cfg.timing_block_symbols)
    report.timing_offset_ui = float(np.mean(timing))
    starts: list[tuple[str, np.ndarray | None]] = [
        ("stokes", stokes_demux_matrix(resampled.ex[::2], resampled.ey[::2], fmt)),
        ("center_spike", None),
    ]

    best: _BlindCandidate | None = None
    failure: AlignmentError | None = None
    for name, initial in starts:
        try:
            candidate = _blind_candidate(
                name, resampled, fmt, cfg, eq_cfg, initial, reference_bits, keep_stages
            )
        except AlignmentError as e:
            logger.warning(f"Equalizer start '{name}' failed alignment: {e}")
            failure = e
            continue
        if best is None or candidate.error < best.error:
            best = candidate
        if candidate.error <= BLIND_ACCEPT_ERROR:
            break
    if best is None:
        raise failure

    if keep_stages:
        best.stages = {
            "clock": (resampled.ex[::2].copy(), resampled.ey[::2].copy()),
            **best.stages,
        }
    return best


def receive(
    sig: DualPolWaveform,
    fmt: str,
    cfg: ReceiverConfig,
    reference_bits: BitStream | None = None,
    keep_stages: bool = False,
) -> ReceiveResult:
    """Run the receiver chain and return decoded bits.

    Blind mode: CD compensation, clock recovery, butterfly equalizer, then the
    first ``convergence_symbols`` and a short tail are dropped before frequency
    and phase recovery, alignment and decisions. The equalizer starts from the
    Stokes-space demultiplexer and retries from the centre spike when that
    start leaves a large decision error. Ideal mode integrates over each
    symbol at the known timing and only estimates one constant phase.
    """
    report = DspReport(mode=cfg.mode)
    stages: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    x_power = 4 if fmt == SIMPLEX3D else 2

    sig = cd_compensate(sig, cfg.cd_compensation_ps_nm or 0.0)

    if cfg.mode is DspMode.IDEAL:
        x, y = ideal_sample(sig)
        x, y = _normalize(x, y, fmt)
        if keep_stages:
            stages["sampled"] = (x, y)
        x, y, theta = carrier_phase_estimate(x, y, window=None, x_power=x_power)
        if keep_stages:
            stages["phase"] = (x, y)
        x, y, hypothesis, score = tributary_align(x, y, reference_bits, fmt)
    else:
        chosen = _blind_receive(sig, fmt, cfg, reference_bits, keep_stages, report)
        x, y, theta = chosen.x, chosen.y, chosen.theta
        hypothesis, score = chosen.hypothesis, chosen.score
        report.converged = chosen.converged
        report.equalizer_resets = chosen.state.resets
        report.equalizer_start = chosen.name
        report.est_freq_offset = chosen.freq_offset
        stages.update(chosen.stages)

    report.mean_phase_trajectory = theta
    report.tributary_rotation = hypothesis.name
    report.parity_score = score if fmt == SIMPLEX3D else None
    if keep_stages:
        stages["aligned"] = (x, y)

    bits = decide_and_decode(x, y, fmt)
    if fmt == DPBPSK:
        # first decision has no known predecessor
        bits = BitStream(bits.bits[2:])
        x, y = x[1:], y[1:]
    logger.debug(
        f"Receive {fmt} ({cfg.mode.value}): {len(x)} symbols, rotation {hypothesis.name}"
    )
    return ReceiveResult(bits, x, y, report, stages)
