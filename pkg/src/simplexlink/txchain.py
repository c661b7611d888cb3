"""Transmitter: bit sources, differential coding, DAC drive and DP-IQ modulator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import signal

from .utils import dbm_to_watt

logger = logging.getLogger(__name__)

DEFAULT_WAVELENGTH_M = 1550e-9
DAC_FILTER_ORDER = 5

# Fibonacci LFSR taps (besides the MSB) for the ITU-T polynomials x^n + x^t + 1
PRBS_TAPS = {7: 6, 9: 5, 11: 9, 15: 14, 23: 18}


class TxChainError(Exception):
    """Base class for transmitter errors."""

    pass


class TxParameterError(TxChainError):
    """Raised when a transmitter parameter is out of range."""

    pass


class BitOrigin(str, Enum):
    """Where a bit stream came from."""

    DE_BRUIJN = "de_bruijn"
    PRBS = "prbs"
    EXPLICIT = "explicit"


@dataclass(frozen=True, eq=False)
class BitStream:
    """An immutable 0/1 sequence tagged with its origin."""

    bits: np.ndarray
    origin: BitOrigin = BitOrigin.EXPLICIT
    order: int | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        bits = np.array(self.bits, dtype=np.uint8).ravel()
        if bits.size and bits.max() > 1:
            raise TxParameterError("Bit streams may only contain 0 and 1")
        if self.origin is not BitOrigin.EXPLICIT and bits.size == 0:
            raise TxParameterError(f"{self.origin.value} bit stream must be nonempty")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return int(self.bits.size)


@dataclass(frozen=True, eq=False)
class DriveWaveform:
    """Four drive lanes (ix, qx, iy, qy) sampled at ``samples_per_symbol``."""

    lanes: np.ndarray
    samples_per_symbol: int
    symbol_rate: float

    def __post_init__(self) -> None:
        lanes = np.array(self.lanes, dtype=float)
        if lanes.ndim != 2 or lanes.shape[0] != 4:
            raise TxParameterError(f"Drive lanes must be (4, n), got {lanes.shape}")
        if self.samples_per_symbol < 2:
            raise TxParameterError(
                f"samples_per_symbol must be >= 2, got {self.samples_per_symbol}"
            )
        lanes.setflags(write=False)
        object.__setattr__(self, "lanes", lanes)

    @property
    def sample_rate(self) -> float:
        return self.samples_per_symbol * self.symbol_rate

    @property
    def n_symbols(self) -> int:
        return self.lanes.shape[1] // self.samples_per_symbol


@dataclass(frozen=True, eq=False)
class DualPolWaveform:
    """Sampled dual-polarization complex field envelope in sqrt(W)."""

    ex: np.ndarray
    ey: np.ndarray
    sample_rate: float
    symbol_rate: float
    center_wavelength: float = DEFAULT_WAVELENGTH_M

    def __post_init__(self) -> None:
        ex = np.array(self.ex, dtype=complex).ravel()
        ey = np.array(self.ey, dtype=complex).ravel()
        if ex.shape != ey.shape:
            raise TxParameterError(
                f"Polarization lengths differ: {ex.size} vs {ey.size}"
            )
        if self.sample_rate < 2.0 * self.symbol_rate * (1.0 - 1e-9):
            raise TxParameterError(
                f"sample_rate {self.sample_rate:g} < 2 x symbol_rate {self.symbol_rate:g}"
            )
        ex.setflags(write=False)
        ey.setflags(write=False)
        object.__setattr__(self, "ex", ex)
        object.__setattr__(self, "ey", ey)

    def __len__(self) -> int:
        return int(self.ex.size)

    @property
    def samples_per_symbol(self) -> float:
        return self.sample_rate / self.symbol_rate

    @property
    def power(self) -> float:
        """Mean total power over both polarizations."""
        return float(np.mean(np.abs(self.ex) ** 2 + np.abs(self.ey) ** 2))

    def with_fields(self, ex: np.ndarray, ey: np.ndarray, **changes: float) -> "DualPolWaveform":
        """Copy with new field samples and optionally changed metadata."""
        return DualPolWaveform(
            ex,
            ey,
            sample_rate=changes.get("sample_rate", self.sample_rate),
            symbol_rate=changes.get("symbol_rate", self.symbol_rate),
            center_wavelength=changes.get("center_wavelength", self.center_wavelength),
        )


def de_bruijn_sequence(order: int) -> BitStream:
    """Binary de Bruijn sequence B(2, order) by Lyndon-word concatenation.

    The result is the lexicographically least sequence, so order 2 gives 0011.

    Raises:
        TxParameterError: If order is outside 1..24.
    """
    if not 1 <= order <= 24:
        raise TxParameterError(f"de Bruijn order must be in 1..24, got {order}")

    a = [0] * (order + 1)
    out: list[int] = []

    # Iterative FKM: emit each Lyndon word whose length divides `order`
    a[1] = 0
    i = 1
    while True:
        if order % i == 0:
            out.extend(a[1 : i + 1])
        i = order
        while i > 0 and a[i] == 1:
            i -= 1
        if i == 0:
            break
        a[i] += 1
        for j in range(i + 1, order + 1):
            a[j] = a[j - i]

    return BitStream(np.array(out, dtype=np.uint8), BitOrigin.DE_BRUIJN, order=order)


def prbs(order: int, seed: int = 1) -> BitStream:
    """One period of a maximal-length PRBS from a Fibonacci LFSR.

    Args:
        order: Register length, one of 7, 9, 11, 15, 23.
        seed: Initial register state, masked to ``order`` bits; must be nonzero.

    Returns:
        BitStream of length 2**order - 1.
    """
    if order not in PRBS_TAPS:
        raise TxParameterError(f"PRBS order must be one of {sorted(PRBS_TAPS)}, got {order}")
    mask = (1 << order) - 1
    state = seed & mask
    if state == 0:
        raise TxParameterError("PRBS seed must be nonzero in the low order bits")

    tap = PRBS_TAPS[order]
    total = order + mask
    seq = np.empty(total, dtype=np.uint8)
    # register contents stand in for the outputs preceding the first one
    seq[:order] = (state >> np.arange(order - 1, -1, -1)) & 1
    m = order
    while m < total:
        # squaring the feedback polynomial over GF(2) doubles both lags,
        # valid once m >= scale * order
        scale = 1 << ((m // order).bit_length() - 1)
        long_lag, short_lag = scale * order, scale * tap
        block = min(short_lag, total - m)
        seq[m : m + block] = (
            seq[m - long_lag : m - long_lag + block] ^ seq[m - short_lag : m - short_lag + block]
        )
        m += block
    out = seq[order:].copy()
    return BitStream(out, BitOrigin.PRBS, order=order, seed=seed)


def differential_encode(bits: BitStream | np.ndarray) -> BitStream:
    """d_k = b_k xor d_{k-1}, starting from d_{-1} = 0."""
    b = _bits_of(bits)
    if b.size == 0:
        return BitStream(b)
    return BitStream(np.bitwise_xor.accumulate(b))


def differential_decode(bits: BitStream | np.ndarray) -> BitStream:
    """b_k = d_k xor d_{k-1}, starting from d_{-1} = 0."""
    d = _bits_of(bits)
    if d.size == 0:
        return BitStream(d)
    previous = np.concatenate(([0], d[:-1])).astype(np.uint8)
    return BitStream(d ^ previous)


def differential_encode_lanes(bits: BitStream | np.ndarray, lanes: int = 2) -> BitStream:
    """Differentially encode each of ``lanes`` interleaved bit lanes separately."""
    b = _bits_of(bits).reshape(-1, lanes)
    return BitStream(np.bitwise_xor.accumulate(b, axis=0).ravel())


def differential_decode_lanes(bits: BitStream | np.ndarray, lanes: int = 2) -> BitStream:
    """Inverse of :func:`differential_encode_lanes`."""
    d = _bits_of(bits).reshape(-1, lanes)
    previous = np.vstack([np.zeros((1, lanes), dtype=np.uint8), d[:-1]])
    return BitStream((d ^ previous).ravel())


def frame_bits(order: int = 11) -> BitStream:
    """Bit pairs for one stored DAC frame of 2**order symbols.

    Both bits of every symbol come from the same de Bruijn sequence; the second
    bit lane is the sequence delayed by half a period.
    """
    seq = de_bruijn_sequence(order).bits
    pairs = np.stack([seq, np.roll(seq, len(seq) // 2)], axis=1)
    return BitStream(pairs.ravel(), BitOrigin.DE_BRUIJN, order=order)


def _bits_of(bits: BitStream | np.ndarray) -> np.ndarray:
    if isinstance(bits, BitStream):
        return bits.bits.copy()
    return np.asarray(bits, dtype=np.uint8).ravel()


def bessel_response(freqs: np.ndarray, bandwidth: float, order: int = DAC_FILTER_ORDER) -> np.ndarray:
    """Analog Bessel low-pass response with its DC group delay removed.

    Args:
        freqs: Frequencies in Hz.
        bandwidth: 3-dB bandwidth in Hz.
        order: Filter order.

    Returns:
        Complex frequency response, unity at DC.
    """
    b, a = signal.bessel(order, 2.0 * np.pi * bandwidth, btype="low", analog=True, norm="mag")
    _, h = signal.freqs(b, a, worN=2.0 * np.pi * freqs)
    # Remove the bulk delay so symbol centres stay on the sampling grid
    f_low = bandwidth * 1e-3
    _, h0 = signal.freqs(b, a, worN=[2.0 * np.pi * f_low])
    delay = -np.angle(h0[0]) / (2.0 * np.pi * f_low)
    return h * np.exp(1j * 2.0 * np.pi * freqs * delay)


def generate_drive(
    symbols: np.ndarray,
    samples_per_symbol: int,
    dac_bandwidth: float | None,
    symbol_rate: float,
) -> DriveWaveform:
    """NRZ drive lanes for a symbol sequence, low-pass filtered by the DAC.

    The record is treated as cyclic (the DAC replays a stored pattern), so the
    filter is applied in the frequency domain. Symbol k is centred on sample
    ``k * samples_per_symbol``.

    Args:
        symbols: (n, 4) symbol coordinates.
        samples_per_symbol: Oversampling factor, >= 2.
        dac_bandwidth: 3-dB bandwidth in Hz; None or inf bypasses the filter.
        symbol_rate: Symbol rate in Hz.

    Returns:
        DriveWaveform with four equal-length lanes.
    """
    if samples_per_symbol < 2:
        raise TxParameterError(f"samples_per_symbol must be >= 2, got {samples_per_symbol}")
    if dac_bandwidth is not None and not dac_bandwidth > 0:
        raise TxParameterError(f"dac_bandwidth must be > 0, got {dac_bandwidth}")
    symbols = np.asarray(symbols, dtype=float)
    if symbols.ndim != 2 or symbols.shape[1] != 4:
        raise TxParameterError(f"symbols must be (n, 4), got {symbols.shape}")

    held = np.repeat(symbols.T, samples_per_symbol, axis=1)
    lanes = np.roll(held, -(samples_per_symbol // 2), axis=1)

    if dac_bandwidth is not None and math.isfinite(dac_bandwidth) and lanes.shape[1]:
        fs = samples_per_symbol * symbol_rate
        freqs = np.fft.fftfreq(lanes.shape[1], d=1.0 / fs)
        response = bessel_response(freqs, dac_bandwidth)
        lanes = np.real(np.fft.ifft(np.fft.fft(lanes, axis=1) * response, axis=1))

    logger.debug(
        f"Drive: {symbols.shape[0]} symbols at {samples_per_symbol} sps, "
        f"DAC bandwidth {dac_bandwidth}"
    )
    return DriveWaveform(lanes, samples_per_symbol, symbol_rate)


def sample_symbols(drive: DriveWaveform) -> np.ndarray:
    """Drive lane values at the symbol centres, as an (n, 4) array."""
    return drive.lanes[:, :: drive.samples_per_symbol].T.copy()


def modulate(
    drive: DriveWaveform,
    launch_power_dbm: float,
    center_wavelength: float = DEFAULT_WAVELENGTH_M,
) -> DualPolWaveform:
    """Ideal linear DP-IQ modulator with the y Q-branch biased to blocking.

    Raises:
        TxParameterError: If the drive carries no power.
    """
    ix, qx, iy, qy = drive.lanes
    if np.any(qy != 0.0):
        logger.debug("Ignoring y Q-branch drive content (branch is blocked)")
    ex = ix + 1j * qx
    ey = iy.astype(complex)

    power = float(np.mean(np.abs(ex) ** 2 + np.abs(ey) ** 2))
    if power <= 0.0:
        raise TxParameterError("Drive waveform carries no power")
    scale = math.sqrt(dbm_to_watt(launch_power_dbm) / power)

    return DualPolWaveform(
        ex * scale,
        ey * scale,
        sample_rate=drive.sample_rate,
        symbol_rate=drive.symbol_rate,
        center_wavelength=center_wavelength,
    )
