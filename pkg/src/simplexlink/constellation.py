"""Codebooks, bit mapping, ML demapping and reference BER predictors."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .utils import REFERENCE_BANDWIDTH_HZ, db_to_linear, linear_to_db

logger = logging.getLogger(__name__)

SIMPLEX3D = "simplex3d"
DPBPSK = "dpbpsk"
FORMATS = (SIMPLEX3D, DPBPSK)

# Symbols drawn per chunk in the Monte-Carlo oracle
_MC_CHUNK = 1 << 18


class ConstellationError(Exception):
    """Base class for constellation errors."""

    pass


class CodebookInvariantError(ConstellationError):
    """Raised when a codebook violates its structural invariants."""

    pass


class InputShapeError(ConstellationError):
    """Raised when a bit stream or symbol array has the wrong shape."""

    pass


class DomainError(ConstellationError):
    """Raised when an argument lies outside the domain of a formula."""

    pass


@dataclass(frozen=True)
class SymbolVec4:
    """One modulation symbol as four real coordinates."""

    ix: float
    qx: float
    iy: float
    qy: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise DomainError(f"Symbol coordinates must be finite: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ix, self.qx, self.iy, self.qy)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "SymbolVec4":
        ix, qx, iy, qy = (float(v) for v in values)
        return cls(ix, qx, iy, qy)


@dataclass(frozen=True)
class NoiseSigma:
    """Per-real-dimension standard deviation of additive white Gaussian noise."""

    sigma: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.sigma) or self.sigma < 0.0:
            raise DomainError(f"sigma must be finite and >= 0, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class Codebook:
    """A labeled set of 4D points defining a modulation format.

    Labels are bit tuples, first bit most significant. Points are stored as an
    (N, 4) array in (ix, qx, iy, qy) order.
    """

    name: str
    points: np.ndarray
    labels: tuple[tuple[int, ...], ...]
    _label_index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 4:
            raise CodebookInvariantError(f"Points must be (N, 4), got {points.shape}")
        n = points.shape[0]
        if n < 2 or n & (n - 1):
            raise CodebookInvariantError(f"Point count must be a power of two, got {n}")
        if not np.all(np.isfinite(points)):
            raise CodebookInvariantError("Codebook points must be finite")
        if len(self.labels) != n:
            raise CodebookInvariantError(f"{len(self.labels)} labels for {n} points")

        width = n.bit_length() - 1
        labels = tuple(tuple(int(b) for b in label) for label in self.labels)
        if any(len(label) != width for label in labels):
            raise CodebookInvariantError(f"Labels must all be {width} bits wide")
        if any(b not in (0, 1) for label in labels for b in label):
            raise CodebookInvariantError("Labels must contain only 0/1")
        if len(set(labels)) != n:
            raise CodebookInvariantError("Labels must be distinct")
        if len(np.unique(points, axis=0)) != n:
            raise CodebookInvariantError("Codebook points must be distinct")

        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(
            self,
            "_label_index",
            {_label_to_int(label): i for i, label in enumerate(labels)},
        )

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @property
    def bits_per_symbol(self) -> int:
        return self.size.bit_length() - 1

    @property
    def label_array(self) -> np.ndarray:
        """Labels as an (N, bits_per_symbol) uint8 array."""
        return np.array(self.labels, dtype=np.uint8)

    def symbol(self, index: int) -> SymbolVec4:
        return SymbolVec4.from_array(self.points[index])

    def index_of(self, label: Sequence[int]) -> int:
        return self._label_index[_label_to_int(label)]

    def scaled(self, factor: float) -> "Codebook":
        """Return the same codebook with every coordinate multiplied by ``factor``."""
        return Codebook(self.name, self.points * factor, self.labels)


def _label_to_int(label: Sequence[int]) -> int:
    value = 0
    for b in label:
        value = (value << 1) | int(b)
    return value


def _as_sigma(sigma: NoiseSigma | float) -> float:
    if isinstance(sigma, NoiseSigma):
        return sigma.sigma
    return NoiseSigma(float(sigma)).sigma


def simplex_codebook() -> Codebook:
    """3D-Simplex: QPSK on x from both bits, BPSK on y from their XOR, Qy blocked."""
    points = []
    labels = []
    for b0, b1 in itertools.product((0, 1), repeat=2):
        ix = 2.0 * b0 - 1.0
        qx = 2.0 * b1 - 1.0
        points.append((ix, qx, -ix * qx, 0.0))
        labels.append((b0, b1))
    return Codebook(SIMPLEX3D, np.array(points), tuple(labels))


def dpbpsk_codebook() -> Codebook:
    """DP-BPSK: bit 0 drives the x I-branch, bit 1 the y I-branch (0 -> -1)."""
    points = []
    labels = []
    for b0, b1 in itertools.product((0, 1), repeat=2):
        points.append((2.0 * b0 - 1.0, 0.0, 2.0 * b1 - 1.0, 0.0))
        labels.append((b0, b1))
    return Codebook(DPBPSK, np.array(points), tuple(labels))


def codebook_for(fmt: str) -> Codebook:
    """Look up a codebook by format identifier."""
    if fmt == SIMPLEX3D:
        return simplex_codebook()
    if fmt == DPBPSK:
        return dpbpsk_codebook()
    raise ConstellationError(f"Unknown format '{fmt}', expected one of {FORMATS}")


def map_bits(cb: Codebook, bits: Sequence[int] | np.ndarray) -> np.ndarray:
    """Map a bit stream onto codebook points.

    Args:
        cb: Codebook to map onto.
        bits: Flat 0/1 sequence; consecutive groups of ``bits_per_symbol``
            bits form one label, first bit most significant.

    Returns:
        (n_symbols, 4) array of symbol coordinates.

    Raises:
        InputShapeError: If the length is not a multiple of bits per symbol.
    """
    bits = np.asarray(bits, dtype=np.int64).ravel()
    k = cb.bits_per_symbol
    if bits.size % k:
        raise InputShapeError(
            f"Bit stream of length {bits.size} is not divisible by {k} bits/symbol"
        )
    if bits.size == 0:
        return np.zeros((0, 4))

    groups = bits.reshape(-1, k)
    weights = 1 << np.arange(k - 1, -1, -1)
    codes = groups @ weights
    lookup = np.array(
        [cb._label_index[code] for code in range(cb.size)], dtype=np.int64
    )
    return cb.points[lookup[codes]].copy()


def map_symbols(cb: Codebook, bits: Sequence[int] | np.ndarray) -> list[SymbolVec4]:
    """Same as :func:`map_bits` but returns SymbolVec4 values."""
    return [SymbolVec4.from_array(row) for row in map_bits(cb, bits)]


def demap_ml(
    cb: Codebook, received: SymbolVec4 | Sequence[float]
) -> tuple[tuple[int, ...], float]:
    """Nearest-point decision for one received 4D sample.

    Ties resolve to the lowest codebook index.

    Returns:
        Tuple of (label bits, Euclidean distance to the chosen point).
    """
    if isinstance(received, SymbolVec4):
        r = received.as_array()
    else:
        r = np.asarray(received, dtype=float)
    if r.shape != (4,) or not np.all(np.isfinite(r)):
        raise InputShapeError(f"Received symbol must be 4 finite values, got {r}")
    distances = np.linalg.norm(cb.points - r, axis=1)
    index = int(np.argmin(distances))
    return cb.labels[index], float(distances[index])


def demap_ml_many(cb: Codebook, received: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`demap_ml` over an (n, 4) array.

    Returns:
        Tuple of (flat bit array of length n * bits_per_symbol, chosen indices).
    """
    r = np.asarray(received, dtype=float)
    if r.ndim != 2 or r.shape[1] != 4:
        raise InputShapeError(f"Received symbols must be (n, 4), got {r.shape}")
    # argmin ||r - p||^2 == argmin (||p||^2 - 2 <r, p>)
    energy = np.sum(cb.points**2, axis=1)
    metric = energy[None, :] - 2.0 * (r @ cb.points.T)
    indices = np.argmin(metric, axis=1)
    return cb.label_array[indices].ravel(), indices


def min_distance(cb: Codebook) -> float:
    """Minimum pairwise Euclidean distance."""
    diffs = cb.points[:, None, :] - cb.points[None, :, :]
    distances = np.linalg.norm(diffs, axis=2)
    np.fill_diagonal(distances, np.inf)
    return float(distances.min())


def avg_power(cb: Codebook) -> float:
    """Mean symbol energy over the codebook points."""
    return float(np.mean(np.sum(cb.points**2, axis=1)))


def asymptotic_gain_db(a: Codebook, b: Codebook) -> float:
    """High-SNR OSNR advantage of ``a`` over ``b`` from D_min^2 / P_avg."""
    merits = []
    for cb in (a, b):
        d, p = min_distance(cb), avg_power(cb)
        if d <= 0.0 or p <= 0.0:
            raise DomainError(f"Codebook '{cb.name}' has D_min={d}, P_avg={p}")
        merits.append(d**2 / p)
    return 10.0 * math.log10(merits[0] / merits[1])


def gaussian_q(x: float | np.ndarray) -> float | np.ndarray:
    """Gaussian tail probability Q(x)."""
    return norm.sf(x)


def union_bound_ber(cb: Codebook, sigma: NoiseSigma | float) -> float:
    """Nearest-neighbour union bound on the bit error ratio.

    BER ~ 1/(N k) * sum_{i != j, d_ij = D_min} hamming(l_i, l_j) * Q(D_min / (2 sigma)).
    Only pairs at the minimum distance contribute; for DP-BPSK this is the
    exact per-bit result Q(1/sigma).

    Raises:
        DomainError: If sigma is zero.
    """
    s = _as_sigma(sigma)
    if s == 0.0:
        raise DomainError("union_bound_ber is undefined for sigma = 0")

    labels = cb.label_array
    hamming = np.sum(labels[:, None, :] != labels[None, :, :], axis=2)
    distances = np.linalg.norm(cb.points[:, None, :] - cb.points[None, :, :], axis=2)
    off_diagonal = ~np.eye(cb.size, dtype=bool)
    d_min = float(np.min(distances[off_diagonal]))
    mask = off_diagonal & np.isclose(distances, d_min, rtol=1e-9, atol=0.0)
    terms = hamming[mask] * gaussian_q(distances[mask] / (2.0 * s))
    return float(np.sum(terms) / (cb.size * cb.bits_per_symbol))


def theory_ber(cb: Codebook, sigma: NoiseSigma | float, differential: bool = False) -> float:
    """Reference BER curve value, optionally after differential decoding.

    Differential decoding turns an isolated channel error into two output
    errors: p -> 2p(1 - p).
    """
    if _as_sigma(sigma) == 0.0:
        return 0.0
    p = min(union_bound_ber(cb, sigma), 0.5)
    if differential:
        return 2.0 * p * (1.0 - p)
    return p


def sigma_for_ber(cb: Codebook, target_ber: float, differential: bool = False) -> NoiseSigma:
    """Noise level at which :func:`theory_ber` reaches ``target_ber``."""
    if not 0.0 < target_ber < 0.25:
        raise DomainError(f"target_ber must be in (0, 0.25), got {target_ber}")

    def objective(s: float) -> float:
        return math.log10(theory_ber(cb, s, differential)) - math.log10(target_ber)

    scale = math.sqrt(avg_power(cb))
    return NoiseSigma(brentq(objective, 0.05 * scale, 10.0 * scale, xtol=1e-12))


def mc_ber_awgn(
    cb: Codebook,
    sigma: NoiseSigma | float,
    n_symbols: int,
    seed: int,
    differential: bool = False,
) -> tuple[float, int]:
    """Monte-Carlo BER of ML detection in 4D white Gaussian noise.

    Args:
        cb: Codebook under test.
        sigma: Noise standard deviation per real dimension.
        n_symbols: Number of uniformly drawn symbols.
        seed: Seed for ``numpy.random.default_rng``.
        differential: Apply per-bit-lane differential decoding to the error
            pattern, as a differentially encoded link would.

    Returns:
        Tuple of (ber, bit error count).
    """
    if n_symbols < 1:
        raise DomainError(f"n_symbols must be >= 1, got {n_symbols}")
    s = _as_sigma(sigma)
    rng = np.random.default_rng(seed)
    k = cb.bits_per_symbol

    errors = 0
    previous = np.zeros(k, dtype=np.uint8)
    remaining = n_symbols
    while remaining > 0:
        n = min(remaining, _MC_CHUNK)
        indices = rng.integers(0, cb.size, size=n)
        received = cb.points[indices]
        if s > 0:
            received = received + rng.normal(0.0, s, size=(n, 4))
        _, decided = demap_ml_many(cb, received)
        flips = cb.label_array[indices] ^ cb.label_array[decided]
        if differential:
            # decoded error e'_k = e_k xor e_{k-1}, per bit lane
            shifted = np.vstack([previous[None, :], flips[:-1]])
            previous = flips[-1].copy()
            flips = flips ^ shifted
        errors += int(np.sum(flips))
        remaining -= n

    ber = errors / (n_symbols * k)
    logger.debug(f"MC {cb.name}: sigma={s:.4f} n={n_symbols} errors={errors}")
    return ber, errors


def osnr_to_sigma(osnr_db: float, symbol_rate: float, cb: Codebook) -> NoiseSigma:
    """Per-dimension noise sigma giving ``osnr_db`` at one sample per symbol.

    OSNR = P_avg * symbol_rate / (4 sigma^2 B_ref), B_ref = 12.5 GHz, with noise
    counted in both polarizations and both quadratures.
    """
    if symbol_rate <= 0.0:
        raise DomainError(f"symbol_rate must be > 0, got {symbol_rate}")
    if math.isinf(osnr_db) and osnr_db > 0:
        return NoiseSigma(0.0)
    osnr = db_to_linear(osnr_db)
    variance = avg_power(cb) * symbol_rate / (4.0 * osnr * REFERENCE_BANDWIDTH_HZ)
    return NoiseSigma(math.sqrt(variance))


def sigma_to_osnr(sigma: NoiseSigma | float, symbol_rate: float, cb: Codebook) -> float:
    """Inverse of :func:`osnr_to_sigma`, in dB."""
    s = _as_sigma(sigma)
    if s == 0.0:
        return math.inf
    osnr = avg_power(cb) * symbol_rate / (4.0 * s**2 * REFERENCE_BANDWIDTH_HZ)
    return linear_to_db(osnr)
