"""Frame sync, BER counting, curve regression and required-OSNR readout."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import erfc, erfcinv

from .txchain import BitStream

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MIN_ERRORS = 25
SYNC_THRESHOLD = 0.6
EXTRAPOLATION_LIMIT_DB = 2.0
CSV_COLUMNS = ("x_value", "ber", "bits_counted", "errors")
DOMAINS = ("log10", "q")


class MetricsError(Exception):
    """Base class for metrics errors."""

    pass


class SyncError(MetricsError):
    """Raised when no cyclic offset gives enough bit agreement."""

    pass


class FitError(MetricsError):
    """Raised when a BER curve cannot be regressed or inverted."""

    pass


class MetricsDomainError(MetricsError):
    """Raised for arguments outside a conversion's domain."""

    pass


@dataclass(frozen=True)
class BerPoint:
    """One measured (or computed) BER value at a sweep coordinate."""

    x_value: float
    ber: float
    bits_counted: int
    errors: int

    def __post_init__(self) -> None:
        if self.bits_counted < 1:
            raise MetricsError(f"bits_counted must be >= 1, got {self.bits_counted}")
        if not 0 <= self.errors <= self.bits_counted:
            raise MetricsError(f"errors {self.errors} outside [0, {self.bits_counted}]")
        if not math.isclose(self.ber, self.errors / self.bits_counted, rel_tol=1e-12, abs_tol=0.0):
            raise MetricsError(
                f"ber {self.ber} inconsistent with {self.errors}/{self.bits_counted}"
            )

    @classmethod
    def from_counts(cls, x_value: float, errors: int, bits_counted: int) -> "BerPoint":
        return cls(float(x_value), errors / bits_counted, int(bits_counted), int(errors))

    @property
    def low_confidence(self) -> bool:
        """True when fewer than 25 errors back the estimate."""
        return self.errors < MIN_ERRORS


@dataclass(frozen=True)
class Regression:
    """Straight line y = slope * x + intercept in the given BER domain."""

    slope: float
    intercept: float
    domain: str = "log10"


@dataclass(frozen=True)
class BerCurve:
    """BER points sorted by x_value, optionally with a fitted line."""

    points: tuple[BerPoint, ...]
    regression: Regression | None = None

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.points, key=lambda p: p.x_value))
        object.__setattr__(self, "points", ordered)

    @property
    def x_values(self) -> np.ndarray:
        return np.array([p.x_value for p in self.points])

    @property
    def bers(self) -> np.ndarray:
        return np.array([p.ber for p in self.points])


@dataclass(frozen=True)
class SyncResult:
    """Cyclic offset and polarity aligning a received stream to its reference."""

    offset: int
    polarity: int
    agreement: float


@dataclass(frozen=True)
class RequiredOsnr:
    """Regression readout at a target BER."""

    osnr_db: float
    target_ber: float
    extrapolated: bool = False
    warning: str | None = field(default=None, compare=False)


def _bits(stream: BitStream | np.ndarray) -> np.ndarray:
    if isinstance(stream, BitStream):
        return stream.bits
    return np.asarray(stream, dtype=np.uint8).ravel()


def synchronize(
    ref_bits: BitStream | np.ndarray,
    rx_bits: BitStream | np.ndarray,
    min_agreement: float = SYNC_THRESHOLD,
) -> SyncResult:
    """Find the cyclic offset of ``rx_bits`` within the reference frame.

    The returned offset satisfies ``rx[i] == ref[(i + offset) % len(ref)]`` for
    the leading ``len(ref)`` received bits (after applying polarity).

    Raises:
        MetricsError: If the received stream is shorter than the reference.
        SyncError: If the best agreement is below ``min_agreement``.
    """
    ref = _bits(ref_bits)
    rx = _bits(rx_bits)
    n = ref.size
    if n == 0:
        raise MetricsError("Reference stream is empty")
    if rx.size < n:
        raise MetricsError(f"Received stream ({rx.size}) shorter than reference ({n})")

    a = 2.0 * ref - 1.0
    b = 2.0 * rx[:n] - 1.0
    corr = np.rint(np.real(np.fft.ifft(np.conj(np.fft.fft(b)) * np.fft.fft(a))))
    offset = int(np.argmax(np.abs(corr)))
    peak = corr[offset]
    polarity = -1 if peak < 0 else 1
    agreement = (n + abs(peak)) / (2.0 * n)

    if agreement < min_agreement:
        raise SyncError(f"Best agreement {agreement:.3f} below {min_agreement} (offset {offset})")
    return SyncResult(offset, polarity, float(agreement))


def count_ber(
    ref_bits: BitStream | np.ndarray,
    rx_bits: BitStream | np.ndarray,
    offset: int,
    polarity: int = 1,
    x_value: float = 0.0,
) -> BerPoint:
    """Count bit errors of ``rx_bits`` against the cyclic reference at ``offset``."""
    ref = _bits(ref_bits)
    rx = _bits(rx_bits)
    if rx.size == 0:
        raise MetricsError("Received stream is empty")
    expected = ref[(np.arange(rx.size) + offset) % ref.size]
    if polarity < 0:
        rx = 1 - rx
    errors = int(np.count_nonzero(rx != expected))
    return BerPoint.from_counts(x_value, errors, rx.size)


def merge_points(points: Iterable[BerPoint], x_value: float) -> BerPoint:
    """Pool error and bit counts of several frames into one point."""
    points = list(points)
    if not points:
        raise MetricsError("No points to merge")
    errors = sum(p.errors for p in points)
    bits = sum(p.bits_counted for p in points)
    return BerPoint.from_counts(x_value, errors, bits)


def q_from_ber(ber: float) -> float:
    """Q factor in dB, 20 log10(sqrt(2) erfcinv(2 ber)); -inf at ber = 0.5."""
    if ber == 0.5:
        return -math.inf
    if not 0.0 < ber < 0.5:
        raise MetricsDomainError(f"ber must be in (0, 0.5], got {ber}")
    return 20.0 * math.log10(math.sqrt(2.0) * float(erfcinv(2.0 * ber)))


def ber_from_q(q_db: float) -> float:
    """Inverse of :func:`q_from_ber`."""
    if q_db == -math.inf:
        return 0.5
    q = 10.0 ** (q_db / 20.0)
    return float(0.5 * erfc(q / math.sqrt(2.0)))


def _transform(bers: np.ndarray, domain: str) -> np.ndarray:
    if domain == "log10":
        return np.log10(bers)
    return np.array([q_from_ber(b) for b in bers])


def _inverse_transform(value: float, domain: str) -> float:
    if domain == "log10":
        return 10.0**value
    return ber_from_q(value)


def fit_curve(points: Iterable[BerPoint], domain: str = "log10") -> BerCurve:
    """Least-squares straight line through the nonzero-BER points.

    Args:
        points: Measured points; zero-BER points are kept but not fitted.
        domain: "log10" for log10(BER) or "q" for Q in dB, versus x_value.

    Raises:
        FitError: If fewer than two points have a usable BER.
    """
    if domain not in DOMAINS:
        raise MetricsDomainError(f"Unknown regression domain '{domain}', expected {DOMAINS}")
    points = tuple(points)
    usable = [p for p in points if 0.0 < p.ber < 0.5]
    if len(usable) < 2:
        raise FitError(f"Need >= 2 points with 0 < BER < 0.5 to fit, got {len(usable)}")
    xs = np.array([p.x_value for p in usable])
    if np.ptp(xs) == 0.0:
        raise FitError("Fitted points share one x_value")
    ys = _transform(np.array([p.ber for p in usable]), domain)
    slope, intercept = np.polyfit(xs, ys, 1)
    return BerCurve(points, Regression(float(slope), float(intercept), domain))


def required_osnr(curve: BerCurve, target_ber: float) -> RequiredOsnr:
    """Invert the regression line at ``target_ber``.

    Readouts more than 2 dB outside the fitted range carry a warning.
    """
    reg = curve.regression
    if reg is None:
        raise FitError("Curve has no regression; call fit_curve first")
    if not 0.0 < target_ber < 0.5:
        raise MetricsDomainError(f"target_ber must be in (0, 0.5), got {target_ber}")
    if reg.slope == 0.0:
        raise FitError("Regression slope is zero")

    y = _transform(np.array([target_ber]), reg.domain)[0]
    x = (y - reg.intercept) / reg.slope

    fitted = [p.x_value for p in curve.points if 0.0 < p.ber < 0.5]
    lo, hi = min(fitted), max(fitted)
    extrapolated = not lo <= x <= hi
    warning = None
    distance = max(lo - x, x - hi, 0.0)
    if distance > EXTRAPOLATION_LIMIT_DB:
        warning = (
            f"Readout {x:.2f} dB at BER {target_ber:g} lies {distance:.2f} dB "
            f"outside fitted range [{lo:.2f}, {hi:.2f}]"
        )
        logger.warning(warning)
    return RequiredOsnr(float(x), target_ber, extrapolated, warning)


def osnr_gain(reference: BerCurve, candidate: BerCurve, target_ber: float) -> float:
    """Required-OSNR advantage of ``candidate`` over ``reference`` in dB."""
    return required_osnr(reference, target_ber).osnr_db - required_osnr(candidate, target_ber).osnr_db


def format_curve_csv(curve: BerCurve) -> str:
    """CSV text: header, one row per point, footer comment with the fit."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for p in curve.points:
        writer.writerow([repr(float(p.x_value)), repr(float(p.ber)), p.bits_counted, p.errors])
    reg = curve.regression
    if reg is None:
        buffer.write(f"# schema_version={SCHEMA_VERSION} slope=none intercept=none domain=none\n")
    else:
        buffer.write(
            f"# schema_version={SCHEMA_VERSION} slope={reg.slope!r} "
            f"intercept={reg.intercept!r} domain={reg.domain}\n"
        )
    return buffer.getvalue()


def parse_curve_csv(text: str) -> BerCurve:
    """Parse the output of :func:`format_curve_csv`."""
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows or tuple(rows[0].split(",")) != CSV_COLUMNS:
        raise MetricsError(f"Missing CSV header {CSV_COLUMNS}")

    points = []
    footer: dict[str, str] = {}
    for line in rows[1:]:
        if line.startswith("#"):
            for item in line.lstrip("#").split():
                key, _, value = item.partition("=")
                footer[key] = value
            continue
        x, ber, bits, errors = next(csv.reader([line]))
        points.append(BerPoint(float(x), float(ber), int(bits), int(errors)))

    regression = None
    if footer.get("slope", "none") != "none":
        regression = Regression(
            float(footer["slope"]), float(footer["intercept"]), footer.get("domain", "log10")
        )
    return BerCurve(tuple(points), regression)


def read_curve_csv(path: Path) -> BerCurve:
    """Load a curve written by ``storage.write_curve_csv``."""
    return parse_curve_csv(Path(path).read_text(encoding="utf-8"))
