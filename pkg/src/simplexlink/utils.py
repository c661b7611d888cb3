"""Utility functions for SimplexLink."""

import logging
import math
import shutil
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# OSNR reference bandwidth: 0.1 nm at 1550 nm
REFERENCE_BANDWIDTH_HZ = 12.5e9


def db_to_linear(value_db: float) -> float:
    """Convert a power ratio in dB to linear."""
    return 10.0 ** (value_db / 10.0)


def linear_to_db(value: float) -> float:
    """Convert a linear power ratio to dB, mapping 0 to -inf."""
    if value <= 0.0:
        return -math.inf
    return 10.0 * math.log10(value)


def dbm_to_watt(power_dbm: float) -> float:
    """Convert optical power in dBm to W."""
    return 1e-3 * db_to_linear(power_dbm)


def mean_power(*fields: np.ndarray) -> float:
    """Total mean power of one or more complex sample sequences."""
    return float(sum(np.mean(np.abs(f) ** 2) for f in fields))


def relative_rms(actual: np.ndarray, expected: np.ndarray) -> float:
    """RMS of the difference normalized by the RMS of ``expected``.

    Args:
        actual: Array under test.
        expected: Reference array of the same shape.

    Returns:
        ||actual - expected|| / ||expected||, or the absolute RMS when the
        reference is all zeros.
    """
    diff = np.linalg.norm(np.asarray(actual) - np.asarray(expected))
    ref = np.linalg.norm(np.asarray(expected))
    if ref == 0.0:
        return float(diff)
    return float(diff / ref)


def check_disk_space(path: Path, required_mb: int = 100) -> tuple[bool, int]:
    """Check if sufficient disk space is available.

    Args:
        path: Path to check disk space for.
        required_mb: Minimum required space in MB.

    Returns:
        Tuple of (has_sufficient_space, available_mb).
    """
    try:
        usage = shutil.disk_usage(str(path))
        available_mb = int(usage.free / (1024 * 1024))
        return available_mb >= required_mb, available_mb
    except Exception as e:
        logger.warning(f"Failed to check disk space: {e}")
        # If we can't check, assume there's enough space
        return True, -1
