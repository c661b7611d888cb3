"""Result and waveform files."""

import json
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .metrics import SCHEMA_VERSION, BerCurve, format_curve_csv
from .txchain import DualPolWaveform
from .utils import check_disk_space

logger = logging.getLogger(__name__)

REQUIRED_MB = 10
SAMPLE_DTYPE = np.dtype("<f8")
SAMPLE_LAYOUT = "float64-le re(x) im(x) re(y) im(y)"


class StorageError(Exception):
    """Base class for storage errors."""

    pass


class InsufficientDiskSpaceError(StorageError):
    """Raised when there is not enough disk space to write results."""

    pass


def _prepare(directory: Path, required_mb: int = REQUIRED_MB) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    has_space, available_mb = check_disk_space(directory, required_mb=required_mb)
    if not has_space:
        logger.error(f"Insufficient disk space: {available_mb}MB available, need {required_mb}MB")
        raise InsufficientDiskSpaceError(
            f"Only {available_mb}MB available. Need at least {required_mb}MB."
        )


def curve_filename(scenario_name: str, fmt: str) -> str:
    return f"{scenario_name}_{fmt}.csv"


def write_curve_csv(curve: BerCurve, path: Path) -> Path:
    """Write a BER curve in the CSV contract (header, rows, fit footer)."""
    path = Path(path)
    _prepare(path.parent)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_curve_csv(curve))
    logger.info(f"Wrote curve: {path.name} ({len(curve.points)} points)")
    return path


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        return _json_safe(value.item())
    return value


def write_result_json(result: dict[str, Any], path: Path) -> Path:
    """Write a run result as sorted, indented JSON with a schema version."""
    path = Path(path)
    _prepare(path.parent)
    payload = {"schema_version": SCHEMA_VERSION, **_json_safe(result)}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    logger.info(f"Wrote result: {path}")
    return path


def _interleave(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    return np.column_stack([x.real, x.imag, y.real, y.imag]).astype(SAMPLE_DTYPE)


def export_waveform(sig: DualPolWaveform, path: Path) -> Path:
    """Write samples as raw float64 quadruples plus a YAML sidecar.

    Returns:
        Path of the binary file; the sidecar has the same stem and ``.yaml``.
    """
    path = Path(path)
    _prepare(path.parent)
    _interleave(sig.ex, sig.ey).tofile(path)
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "layout": SAMPLE_LAYOUT,
        "n_samples": len(sig),
        "sample_rate": float(sig.sample_rate),
        "symbol_rate": float(sig.symbol_rate),
        "center_wavelength": float(sig.center_wavelength),
    }
    with open(path.with_suffix(".yaml"), "w", encoding="utf-8") as f:
        yaml.dump(sidecar, f, default_flow_style=False, sort_keys=False)
    logger.debug(f"Exported waveform: {path.name} ({len(sig)} samples)")
    return path


def load_waveform(path: Path) -> DualPolWaveform:
    """Read a waveform written by :func:`export_waveform`."""
    path = Path(path)
    sidecar_path = path.with_suffix(".yaml")
    if not path.exists() or not sidecar_path.exists():
        raise StorageError(f"Waveform or sidecar missing for {path}")
    with open(sidecar_path, encoding="utf-8") as f:
        meta = yaml.safe_load(f) or {}
    if meta.get("layout") != SAMPLE_LAYOUT:
        raise StorageError(f"Unsupported sample layout: {meta.get('layout')}")

    raw = np.fromfile(path, dtype=SAMPLE_DTYPE)
    if raw.size != 4 * int(meta["n_samples"]):
        raise StorageError(f"{path.name}: expected {meta['n_samples']} samples, found {raw.size // 4}")
    data = raw.reshape(-1, 4)
    return DualPolWaveform(
        data[:, 0] + 1j * data[:, 1],
        data[:, 2] + 1j * data[:, 3],
        sample_rate=float(meta["sample_rate"]),
        symbol_rate=float(meta["symbol_rate"]),
        center_wavelength=float(meta["center_wavelength"]),
    )


def dump_constellation(x_symbols: np.ndarray, y_symbols: np.ndarray, path: Path) -> Path:
    """Write one stage's symbol pairs in the waveform float layout."""
    path = Path(path)
    _prepare(path.parent)
    _interleave(x_symbols, y_symbols).tofile(path)
    return path


def load_constellation(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Read symbol pairs written by :func:`dump_constellation`."""
    data = np.fromfile(Path(path), dtype=SAMPLE_DTYPE).reshape(-1, 4)
    return data[:, 0] + 1j * data[:, 1], data[:, 2] + 1j * data[:, 3]
