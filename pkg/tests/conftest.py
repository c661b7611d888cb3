"""Pytest fixtures for SimplexLink tests."""

import tempfile
from pathlib import Path
from types import SimpleNamespace
from typing import Callable, Generator

import numpy as np
import pytest


@pytest.fixture
def simplex_cb():
    """The 3D-simplex codebook."""
    from simplexlink.constellation import simplex_codebook

    return simplex_codebook()


@pytest.fixture
def dpbpsk_cb():
    """The DP-BPSK codebook."""
    from simplexlink.constellation import dpbpsk_codebook

    return dpbpsk_codebook()


@pytest.fixture
def temp_output_dir() -> Generator[Path, None, None]:
    """Create a temporary directory for result files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def make_signal() -> Callable[..., SimpleNamespace]:
    """Build a clean transmitted waveform from the stored frame pattern."""
    from simplexlink.constellation import DPBPSK, codebook_for, map_bits
    from simplexlink.txchain import (
        differential_encode_lanes,
        frame_bits,
        generate_drive,
        modulate,
    )

    def _make(
        fmt: str = "simplex3d",
        samples_per_symbol: int = 4,
        dac_bandwidth: float | None = None,
        repeats: int = 1,
        order: int = 11,
        symbol_rate: float = 16e9,
        launch_dbm: float = 0.0,
    ) -> SimpleNamespace:
        bits = frame_bits(order).bits
        coded = differential_encode_lanes(bits).bits if fmt == DPBPSK else bits
        symbols = np.tile(map_bits(codebook_for(fmt), coded), (repeats, 1))
        drive = generate_drive(symbols, samples_per_symbol, dac_bandwidth, symbol_rate)
        sig = modulate(drive, launch_dbm)
        return SimpleNamespace(
            sig=sig,
            bits=bits,
            coded=coded,
            symbols=symbols,
            drive=drive,
            x=symbols[:, 0] + 1j * symbols[:, 1],
            y=symbols[:, 2] + 1j * symbols[:, 3],
        )

    return _make


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded random generator."""
    return np.random.default_rng(1234)
