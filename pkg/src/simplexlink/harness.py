"""Scenario engine: sweeps, seeds, worker pool, theory tables and selftest."""

from __future__ import annotations

import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .channel import (
    apply_cd,
    apply_freq_offset,
    apply_jones_rotation,
    apply_phase_noise,
    apply_timing_drift,
    load_awgn_to_osnr,
    optical_bpf,
    random_jones_angles,
    ssfm_span,
)
from .config import LinkConfig, Scenario, ScenarioKind
from .constellation import (
    DPBPSK,
    SIMPLEX3D,
    asymptotic_gain_db,
    avg_power,
    codebook_for,
    dpbpsk_codebook,
    gaussian_q,
    map_bits,
    mc_ber_awgn,
    min_distance,
    osnr_to_sigma,
    simplex_codebook,
    theory_ber,
    union_bound_ber,
)
from .metrics import (
    BerCurve,
    BerPoint,
    FitError,
    RequiredOsnr,
    SyncError,
    count_ber,
    fit_curve,
    merge_points,
    required_osnr,
    synchronize,
)
from .rxdsp import (
    MIN_FO_SYMBOLS,
    TAIL_GUARD_SYMBOLS,
    AlignmentError,
    DspMode,
    DspReport,
    ReceiverConfig,
    cd_compensate,
    receive,
)
from .storage import curve_filename, dump_constellation, write_curve_csv, write_result_json
from .txchain import (
    BitStream,
    DualPolWaveform,
    de_bruijn_sequence,
    differential_encode_lanes,
    frame_bits,
    generate_drive,
    modulate,
)

logger = logging.getLogger(__name__)

SEED_POINT_STRIDE = 1000
# Launch power for back-to-back records; the OSNR loading is relative
B2B_LAUNCH_DBM = 0.0


class HarnessError(Exception):
    """Base class for scenario execution errors."""

    pass


class StageError(HarnessError):
    """A processing stage failed for one frame."""

    def __init__(self, message: str, stage: str, fmt: str, point: int, frame: int):
        super().__init__(f"[{stage}] {fmt} point {point} frame {frame}: {message}")
        self.stage = stage
        self.fmt = fmt
        self.point = point
        self.frame = frame


def frame_seed(base_seed: int, point_index: int, frame_index: int) -> int:
    """Seed of one frame: base + point * 1000 + frame."""
    return base_seed + point_index * SEED_POINT_STRIDE + frame_index


@dataclass
class FrameOutcome:
    """Result of one simulated frame."""

    fmt: str
    point_index: int
    frame_index: int
    errors: int
    bits_counted: int
    report: DspReport
    stages: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)


@dataclass
class FormatResult:
    """Measured and theoretical curves of one format."""

    fmt: str
    curve: BerCurve
    osnr_db: list[float]
    theory: list[float]
    diagnostics: list[list[DspReport]]
    required: RequiredOsnr | None = None

    def to_dict(self) -> dict[str, Any]:
        reg = self.curve.regression
        return {
            "points": [
                {
                    "x_value": p.x_value,
                    "ber": p.ber,
                    "bits_counted": p.bits_counted,
                    "errors": p.errors,
                    "low_confidence": p.low_confidence,
                    "osnr_db": osnr,
                    "theory_ber": theory,
                }
                for p, osnr, theory in zip(self.curve.points, self.osnr_db, self.theory)
            ],
            "regression": None
            if reg is None
            else {"slope": reg.slope, "intercept": reg.intercept, "domain": reg.domain},
            "required_osnr": None
            if self.required is None
            else {
                "target_ber": self.required.target_ber,
                "osnr_db": self.required.osnr_db,
                "extrapolated": self.required.extrapolated,
                "warning": self.required.warning,
            },
            "diagnostics": [[r.to_dict() for r in frames] for frames in self.diagnostics],
        }


@dataclass
class RunResult:
    """Everything a scenario run produced."""

    scenario: Scenario
    formats: dict[str, FormatResult]
    wall_time_s: float = 0.0
    version: str = __version__
    stage_dumps: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def curves(self) -> dict[str, BerCurve]:
        return {fmt: r.curve for fmt, r in self.formats.items()}

    def osnr_gain(self, reference: str = DPBPSK, candidate: str = SIMPLEX3D) -> float | None:
        """Required-OSNR difference between two formats, if both were fitted."""
        a = self.formats.get(reference)
        b = self.formats.get(candidate)
        if a is None or b is None or a.required is None or b.required is None:
            return None
        return a.required.osnr_db - b.required.osnr_db

    def to_dict(self) -> dict[str, Any]:
        """Serializable form; wall time is left out so outputs are reproducible."""
        data: dict[str, Any] = {
            "software_version": self.version,
            "scenario": self.scenario.to_dict(),
            "formats": {fmt: r.to_dict() for fmt, r in self.formats.items()},
        }
        gain = self.osnr_gain()
        if gain is not None:
            data["osnr_gain_db"] = gain
        if self.scenario.kind is ScenarioKind.LAUNCH_POWER_SWEEP:
            data["optimum_launch_dbm"] = {
                fmt: optimum_launch(r.curve) for fmt, r in self.formats.items()
            }
        return data


def optimum_launch(curve: BerCurve) -> float:
    """Sweep value with the lowest measured BER (first one on ties)."""
    bers = curve.bers
    return float(curve.x_values[int(np.argmin(bers))])


@dataclass
class _Transmitter:
    """Cached per-format transmit record."""

    data_bits: BitStream
    reference_bits: BitStream
    drive_symbols: np.ndarray


def check_scenario(s: Scenario) -> None:
    """Reject a scenario whose record cannot feed the receiver.

    Raises:
        HarnessError: If too few symbols remain after equalizer convergence.
    """
    total = s.link.frame_symbols * s.link.frame_repeats
    # DP-BPSK loses its first decision to differential decoding
    usable = total - (1 if DPBPSK in s.formats else 0)
    needed = s.link.frame_symbols
    if s.dsp.mode is DspMode.BLIND:
        usable -= s.dsp.equalizer.convergence_symbols + TAIL_GUARD_SYMBOLS
        if s.dsp.estimate_frequency:
            needed = max(needed, MIN_FO_SYMBOLS)
    if usable < needed:
        raise HarnessError(
            f"Record of {total} symbols leaves {usable} usable symbols; "
            f"need {needed}. Increase link.frame_repeats."
        )


class ScenarioRunner:
    """Runs the frames of one scenario on a thread pool."""

    def __init__(self, scenario: Scenario, workers: int = 1, keep_stages: bool = False) -> None:
        self.scenario = scenario
        self.workers = max(1, int(workers))
        self.keep_stages = keep_stages or scenario.output.dump_constellations
        self._tx: dict[str, _Transmitter] = {}
        self._span_cache: dict[tuple[str, float], DualPolWaveform] = {}
        self._lock = threading.Lock()
        check_scenario(scenario)

    # -- per-point link model ---------------------------------------------

    def launch_dbm(self, fmt: str, x_value: float) -> float:
        kind = self.scenario.kind
        if kind is ScenarioKind.LAUNCH_POWER_SWEEP:
            return x_value
        if kind is ScenarioKind.SPAN_LOSS_SWEEP:
            return self.scenario.link.launch_power_dbm[fmt]
        return B2B_LAUNCH_DBM

    def osnr_db(self, fmt: str, x_value: float) -> float:
        """OSNR at the receiver for one sweep value."""
        link = self.scenario.link
        kind = self.scenario.kind
        if kind is ScenarioKind.LAUNCH_POWER_SWEEP:
            return link.reference_osnr_db + (x_value - link.reference_launch_dbm)
        if kind is ScenarioKind.SPAN_LOSS_SWEEP:
            return link.baseline_osnr_db[fmt] - x_value
        return x_value

    def curve_x(self, fmt: str, x_value: float) -> float:
        """Curve abscissa: OSNR for span-loss sweeps, the sweep value otherwise."""
        if self.scenario.kind is ScenarioKind.SPAN_LOSS_SWEEP:
            return self.osnr_db(fmt, x_value)
        return x_value

    # -- transmitter and span ----------------------------------------------

    def transmitter(self, fmt: str) -> _Transmitter:
        with self._lock:
            if fmt not in self._tx:
                self._tx[fmt] = self._build_transmitter(fmt)
            return self._tx[fmt]

    def _build_transmitter(self, fmt: str) -> _Transmitter:
        link = self.scenario.link
        data = frame_bits(link.frame_order)
        if fmt == DPBPSK:
            coded = differential_encode_lanes(data, lanes=2).bits
            # The DAC replays the coded frame, so symbol 0 follows the last symbol
            pairs = coded.reshape(-1, 2)
            reference = BitStream((pairs ^ np.roll(pairs, 1, axis=0)).ravel())
        else:
            coded = data.bits
            reference = data
        symbols = np.tile(map_bits(codebook_for(fmt), coded), (link.frame_repeats, 1))
        return _Transmitter(data, reference, symbols)

    def launch_waveform(self, fmt: str, launch_dbm: float) -> DualPolWaveform:
        """Modulated record, propagated over the span when one is configured."""
        key = (fmt, launch_dbm)
        with self._lock:
            cached = self._span_cache.get(key)
        if cached is not None:
            return cached

        s = self.scenario
        tx = self.transmitter(fmt)
        drive = generate_drive(
            tx.drive_symbols, s.link.samples_per_symbol, s.link.dac_bandwidth_hz, s.symbol_rate
        )
        sig = modulate(drive, launch_dbm, s.link.center_wavelength_m)
        if s.fiber is not None:
            logger.info(f"Propagating {fmt} at {launch_dbm:.1f} dBm over {s.fiber.length_km} km")
            sig = ssfm_span(sig, s.fiber)
        with self._lock:
            self._span_cache.setdefault(key, sig)
        return sig

    # -- frames -----------------------------------------------------------

    def run_frame(self, fmt: str, point_index: int, frame_index: int) -> FrameOutcome:
        """Simulate one frame end to end, attributing failures to a stage."""
        s = self.scenario
        x_value = s.sweep_values[point_index]
        seed = frame_seed(s.base_seed, point_index, frame_index)
        rng = np.random.default_rng(seed)
        stage = "tx"
        try:
            tx = self.transmitter(fmt)
            stage = "fiber" if s.fiber is not None else "tx"
            sig = self.launch_waveform(fmt, self.launch_dbm(fmt, x_value))

            stage = "channel"
            imp = s.impairments
            angles = imp.jones_angles if imp.jones_angles is not None else random_jones_angles(rng)
            noise_seed, phase_seed = (int(v) for v in rng.integers(0, 2**31, size=2))
            sig = apply_jones_rotation(sig, angles)
            sig = apply_phase_noise(sig, imp.linewidth_total_hz, phase_seed)
            sig = apply_freq_offset(sig, imp.freq_offset_hz)
            sig = load_awgn_to_osnr(sig, self.osnr_db(fmt, x_value), s.symbol_rate, noise_seed)
            sig = optical_bpf(sig, imp.bpf_bandwidth_hz)
            sig = apply_timing_drift(sig, imp.ppm_offset)

            stage = "rxdsp"
            dsp = s.dsp
            if s.fiber is not None and dsp.cd_compensation_ps_nm is None:
                dsp = replace(dsp, cd_compensation_ps_nm=s.fiber.total_dispersion_ps_nm)
            keep = self.keep_stages and frame_index == 0
            try:
                rx = receive(sig, fmt, dsp, tx.reference_bits, keep_stages=keep)
                stage = "metrics"
                sync = synchronize(tx.reference_bits, rx.bits)
            except (AlignmentError, SyncError) as e:
                return self._unlocked_frame(fmt, point_index, frame_index, stage, e)
            point = count_ber(tx.reference_bits, rx.bits, sync.offset, sync.polarity)
        except HarnessError:
            raise
        except Exception as e:
            raise StageError(str(e), stage, fmt, point_index, frame_index) from e

        logger.debug(
            f"{fmt} point {point_index} frame {frame_index}: {point.errors}/{point.bits_counted}"
        )
        return FrameOutcome(
            fmt, point_index, frame_index, point.errors, point.bits_counted, rx.report, rx.stages
        )

    def _unlocked_frame(
        self, fmt: str, point_index: int, frame_index: int, stage: str, error: Exception
    ) -> FrameOutcome:
        """Count a frame the receiver could not lock onto as chance-level errors."""
        bits = len(self.transmitter(fmt).reference_bits)
        errors = bits // 2
        logger.warning(
            f"[{stage}] {fmt} point {point_index} frame {frame_index}: {error}; "
            f"counted as {errors}/{bits} errors"
        )
        report = DspReport(mode=self.scenario.dsp.mode, lock_failure=f"[{stage}] {error}")
        return FrameOutcome(fmt, point_index, frame_index, errors, bits, report)

    def _prepare_spans(self) -> None:
        if self.scenario.fiber is None:
            return
        keys = sorted(
            {
                (fmt, self.launch_dbm(fmt, x))
                for fmt in self.scenario.formats
                for x in self.scenario.sweep_values
            }
        )
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            list(pool.map(lambda key: self.launch_waveform(*key), keys))

    def run(self) -> RunResult:
        """Run every (format, point, frame) work item and assemble the result."""
        s = self.scenario
        started = time.monotonic()
        logger.info(
            f"Running scenario '{s.name}' ({s.kind.value}): {len(s.sweep_values)} points x "
            f"{s.frames_per_point} frames x {len(s.formats)} formats, {self.workers} workers"
        )
        self._prepare_spans()

        items = [
            (fmt, p, f)
            for fmt in s.formats
            for p in range(len(s.sweep_values))
            for f in range(s.frames_per_point)
        ]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            outcomes = list(pool.map(lambda item: self.run_frame(*item), items))

        outcomes.sort(key=lambda o: (s.formats.index(o.fmt), o.point_index, o.frame_index))
        formats = {fmt: self._assemble(fmt, [o for o in outcomes if o.fmt == fmt]) for fmt in s.formats}
        stage_dumps = {
            f"{o.fmt}_p{o.point_index}_{stage}": pair
            for o in outcomes
            for stage, pair in o.stages.items()
        }

        wall = time.monotonic() - started
        logger.info(f"Scenario '{s.name}' finished in {wall:.1f}s")
        return RunResult(s, formats, wall_time_s=wall, stage_dumps=stage_dumps)

    def _assemble(self, fmt: str, outcomes: list[FrameOutcome]) -> FormatResult:
        s = self.scenario
        cb = codebook_for(fmt)
        points: list[BerPoint] = []
        osnrs: list[float] = []
        theory: list[float] = []
        diagnostics: list[list[DspReport]] = []
        for p, x_value in enumerate(s.sweep_values):
            frames = [o for o in outcomes if o.point_index == p]
            point = merge_points(
                [BerPoint.from_counts(x_value, o.errors, o.bits_counted) for o in frames],
                self.curve_x(fmt, x_value),
            )
            osnr = self.osnr_db(fmt, x_value)
            sigma = osnr_to_sigma(osnr, s.symbol_rate, cb)
            points.append(point)
            osnrs.append(osnr)
            theory.append(theory_ber(cb, sigma, differential=fmt == DPBPSK))
            diagnostics.append([o.report for o in frames])
            logger.info(
                f"{fmt} x={x_value:g} (OSNR {osnr:.2f} dB): BER {point.ber:.3e} "
                f"({point.errors}/{point.bits_counted})"
            )
            if point.low_confidence:
                logger.warning(f"{fmt} x={x_value:g}: only {point.errors} errors, low confidence")

        order = np.argsort([pt.x_value for pt in points], kind="stable")
        points = [points[i] for i in order]
        osnrs = [osnrs[i] for i in order]
        theory = [theory[i] for i in order]
        diagnostics = [diagnostics[i] for i in order]

        curve = BerCurve(tuple(points))
        required = None
        try:
            curve = fit_curve(points, s.output.regression_domain)
            if s.kind is not ScenarioKind.LAUNCH_POWER_SWEEP:
                required = required_osnr(curve, s.output.target_ber)
        except FitError as e:
            logger.warning(f"{fmt}: no regression ({e})")
        return FormatResult(fmt, curve, osnrs, theory, diagnostics, required)


def _expect_kind(s: Scenario, kind: ScenarioKind) -> None:
    if s.kind is not kind:
        raise HarnessError(f"Scenario '{s.name}' is {s.kind.value}, expected {kind.value}")


def run_back_to_back(s: Scenario, workers: int = 1, keep_stages: bool = False) -> RunResult:
    """OSNR sweep without fiber."""
    _expect_kind(s, ScenarioKind.BACK_TO_BACK)
    return ScenarioRunner(s, workers, keep_stages).run()


def run_launch_power_sweep(s: Scenario, workers: int = 1, keep_stages: bool = False) -> RunResult:
    """Launch power sweep over the span with OSNR tracking launch power."""
    _expect_kind(s, ScenarioKind.LAUNCH_POWER_SWEEP)
    return ScenarioRunner(s, workers, keep_stages).run()


def run_span_loss_sweep(s: Scenario, workers: int = 1, keep_stages: bool = False) -> RunResult:
    """Added span loss at fixed launch power, derating the baseline OSNR dB for dB."""
    _expect_kind(s, ScenarioKind.SPAN_LOSS_SWEEP)
    return ScenarioRunner(s, workers, keep_stages).run()


_RUNNERS: dict[ScenarioKind, Callable[[Scenario, int, bool], RunResult]] = {
    ScenarioKind.BACK_TO_BACK: run_back_to_back,
    ScenarioKind.LAUNCH_POWER_SWEEP: run_launch_power_sweep,
    ScenarioKind.SPAN_LOSS_SWEEP: run_span_loss_sweep,
}


def run_scenario(s: Scenario, workers: int = 1, keep_stages: bool = False) -> RunResult:
    """Dispatch on the scenario kind."""
    return _RUNNERS[s.kind](s, workers, keep_stages)


def write_outputs(result: RunResult, out_dir: Path, dump_constellations: bool = False) -> list[Path]:
    """Write per-format CSV curves, result.json and optional stage dumps."""
    out_dir = Path(out_dir)
    written = []
    for fmt, fr in result.formats.items():
        written.append(write_curve_csv(fr.curve, out_dir / curve_filename(result.scenario.name, fmt)))
    written.append(write_result_json(result.to_dict(), out_dir / "result.json"))
    if dump_constellations or result.scenario.output.dump_constellations:
        for label, (x, y) in sorted(result.stage_dumps.items()):
            written.append(
                dump_constellation(x, y, out_dir / "constellations" / f"{result.scenario.name}_{label}.bin")
            )
    return written


def theory_table(
    fmt: str,
    osnr_values: list[float],
    symbol_rate: float = 16e9,
    mc_symbols: int = 0,
    seed: int = 1,
) -> list[dict[str, float]]:
    """Union-bound and optional Monte-Carlo BER at each OSNR."""
    cb = codebook_for(fmt)
    differential = fmt == DPBPSK
    rows = []
    for i, osnr in enumerate(osnr_values):
        sigma = osnr_to_sigma(osnr, symbol_rate, cb)
        row = {
            "osnr_db": float(osnr),
            "sigma": sigma.sigma,
            "union_bound_ber": union_bound_ber(cb, sigma) if sigma.sigma > 0 else 0.0,
            "theory_ber": theory_ber(cb, sigma, differential),
        }
        if mc_symbols > 0:
            row["mc_ber"], _ = mc_ber_awgn(cb, sigma, mc_symbols, seed + i, differential)
        rows.append(row)
    return rows


def codebook_summary(fmt: str) -> dict[str, Any]:
    """Points and figures of merit of one format."""
    cb = codebook_for(fmt)
    other = dpbpsk_codebook() if fmt != DPBPSK else simplex_codebook()
    return {
        "name": cb.name,
        "points": [(label, tuple(float(v) for v in point)) for label, point in zip(cb.labels, cb.points)],
        "d_min": min_distance(cb),
        "p_avg": avg_power(cb),
        "gain_db": asymptotic_gain_db(cb, other),
        "versus": other.name,
    }


@dataclass
class SelftestCheck:
    name: str
    passed: bool
    detail: str


def _check(name: str, fn: Callable[[], tuple[bool, str]]) -> SelftestCheck:
    try:
        passed, detail = fn()
    except Exception as e:
        passed, detail = False, f"{type(e).__name__}: {e}"
    logger.info(f"selftest {name}: {'ok' if passed else 'FAILED'} ({detail})")
    return SelftestCheck(name, passed, detail)


def _check_geometry() -> tuple[bool, str]:
    s, d = simplex_codebook(), dpbpsk_codebook()
    gain = asymptotic_gain_db(s, d)
    ok = (
        abs(min_distance(s) - math.sqrt(8.0)) < 1e-12
        and abs(avg_power(s) - 3.0) < 1e-12
        and abs(min_distance(d) - 2.0) < 1e-12
        and abs(avg_power(d) - 2.0) < 1e-12
        and abs(gain - 1.2494) < 1e-4
    )
    return ok, f"gain {gain:.4f} dB"


def _check_de_bruijn() -> tuple[bool, str]:
    seq = de_bruijn_sequence(11).bits
    ext = np.concatenate([seq, seq[:10]])
    words = np.lib.stride_tricks.sliding_window_view(ext, 11) @ (1 << np.arange(10, -1, -1))
    unique = np.unique(words).size
    return seq.size == 2048 and unique == 2048, f"{unique} unique windows"


def _check_mc() -> tuple[bool, str]:
    cb = dpbpsk_codebook()
    n = 200_000
    ber, _ = mc_ber_awgn(cb, 0.5, n, seed=7)
    expected = float(gaussian_q(1.0 / 0.5))
    std = math.sqrt(expected * (1 - expected) / (2 * n))
    return abs(ber - expected) < 4 * std + 1e-3 * expected, f"mc {ber:.4e} vs {expected:.4e}"


def _check_cd_inverse() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    sig = DualPolWaveform(
        rng.normal(size=4096) + 1j * rng.normal(size=4096),
        rng.normal(size=4096) + 1j * rng.normal(size=4096),
        sample_rate=64e9,
        symbol_rate=16e9,
    )
    back = cd_compensate(apply_cd(sig, 4950.0), 4950.0)
    err = float(np.linalg.norm(back.ex - sig.ex) / np.linalg.norm(sig.ex))
    return err < 1e-6, f"relative RMS {err:.2e}"


def _clean_scenario(mode: DspMode, seed: int) -> Scenario:
    return Scenario(
        name="selftest",
        kind=ScenarioKind.BACK_TO_BACK,
        sweep_values=[40.0],
        frames_per_point=1,
        base_seed=seed,
        link=LinkConfig(),
        dsp=ReceiverConfig(mode=mode),
    )


def _check_chain(mode: DspMode) -> Callable[[], tuple[bool, str]]:
    def check() -> tuple[bool, str]:
        result = ScenarioRunner(_clean_scenario(mode, 11)).run()
        errors = {fmt: r.curve.points[0].errors for fmt, r in result.formats.items()}
        return all(e == 0 for e in errors.values()), f"errors {errors}"

    return check


def _check_determinism() -> tuple[bool, str]:
    a = ScenarioRunner(_clean_scenario(DspMode.IDEAL, 5), workers=1).run().to_dict()
    b = ScenarioRunner(_clean_scenario(DspMode.IDEAL, 5), workers=2).run().to_dict()
    return a == b, "identical" if a == b else "results differ"


def run_selftest() -> list[SelftestCheck]:
    """Invariant checks that run in seconds."""
    return [
        _check("codebook geometry", _check_geometry),
        _check("de Bruijn windows", _check_de_bruijn),
        _check("Monte-Carlo vs theory", _check_mc),
        _check("CD inverse", _check_cd_inverse),
        _check("ideal chain identity", _check_chain(DspMode.IDEAL)),
        _check("blind chain identity", _check_chain(DspMode.BLIND)),
        _check("determinism", _check_determinism),
    ]
