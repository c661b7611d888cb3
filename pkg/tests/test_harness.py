"""Tests for the scenario engine."""

import math
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from simplexlink.config import Scenario
from simplexlink.harness import (
    HarnessError,
    ScenarioRunner,
    StageError,
    check_scenario,
    codebook_summary,
    frame_seed,
    optimum_launch,
    run_back_to_back,
    run_launch_power_sweep,
    run_scenario,
    run_span_loss_sweep,
    theory_table,
    write_outputs,
)
from simplexlink.metrics import BerCurve, BerPoint
from simplexlink.rxdsp import AlignmentError
from simplexlink.txchain import frame_bits


def _scenario(**overrides) -> Scenario:
    data = {
        "name": "test",
        "kind": "back_to_back",
        "sweep_values": [40.0],
        "frames_per_point": 1,
        "dsp": {"mode": "ideal"},
    }
    data.update(overrides)
    return Scenario.from_dict(data)


class TestSeedsAndLinkModel:
    """Tests for per-frame seeds and the sweep to OSNR mapping."""

    def test_frame_seed(self) -> None:
        """Seeds step by 1000 per point and 1 per frame."""
        assert frame_seed(1, 0, 0) == 1
        assert frame_seed(1, 2, 3) == 2004
        assert frame_seed(50, 1, 999) == 2049

    def test_back_to_back_sweeps_osnr(self) -> None:
        """Back-to-back sweep values are OSNR values."""
        runner = ScenarioRunner(_scenario())
        assert runner.osnr_db("simplex3d", 7.5) == 7.5
        assert runner.curve_x("dpbpsk", 7.5) == 7.5
        assert runner.launch_dbm("simplex3d", 7.5) == 0.0

    def test_span_loss_derates_baseline(self) -> None:
        """Each dB of added span loss costs one dB of OSNR."""
        runner = ScenarioRunner(_scenario(kind="span_loss_sweep", sweep_values=[0.0, 2.0, 4.0]))
        assert runner.osnr_db("dpbpsk", 4.0) == pytest.approx(9.9)
        assert runner.osnr_db("simplex3d", 4.0) == pytest.approx(8.9)
        assert runner.curve_x("dpbpsk", 4.0) == pytest.approx(9.9)
        assert runner.launch_dbm("simplex3d", 4.0) == 16.0
        assert runner.launch_dbm("dpbpsk", 4.0) == 17.0

    def test_launch_sweep_tracks_power(self) -> None:
        """OSNR follows launch power from the reference point."""
        runner = ScenarioRunner(
            _scenario(kind="launch_power_sweep", sweep_values=[14.0, 20.0], fiber={})
        )
        assert runner.osnr_db("simplex3d", 20.0) == pytest.approx(16.9)
        assert runner.launch_dbm("simplex3d", 20.0) == 20.0
        assert runner.curve_x("simplex3d", 20.0) == 20.0


class TestTransmitter:
    """Tests for the cached transmit record."""

    def test_simplex_reference_is_frame(self) -> None:
        """Simplex symbols carry the frame bits directly."""
        runner = ScenarioRunner(_scenario())
        tx = runner.transmitter("simplex3d")
        assert np.array_equal(tx.reference_bits.bits, frame_bits(11).bits)
        assert tx.drive_symbols.shape == (4 * 2048, 4)

    def test_dpbpsk_cyclic_reference(self) -> None:
        """Replaying the coded frame decodes back to the frame bits."""
        runner = ScenarioRunner(_scenario())
        tx = runner.transmitter("dpbpsk")
        assert np.array_equal(tx.reference_bits.bits, tx.data_bits.bits)

    def test_transmitter_cached(self) -> None:
        """The record is built once per format."""
        runner = ScenarioRunner(_scenario())
        assert runner.transmitter("simplex3d") is runner.transmitter("simplex3d")


class TestRecordChecks:
    """Tests for run preconditions."""

    def test_short_blind_record_raises(self) -> None:
        """The equalizer needs room to converge before counting."""
        with pytest.raises(HarnessError, match="frame_repeats"):
            ScenarioRunner(
                _scenario(dsp={"mode": "blind"}, link={"frame_order": 8, "frame_repeats": 1})
            )

    def test_check_scenario_without_runner(self) -> None:
        """The record check runs standalone and passes ideal-mode records."""
        check_scenario(_scenario(dsp={"mode": "ideal"}, link={"frame_order": 8, "frame_repeats": 2}))
        with pytest.raises(HarnessError, match="usable symbols"):
            check_scenario(_scenario(dsp={"mode": "blind"}, link={"frame_repeats": 1}))

    def test_wrong_kind_raises(self) -> None:
        """Kind-specific runners reject other kinds."""
        with pytest.raises(HarnessError, match="back_to_back"):
            run_launch_power_sweep(_scenario())
        with pytest.raises(HarnessError):
            run_span_loss_sweep(_scenario())

    def test_stage_attribution(self) -> None:
        """A failing receiver is reported with stage, format, point and frame."""
        runner = ScenarioRunner(_scenario(sweep_values=[10.0, 20.0]))
        with patch("simplexlink.harness.receive", side_effect=RuntimeError("boom")):
            with pytest.raises(StageError) as exc_info:
                runner.run_frame("dpbpsk", 1, 2)
        error = exc_info.value
        assert (error.stage, error.fmt, error.point, error.frame) == ("rxdsp", "dpbpsk", 1, 2)
        assert "boom" in str(error)

    def test_unlocked_frame_is_counted(self) -> None:
        """A frame that fails alignment counts as chance-level errors."""
        runner = ScenarioRunner(_scenario(sweep_values=[10.0, 20.0]))
        failure = AlignmentError("Best parity score 0.512 below 0.75")
        with patch("simplexlink.harness.receive", side_effect=failure):
            outcome = runner.run_frame("simplex3d", 1, 0)
        bits = len(runner.transmitter("simplex3d").reference_bits)
        assert outcome.bits_counted == bits
        assert outcome.errors == bits // 2
        assert "parity score" in outcome.report.lock_failure
        assert outcome.report.to_dict()["lock_failure"].startswith("[rxdsp]")


class TestBackToBack:
    """Tests for back-to-back runs."""

    def test_high_osnr_is_error_free(self) -> None:
        """At 40 dB OSNR the ideal chain makes no errors."""
        result = run_back_to_back(_scenario())
        for fmt in ("simplex3d", "dpbpsk"):
            point = result.formats[fmt].curve.points[0]
            assert point.errors == 0
            assert point.bits_counted >= 2 * 2048

    def test_dispatch(self) -> None:
        """run_scenario picks the runner for the kind."""
        result = run_scenario(_scenario(formats=["simplex3d"]))
        assert list(result.formats) == ["simplex3d"]
        assert result.osnr_gain() is None

    @pytest.mark.timeout(120)
    def test_results_independent_of_workers(self, temp_output_dir: Path) -> None:
        """The same seeds give identical results with 1 or 3 workers."""
        scenario = _scenario(sweep_values=[7.0, 8.0], frames_per_point=3)
        a = ScenarioRunner(scenario, workers=1).run()
        b = ScenarioRunner(scenario, workers=3).run()
        assert a.to_dict() == b.to_dict()

        files_a = write_outputs(a, temp_output_dir / "a")
        files_b = write_outputs(b, temp_output_dir / "b")
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes()

    @pytest.mark.timeout(240)
    @pytest.mark.parametrize("symbol_rate", [16e9, 25e9])
    def test_simplex_gain_over_dpbpsk(self, symbol_rate: float) -> None:
        """Simplex needs about 1.24 dB less OSNR than differential DP-BPSK at 1e-3."""
        shift = 10 * math.log10(symbol_rate / 16e9)
        base = {
            "symbol_rate": symbol_rate,
            "frames_per_point": 12,
            "link": {"dac_bandwidth_hz": None},
            "impairments": {"bpf_bandwidth_hz": None},
        }
        simplex = run_back_to_back(
            _scenario(
                formats=["simplex3d"],
                sweep_values=[round(v + shift, 3) for v in (6.2, 6.7, 7.2, 7.7, 8.2)],
                **base,
            )
        )
        dpbpsk = run_back_to_back(
            _scenario(
                formats=["dpbpsk"],
                sweep_values=[round(v + shift, 3) for v in (7.45, 7.95, 8.45, 8.95, 9.45)],
                **base,
            )
        )
        gain = (
            dpbpsk.formats["dpbpsk"].required.osnr_db
            - simplex.formats["simplex3d"].required.osnr_db
        )
        assert 1.0 <= gain <= 1.35

        fr = simplex.formats["simplex3d"]
        for point, theory in zip(fr.curve.points, fr.theory):
            if point.errors >= 50:
                assert abs(math.log10(point.ber / theory)) < 0.3

    def test_stage_dumps(self, temp_output_dir: Path) -> None:
        """Constellation dumps are written per format, point and stage."""
        result = ScenarioRunner(_scenario(formats=["simplex3d"]), keep_stages=True).run()
        assert "simplex3d_p0_aligned" in result.stage_dumps

        written = write_outputs(result, temp_output_dir, dump_constellations=True)
        names = {p.name for p in written}
        assert "test_simplex3d.csv" in names
        assert "result.json" in names
        assert "test_simplex3d_p0_aligned.bin" in names


class TestSweeps:
    """Tests for span-loss and launch power sweeps."""

    @pytest.mark.timeout(120)
    def test_span_loss_matches_back_to_back(self) -> None:
        """A span-loss point equals the back-to-back point at the same OSNR."""
        span = _scenario(
            kind="span_loss_sweep", formats=["simplex3d"], sweep_values=[5.0, 6.0], frames_per_point=2
        )
        runner = ScenarioRunner(span)
        osnrs = [runner.osnr_db("simplex3d", x) for x in span.sweep_values]
        span_result = runner.run()
        b2b_result = run_back_to_back(
            _scenario(formats=["simplex3d"], sweep_values=osnrs, frames_per_point=2)
        )

        a = span_result.formats["simplex3d"].curve.points
        b = b2b_result.formats["simplex3d"].curve.points
        assert [p.x_value for p in a] == [p.x_value for p in b]
        assert [p.errors for p in a] == [p.errors for p in b]
        assert span_result.formats["simplex3d"].required is not None

    @pytest.mark.timeout(180)
    def test_linear_launch_sweep_improves(self) -> None:
        """Without nonlinearity more launch power only helps."""
        scenario = _scenario(
            kind="launch_power_sweep",
            formats=["simplex3d"],
            sweep_values=[15.0, 16.5, 18.0],
            frames_per_point=2,
            fiber={"length_km": 50.0, "gamma_per_w_km": 0.0},
            link={"reference_osnr_db": 8.0},
        )
        result = run_launch_power_sweep(scenario)
        bers = result.formats["simplex3d"].curve.bers
        assert bers[0] > bers[1] >= bers[2]
        assert result.formats["simplex3d"].required is None
        assert result.to_dict()["optimum_launch_dbm"]["simplex3d"] == 18.0

    @pytest.mark.timeout(600)
    def test_nonlinear_launch_sweep_has_interior_optimum(self) -> None:
        """Over 300 km the BER falls with power, bottoms out, then rises again."""
        scenario = _scenario(
            kind="launch_power_sweep",
            sweep_values=[10.0, 13.0, 16.0, 19.0, 22.0, 25.0, 28.0],
            frames_per_point=2,
            fiber={},
            link={"reference_osnr_db": 10.0},
        )
        result = run_launch_power_sweep(scenario, workers=2)

        optima = result.to_dict()["optimum_launch_dbm"]
        for fmt in ("simplex3d", "dpbpsk"):
            bers = result.formats[fmt].curve.bers
            best = int(np.argmin(bers))
            assert 0 < best < len(bers) - 1
            assert bers[0] > bers[best]
            assert bers[-1] > bers[best]
            assert optima[fmt] == scenario.sweep_values[best]
        assert optima["simplex3d"] <= optima["dpbpsk"]

    def test_optimum_launch(self) -> None:
        """The optimum is the point with the lowest BER."""
        curve = BerCurve(
            (
                BerPoint.from_counts(12.0, 40, 1000),
                BerPoint.from_counts(16.0, 5, 1000),
                BerPoint.from_counts(20.0, 30, 1000),
            )
        )
        assert optimum_launch(curve) == 16.0


class TestTheoryAndCodebook:
    """Tests for theory tables and codebook summaries."""

    def test_theory_table(self) -> None:
        """Rows hold sigma, bound and reference BER, falling with OSNR."""
        rows = theory_table("simplex3d", [6.0, 7.16, 9.0])
        assert [r["osnr_db"] for r in rows] == [6.0, 7.16, 9.0]
        assert rows[1]["theory_ber"] == pytest.approx(1e-3, rel=0.1)
        assert rows[0]["theory_ber"] > rows[1]["theory_ber"] > rows[2]["theory_ber"]
        assert "mc_ber" not in rows[0]

    def test_dpbpsk_theory_is_differential(self) -> None:
        """DP-BPSK reference BER includes differential error doubling."""
        row = theory_table("dpbpsk", [8.0])[0]
        p = row["union_bound_ber"]
        assert row["theory_ber"] == pytest.approx(2 * p * (1 - p))

    def test_theory_table_monte_carlo(self) -> None:
        """Monte-Carlo BER agrees with the bound at moderate SNR."""
        row = theory_table("simplex3d", [6.0], mc_symbols=50_000)[0]
        assert row["mc_ber"] == pytest.approx(row["theory_ber"], rel=0.35)

    def test_codebook_summary(self) -> None:
        """Simplex reports D_min = 2 sqrt(2), P_avg = 3 and 1.2494 dB gain."""
        summary = codebook_summary("simplex3d")
        assert summary["d_min"] == pytest.approx(math.sqrt(8.0))
        assert summary["p_avg"] == pytest.approx(3.0)
        assert summary["gain_db"] == pytest.approx(1.2494, abs=1e-4)
        assert len(summary["points"]) == 4
        assert summary["versus"] == codebook_summary("dpbpsk")["name"]

    def test_dpbpsk_summary_is_negative_gain(self) -> None:
        """DP-BPSK trails simplex by the same margin."""
        assert codebook_summary("dpbpsk")["gain_db"] == pytest.approx(-1.2494, abs=1e-4)
