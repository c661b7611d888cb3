"""Entry point for SimplexLink."""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError
from .constellation import FORMATS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UsageError(Exception):
    """Raised for invalid command-line arguments."""

    pass


def setup_logging(verbose: bool = False) -> None:
    """Log to stderr so command output on stdout stays machine-readable."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )


def add_file_log(out_dir: Path) -> None:
    """Mirror log records to ``<out_dir>/simplexlink.log``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "simplexlink.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)


def parse_osnr_range(text: str) -> list[float]:
    """Parse ``a:b:step`` into an inclusive, increasing OSNR grid."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise UsageError(f"--osnr-range must be a:b or a:b:step, got '{text}'")
    try:
        start, stop = float(parts[0]), float(parts[1])
        step = float(parts[2]) if len(parts) == 3 else 1.0
    except ValueError as e:
        raise UsageError(f"--osnr-range has a non-numeric value: '{text}'") from e
    if start > stop:
        raise UsageError(f"--osnr-range start {start:g} is above stop {stop:g}")
    if step <= 0:
        raise UsageError(f"--osnr-range step must be > 0, got {step:g}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(count)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simplexlink",
        description="SimplexLink - 3D-Simplex vs DP-BPSK coherent link simulator",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Execute a scenario file")
    run.add_argument("config", type=Path, help="Scenario YAML file")
    run.add_argument("--out", type=Path, default=None, help="Output directory")
    run.add_argument("--workers", type=int, default=1, help="Parallel frame workers")
    run.add_argument(
        "--dump-constellations",
        action="store_true",
        help="Write per-stage symbol dumps of the first frame of every point",
    )

    theory = sub.add_parser("theory", help="Print reference BER curves")
    theory.add_argument("--format", required=True, choices=FORMATS)
    theory.add_argument("--osnr-range", required=True, help="a:b[:step] in dB")
    theory.add_argument("--symbol-rate", type=float, default=16e9)
    theory.add_argument("--mc-symbols", type=int, default=0, help="Monte-Carlo symbols per point")
    theory.add_argument("--seed", type=int, default=1)

    codebook = sub.add_parser("codebook", help="Print codebook points and figures of merit")
    codebook.add_argument("--format", required=True, choices=FORMATS)

    sub.add_parser("selftest", help="Run the invariant checks")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    from .config import load_scenario
    from .harness import check_scenario, run_scenario, write_outputs

    if args.workers < 1:
        raise UsageError(f"--workers must be >= 1, got {args.workers}")
    scenario = load_scenario(args.config)
    check_scenario(scenario)
    out_dir = args.out if args.out is not None else scenario.output.path
    add_file_log(out_dir)

    result = run_scenario(scenario, workers=args.workers, keep_stages=args.dump_constellations)
    written = write_outputs(result, out_dir, dump_constellations=args.dump_constellations)
    for fmt, fr in result.formats.items():
        if fr.required is not None:
            print(f"{fmt}: required OSNR @ {fr.required.target_ber:g} = {fr.required.osnr_db:.2f} dB")
    gain = result.osnr_gain()
    if gain is not None:
        print(f"simplex3d gain over dpbpsk: {gain:.2f} dB")
    print(f"Wrote {len(written)} files to {out_dir}")
    return EXIT_OK


def _cmd_theory(args: argparse.Namespace) -> int:
    from .harness import theory_table

    osnrs = parse_osnr_range(args.osnr_range)
    rows = theory_table(args.format, osnrs, args.symbol_rate, args.mc_symbols, args.seed)
    columns = list(rows[0])
    print(",".join(columns))
    for row in rows:
        print(",".join(repr(float(row[c])) for c in columns))
    return EXIT_OK


def _cmd_codebook(args: argparse.Namespace) -> int:
    from .harness import codebook_summary

    summary = codebook_summary(args.format)
    print(f"{summary['name']}: label -> (Ix, Qx, Iy, Qy)")
    for label, point in summary["points"]:
        bits = "".join(str(b) for b in label)
        print(f"  {bits} -> ({', '.join(f'{v:+g}' for v in point)})")
    print(f"D_min={summary['d_min']:.4f}")
    print(f"P_avg={summary['p_avg']:g}")
    print(f"gain-vs-{summary['versus']} {summary['gain_db']:.4f} dB")
    return EXIT_OK


def _cmd_selftest(args: argparse.Namespace) -> int:
    from .harness import run_selftest

    checks = run_selftest()
    for check in checks:
        print(f"[{'PASS' if check.passed else 'FAIL'}] {check.name}: {check.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAILURE


COMMANDS = {
    "run": _cmd_run,
    "theory": _cmd_theory,
    "codebook": _cmd_codebook,
    "selftest": _cmd_selftest,
}


def cli_main(argv: list[str] | None = None) -> int:
    """Run one CLI command and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> int:
    """Main entry point."""
    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
