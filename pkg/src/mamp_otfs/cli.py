"""Command-line entry point: ``simulate --config cfg.json --snr 0:16:4 ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import (
    DETECTORS,
    SimConfig,
    count_complexity,
    run_ber_sweep,
    run_convergence_trace,
    write_complexity,
    write_plot_data,
    write_results,
    write_trace,
)

logger = logging.getLogger("mamp_otfs")

_DETECTOR_ALIASES = {"oamp_vamp": "oamp", "map_oracle": "map"}


def parse_snr(text: str) -> list[float]:
    """``a:b:step`` (inclusive of b), or a comma-separated list."""
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise argparse.ArgumentTypeError(f"bad SNR range {text!r}; expected a:b:step with step > 0")
        a, b, step = parts
        n = int(np.floor((b - a) / step + 1e-9)) + 1
        return [round(a + i * step, 10) for i in range(n)]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None


def parse_detectors(text: str) -> list[str]:
    names = [_DETECTOR_ALIASES.get(p.strip(), p.strip()) for p in text.split(",") if p.strip()]
    bad = [n for n in names if n not in DETECTORS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown detector(s) {bad}; choose from {', '.join(DETECTORS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simulate",
        description="Monte-Carlo BER simulation of uplink MIMO-OTFS SCMA detectors.",
    )
    p.add_argument("--config", type=Path, help="JSON file with SimConfig fields")
    p.add_argument("--detector", type=parse_detectors,
                   help="comma-separated subset of: " + ", ".join(DETECTORS))
    p.add_argument("--snr", type=parse_snr, help="SNR grid in dB, a:b:step or a,b,c")
    p.add_argument("--frames", type=int, help="frames per SNR point")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--trace-iterations", action="store_true",
                   help="also write per-iteration BER for each damping length (trace.csv)")
    p.add_argument("--complexity", action="store_true",
                   help="also write multiply counts of one detection (complexity.csv)")
    p.add_argument("--no-timing", action="store_true",
                   help="write wall_time_s = 0 so repeated runs give identical files")
    p.add_argument("--append", action="store_true", help="merge into an existing results.csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = SimConfig.from_json(args.config) if args.config else SimConfig()
        overrides = {}
        if args.detector:
            overrides["detectors"] = args.detector
        if args.snr:
            overrides["snr_db"] = args.snr
        if args.frames is not None:
            overrides["frames"] = args.frames
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = str(args.out)
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.no_timing:
            overrides["record_timing"] = False
        if overrides:
            config = config.replace(**overrides)
    except (OSError, ValueError, TypeError) as exc:
        print(f"simulate: invalid configuration: {exc}", file=sys.stderr)
        return 2

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = run_ber_sweep(config)
    records = write_results(records, out / "results.csv", append=args.append)
    write_plot_data(records, out / "results_plot.json")
    for r in records:
        lo, hi = r.wilson()
        print(f"{r.detector:6s} {r.snr_db:6.2f} dB  BER {r.ber:.3e}  [{lo:.2e}, {hi:.2e}]  "
              f"({r.bit_errors}/{r.bits})")
    if args.trace_iterations:
        write_trace(run_convergence_trace(config), out / "trace.csv")
    if args.complexity:
        report = count_complexity(config)
        write_complexity(report, out / "complexity.csv")
        print(f"complexity: {report['multiplies_per_iteration']:.4g} multiplies/iteration, "
              f"{report['ratio']:.3f} x analytical estimate")
    return 0


if __name__ == "__main__":
    sys.exit(main())
