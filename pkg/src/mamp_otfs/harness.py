"""Monte-Carlo BER driver, convergence traces, complexity accounting and result files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from statsmodels.stats.proportion import proportion_confint

from . import baselines
from .channel import (
    ChannelConfig,
    apply_time_domain,
    assemble_effective,
    cp_length,
    expected_rx_power,
    sample_paths,
)
from .mamp import DetectorConfig, detect, explicit_b, prepare_spectrum, scale_columns
from .otfs import append_cp, demodulate, modulate, strip_cp, vec
from .scma import (
    GridPlacement,
    ScmaCodebook,
    build_default_codebook,
    demap,
    load_codebook,
    map_bits,
    place_on_grid,
)

logger = logging.getLogger(__name__)

__all__ = [
    "DETECTORS",
    "CSV_HEADER",
    "SimConfig",
    "BerRecord",
    "Frame",
    "generate_frame",
    "noise_variance",
    "run_detector",
    "run_ber_sweep",
    "run_convergence_trace",
    "count_complexity",
    "wilson_interval",
    "write_results",
    "read_results",
    "write_plot_data",
    "write_trace",
    "write_complexity",
]

DETECTORS = ("mamp", "lmmse", "oamp", "map")
CSV_HEADER = [
    "config_hash", "snr_db", "detector", "frames", "bits", "bit_errors",
    "ber", "mean_iterations", "wall_time_s", "matvec_count",
]


@dataclass
class SimConfig:
    """Everything needed to reproduce a BER experiment.

    ``snr_definition`` is ``"snr"`` (received signal power per antenna over
    noise variance) or ``"ebn0"`` (energy per information bit over N0).
    """

    M: int = 32
    N: int = 16
    U: int = 4
    J: int = 6
    K: int = 4
    Q: int = 4
    D: int = 2
    subcarrier_spacing: float = 15e3
    carrier_frequency: float = 4e9
    velocity_kmh: float = 300.0
    max_doppler: float | None = None
    rolloff: float = 0.4
    delays: list = field(default_factory=lambda: [float(d) for d in np.linspace(0.0, 5e-6, 6)])
    powers: list | None = None
    decay_time: float = 1e-6
    max_timing_offset: float = 0.0
    q_threshold: float | None = 1e-3
    rc_span: int = 8
    placement_axis: str = "delay"
    allow_shared_supports: bool = False
    codebook_path: str | None = None
    snr_db: list = field(default_factory=lambda: [0.0, 4.0, 8.0, 12.0, 16.0])
    snr_definition: str = "snr"
    frames: int = 100
    seed: int = 2024
    detectors: list = field(default_factory=lambda: ["mamp"])
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    oamp_iterations: int = 6
    oamp_damping: float = 0.7
    trace_damping_lengths: list = field(default_factory=lambda: [1, 2, 3, 4])
    workers: int = 1
    record_timing: bool = True
    out_dir: str = "results"

    def __post_init__(self):
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        if self.M % self.K or self.N % self.K:
            raise ValueError(f"M={self.M} and N={self.N} must be multiples of K={self.K}")
        if self.frames < 1:
            raise ValueError("frames must be at least 1")
        if not self.snr_db:
            raise ValueError("SNR grid is empty")
        self.snr_db = [float(s) for s in self.snr_db]
        unknown = set(self.detectors) - set(DETECTORS)
        if unknown or not self.detectors:
            raise ValueError(f"unknown detectors {sorted(unknown)}; choose from {DETECTORS}")
        if self.snr_definition not in ("snr", "ebn0"):
            raise ValueError(f"unknown snr_definition {self.snr_definition!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(obj) - names
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Digest of the physical and detector settings (not run logistics)."""
        d = self.to_dict()
        for key in ("snr_db", "frames", "detectors", "workers", "record_timing", "out_dir"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def channel_config(self) -> ChannelConfig:
        return ChannelConfig(
            subcarrier_spacing=self.subcarrier_spacing,
            carrier_frequency=self.carrier_frequency,
            velocity_kmh=self.velocity_kmh,
            max_doppler=self.max_doppler,
            delays=self.delays,
            powers=self.powers,
            decay_time=self.decay_time,
            rolloff=self.rolloff,
            q_threshold=self.q_threshold,
            max_timing_offset=self.max_timing_offset,
            rc_span=self.rc_span,
        )

    def codebook(self) -> ScmaCodebook:
        if self.codebook_path:
            cb = load_codebook(self.codebook_path)
            if (cb.K, cb.J, cb.Q, cb.D) != (self.K, self.J, self.Q, self.D):
                raise ValueError("codebook file dimensions disagree with the config")
            return cb
        return build_default_codebook(
            self.K, self.J, self.Q, self.D, allow_shared_supports=self.allow_shared_supports
        )

    def placement(self) -> GridPlacement:
        return GridPlacement(self.M, self.N, self.K, self.placement_axis)

    @property
    def n_rows(self) -> int:
        return self.U * self.M * self.N

    @property
    def n_cols(self) -> int:
        return self.M * self.N * self.J * self.D // self.K


@dataclass
class BerRecord:
    config_hash: str
    snr_db: float
    detector: str
    frames: int
    bits: int
    bit_errors: int
    ber: float
    mean_iterations: float
    wall_time_s: float
    matvec_count: int
    failed_frames: int = field(default=0, compare=False)

    def __post_init__(self):
        self.snr_db, self.ber = float(self.snr_db), float(self.ber)
        self.mean_iterations, self.wall_time_s = float(self.mean_iterations), float(self.wall_time_s)
        self.frames, self.bits, self.bit_errors = int(self.frames), int(self.bits), int(self.bit_errors)
        self.matvec_count = int(self.matvec_count)
        if self.bits and not math.isclose(self.ber, self.bit_errors / self.bits, rel_tol=1e-12):
            raise ValueError("ber must equal bit_errors / bits")
        if not 0 <= self.ber <= 1:
            raise ValueError(f"ber {self.ber} outside [0, 1]")

    def wilson(self, alpha: float = 0.05) -> tuple[float, float]:
        return wilson_interval(self.bit_errors, self.bits, alpha)

    def row(self) -> list:
        return [self.config_hash, repr(float(self.snr_db)), self.detector, int(self.frames),
                int(self.bits), int(self.bit_errors), repr(float(self.ber)),
                repr(float(self.mean_iterations)), repr(float(self.wall_time_s)),
                int(self.matvec_count)]


def wilson_interval(errors: int, trials: int, alpha: float = 0.05) -> tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    lo, hi = proportion_confint(errors, trials, alpha=alpha, method="wilson")
    return float(lo), float(hi)


@dataclass
class Frame:
    """One transmitted and received frame together with its effective model."""

    y: np.ndarray
    H: sp.csr_matrix
    noise_var: float
    indices: np.ndarray  # (J, slots) transmitted codeword indices
    bits: np.ndarray  # (J, slots * log2 Q)

    @property
    def slot_indices(self) -> np.ndarray:
        return self.indices.ravel()


def _streams(seed: int, snr_idx: int, frame_idx: int):
    ss = np.random.SeedSequence(seed, spawn_key=(snr_idx, frame_idx))
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def noise_variance(config: SimConfig, snr_db: float, rx_power: float, codebook: ScmaCodebook) -> float:
    snr = 10.0 ** (snr_db / 10.0)
    if config.snr_definition == "ebn0":
        # bits per received sample and antenna: J log2(Q) / K
        snr = snr * config.J * codebook.bits_per_codeword / config.K
    return rx_power / snr


def generate_frame(config: SimConfig, snr_db: float, snr_idx: int, frame_idx: int, *,
                   codebook: ScmaCodebook | None = None, noise_var: float | None = None) -> Frame:
    """Bits, SCMA mapping, OTFS with CP, doubly-selective channel, AWGN, demodulation.

    Draw order is bits, then channel, then noise, each from its own substream.
    """
    codebook = codebook or config.codebook()
    placement = config.placement()
    chan = config.channel_config()
    M, N, J = config.M, config.N, config.J
    bit_rng, chan_rng, noise_rng = _streams(config.seed, snr_idx, frame_idx)

    slots = placement.slots_per_user
    bits = bit_rng.integers(0, 2, size=(J, slots * codebook.bits_per_codeword), dtype=np.int8)
    indices = map_bits(bits, codebook)
    n_cp = cp_length(chan, M)
    tx = np.stack([
        append_cp(modulate(place_on_grid(indices[j], j, codebook, placement)), n_cp)
        for j in range(J)
    ])

    real = sample_paths(chan, M, N, config.U, J, chan_rng)
    if noise_var is None:
        noise_var = noise_variance(config, snr_db, expected_rx_power(chan, real, config.K), codebook)
    ys = []
    for u in range(config.U):
        taps = [real.taps(u, j, start=-n_cp, n_samples=M * N + n_cp) for j in range(J)]
        r = apply_time_domain(tx, taps, noise_var, noise_rng, cp_len=n_cp)
        ys.append(vec(demodulate(strip_cp(r, n_cp), M, N)))
    eff = assemble_effective(real.blocks(chan.q_threshold), codebook, placement)
    return Frame(np.concatenate(ys), eff.H, noise_var, indices, bits)


def run_detector(name: str, frame: Frame, codebook: ScmaCodebook, config: SimConfig,
                 det_config: DetectorConfig | None = None, spectrum=None) -> dict:
    """Decisions plus bookkeeping for one detector on one frame.

    Errors inside a detector mark the frame failed; its bits are then scored
    against all-zero decisions instead of aborting the run.
    """
    det_config = det_config or config.detector
    out = {"iterations": 1, "matvecs": 0, "failed": False, "iteration_decisions": None}
    try:
        if name == "mamp":
            if spectrum is None:
                spectrum = prepare_spectrum(frame.H, det_config)
            res = detect(frame.y, frame.H, frame.noise_var, codebook, det_config,
                         bounds=spectrum[0], moments=spectrum[1])
            out.update(decisions=res.decisions, iterations=res.iterations,
                       matvecs=res.ops.matvecs, failed=res.failed,
                       iteration_decisions=res.iteration_decisions)
        elif name == "lmmse":
            out["decisions"] = baselines.lmmse_detect(frame.y, frame.H, frame.noise_var, codebook).decisions
        elif name == "oamp":
            res = baselines.oamp_vamp_detect(frame.y, frame.H, frame.noise_var, codebook,
                                             T=config.oamp_iterations, damping=config.oamp_damping,
                                             config=det_config)
            out.update(decisions=res.decisions, iterations=res.iterations)
        elif name == "map":
            out["decisions"] = baselines.map_oracle_detect(frame.y, frame.H, frame.noise_var, codebook).decisions
        else:
            raise ValueError(f"unknown detector {name!r}")
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.warning("detector %s failed on a frame: %s", name, exc)
        out.update(decisions=np.zeros(frame.indices.size, dtype=int), failed=True)
    return out


def _bit_errors(decisions, frame: Frame, codebook: ScmaCodebook) -> int:
    dec = np.asarray(decisions).reshape(frame.indices.shape)
    return int(np.count_nonzero(demap(dec, codebook) != frame.bits))


def _frame_task(args):
    config, snr_idx, frame_idx, detectors = args
    codebook = config.codebook()
    snr_db = config.snr_db[snr_idx]
    frame = generate_frame(config, snr_db, snr_idx, frame_idx, codebook=codebook)
    results = {}
    for name in detectors:
        t0 = time.perf_counter()
        out = run_detector(name, frame, codebook, config)
        dt = time.perf_counter() - t0 if config.record_timing else 0.0
        results[name] = (
            _bit_errors(out["decisions"], frame, codebook), frame.bits.size,
            out["iterations"], out["matvecs"], dt, int(out["failed"]),
        )
    return snr_idx, results


def _map_tasks(tasks, workers: int):
    if workers <= 1:
        return map(_frame_task, tasks)
    pool = ProcessPoolExecutor(max_workers=workers)
    try:
        return list(pool.map(_frame_task, tasks, chunksize=4))
    finally:
        pool.shutdown()


def run_ber_sweep(config: SimConfig, detectors=None) -> list[BerRecord]:
    """BER of every detector at every SNR point.

    All detectors see the same frames. Each frame is generated from its own
    substream keyed by (seed, SNR index, frame index), so results do not depend
    on the worker count.
    """
    detectors = list(detectors or config.detectors)
    tasks = [(config, i, f, detectors) for i in range(len(config.snr_db)) for f in range(config.frames)]
    acc = {(i, d): np.zeros(6) for i in range(len(config.snr_db)) for d in detectors}
    for snr_idx, results in _map_tasks(tasks, config.workers):
        for name, vals in results.items():
            acc[(snr_idx, name)] += np.asarray(vals, dtype=float)
    h = config.config_hash()
    records = []
    for (i, name), (errs, bits, iters, mv, wall, failed) in acc.items():
        records.append(BerRecord(
            h, config.snr_db[i], name, config.frames, int(bits), int(errs), errs / bits,
            iters / config.frames, float(wall), int(mv), int(failed),
        ))
        if failed:
            logger.warning("%s at %.1f dB: %d failed frames", name, config.snr_db[i], failed)
    return sorted(records, key=_sort_key)


def _trace_task(args):
    config, snr_idx, frame_idx, lengths = args
    codebook = config.codebook()
    frame = generate_frame(config, config.snr_db[snr_idx], snr_idx, frame_idx, codebook=codebook)
    T = config.detector.max_iterations
    spectrum = prepare_spectrum(frame.H, config.detector)
    errors = {}
    for L in lengths:
        det = dataclasses.replace(config.detector, damping_length=L)
        out = run_detector("mamp", frame, codebook, config, det, spectrum)
        per_iter = list(out["iteration_decisions"] or [out["decisions"]])
        # iterations skipped after convergence keep the last decisions
        per_iter += [per_iter[-1]] * (T - len(per_iter))
        errors[L] = [_bit_errors(d, frame, codebook) for d in per_iter]
    return snr_idx, frame.bits.size, errors


def run_convergence_trace(config: SimConfig, damping_lengths=None) -> list[dict]:
    """Per-iteration BER of the memory AMP detector for several damping lengths.

    Rows carry ``L, snr_db, iteration, bits, bit_errors, ber``; every L sees the
    same frames.
    """
    lengths = list(damping_lengths or config.trace_damping_lengths)
    T = config.detector.max_iterations
    tasks = [(config, i, f, lengths) for i in range(len(config.snr_db)) for f in range(config.frames)]
    errs = {(i, L): np.zeros(T, dtype=np.int64) for i in range(len(config.snr_db)) for L in lengths}
    bits = np.zeros(len(config.snr_db), dtype=np.int64)
    if config.workers <= 1:
        results = map(_trace_task, tasks)
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_trace_task, tasks, chunksize=4))
    for snr_idx, nbits, per_L in results:
        bits[snr_idx] += nbits
        for L, e in per_L.items():
            errs[(snr_idx, L)] += np.asarray(e)
    rows = []
    for L in lengths:
        for i, snr in enumerate(config.snr_db):
            for t in range(T):
                e = int(errs[(i, L)][t])
                rows.append({"L": L, "snr_db": snr, "iteration": t + 1, "bits": int(bits[i]),
                             "bit_errors": e, "ber": e / bits[i]})
    return rows


def count_complexity(config: SimConfig, snr_db: float | None = None, frame_idx: int = 0) -> dict:
    """Measured multiply counts of one detection against the analytical estimate.

    ``S_H`` and ``S_B`` are the mean nonzeros per row of H and of
    ``B = lam_plus I - H H^H``. The estimate per iteration is
    ``M_rows (S_B + 3 S_H + 1) + N_cols (2 + 3Q)``. The detector runs all its
    iterations with ``config.detector.b_mode``; the count for the other B mode
    is reported alongside.
    """
    codebook = config.codebook()
    snr_db = config.snr_db[-1] if snr_db is None else snr_db
    frame = generate_frame(config, snr_db, 0, frame_idx, codebook=codebook)
    H = frame.H
    m, n = H.shape
    bounds, moments = prepare_spectrum(H, config.detector)
    S_H = H.nnz / m
    S_B = explicit_b(scale_columns(H, config.detector.column_scaling)[0], bounds.lam_plus).nnz / m
    formula = m * (S_B + 3 * S_H + 1) + n * (2 + 3 * codebook.Q)
    out = {"rows": m, "cols": n, "nnz_H": int(H.nnz), "S_H": S_H, "S_B": S_B,
           "b_mode": config.detector.b_mode, "formula_per_iteration": formula}
    modes = [config.detector.b_mode] + [b for b in ("factored", "explicit") if b != config.detector.b_mode]
    for i, mode in enumerate(modes):
        det = dataclasses.replace(config.detector, tolerance=0.0, b_mode=mode)  # run all iterations
        res = detect(frame.y, H, frame.noise_var, codebook, det, bounds=bounds, moments=moments)
        per_iter = res.ops.multiplies / res.iterations
        key = "" if i == 0 else f"_{mode}"
        out.update({
            f"iterations{key}": res.iterations,
            f"matvecs{key}": res.ops.matvecs,
            f"multiplies_total{key}": res.ops.multiplies,
            f"multiplies_per_iteration{key}": per_iter,
            f"ratio{key}": per_iter / formula,
        })
    k = min(m, n)
    out["lmmse_dense_flops"] = k ** 3 / 3 + m * n * k
    return out


def _sort_key(rec: BerRecord):
    return rec.detector, rec.snr_db


def write_results(records, path, *, append: bool = False) -> list[BerRecord]:
    """Write the BER CSV sorted by (detector, snr); ``append`` merges existing rows."""
    path = Path(path)
    records = list(records)
    try:
        if append and path.exists():
            records = read_results(path) + records
        records.sort(key=_sort_key)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in records:
                w.writerow(r.row())
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return records


def read_results(path) -> list[BerRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            BerRecord(
                row["config_hash"], float(row["snr_db"]), row["detector"], int(row["frames"]),
                int(row["bits"]), int(row["bit_errors"]), float(row["ber"]),
                float(row["mean_iterations"]), float(row["wall_time_s"]), int(row["matvec_count"]),
            )
            for row in reader
        ]


def write_plot_data(records, path) -> None:
    """One series per detector with Wilson 95% bounds."""
    series = {}
    for r in sorted(records, key=_sort_key):
        s = series.setdefault(r.detector, {"snr_db": [], "ber": [], "ci_low": [], "ci_high": []})
        lo, hi = r.wilson()
        s["snr_db"].append(r.snr_db)
        s["ber"].append(r.ber)
        s["ci_low"].append(lo)
        s["ci_high"].append(hi)
    with open(path, "w") as fh:
        json.dump(series, fh, indent=2)


def _write_rows(rows, path) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_trace(rows, path) -> None:
    _write_rows(rows, path)


def write_complexity(report: dict, path) -> None:
    _write_rows([report], path)
