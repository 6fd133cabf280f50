"""Doubly-selective multipath channel for uplink MIMO-OTFS.

Two equivalent routes are provided for every link (receive antenna u, user j):

* a time-domain route: discrete taps ``h[c, p]`` applied sample by sample;
* a delay-Doppler route: the sparse MN x MN matrix mapping ``vec(X_j)`` to
  ``vec(Y_uj)``.

The effective system matrix keeps only the grid cells that carry SCMA
codeword nonzeros and stacks the receive antennas row-wise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .scma import GridPlacement, ScmaCodebook, effective_indices

__all__ = [
    "SPEED_OF_LIGHT",
    "ChannelPath",
    "ChannelConfig",
    "ChannelRealization",
    "raised_cosine",
    "rc_weights",
    "doppler_leakage",
    "sample_paths",
    "discretize_taps",
    "apply_time_domain",
    "build_dd_blocks",
    "assemble_effective",
    "cp_length",
    "expected_rx_power",
    "dump_coo",
]

SPEED_OF_LIGHT = 3e8


def split_doppler(normalized: float) -> tuple[int, float]:
    """Split ``nu * N * T`` into an integer index and a fraction in (-0.5, 0.5]."""
    k = math.ceil(normalized - 0.5)
    return k, normalized - k


@dataclass(frozen=True)
class ChannelPath:
    """One propagation path; ``doppler`` in Hz, ``delay`` in seconds."""

    gain: complex
    delay: float
    doppler: float
    doppler_index: int
    doppler_frac: float

    @classmethod
    def create(cls, gain: complex, delay: float, doppler: float, N: int, subcarrier_spacing: float):
        k, beta = split_doppler(doppler * N / subcarrier_spacing)
        return cls(complex(gain), float(delay), float(doppler), k, beta)


def _default_delays() -> tuple:
    return tuple(np.linspace(0.0, 5e-6, 6))


@dataclass
class ChannelConfig:
    """Channel model parameters.

    ``powers`` are linear mean path powers; when omitted they decay as
    ``exp(-delay / decay_time)``. Either way they are normalised to sum to one.
    ``q_threshold=None`` keeps the full Doppler-leakage sum.
    """

    subcarrier_spacing: float = 15e3
    carrier_frequency: float = 4e9
    velocity_kmh: float = 300.0
    max_doppler: float | None = None
    delays: Sequence[float] = field(default_factory=_default_delays)
    powers: Sequence[float] | None = None
    decay_time: float = 1e-6
    rolloff: float = 0.4
    q_threshold: float | None = 1e-3
    rc_span: int = 8
    rc_floor: float = 1e-8
    max_timing_offset: float = 0.0

    def __post_init__(self):
        self.delays = tuple(float(d) for d in self.delays)
        if not self.delays:
            raise ValueError("delay profile is empty")
        if min(self.delays) < 0:
            raise ValueError("path delays must be non-negative")
        if self.powers is not None:
            if len(self.powers) != len(self.delays):
                raise ValueError("powers and delays differ in length")
            self.powers = tuple(float(p) for p in self.powers)
        if not 0 <= self.rolloff <= 1:
            raise ValueError(f"rolloff {self.rolloff} outside [0, 1]")
        if self.max_timing_offset < 0:
            raise ValueError("max_timing_offset must be non-negative")
        if self.doppler_max >= self.subcarrier_spacing / 2:
            raise ValueError(
                f"max Doppler {self.doppler_max:.1f} Hz must stay below half the "
                f"subcarrier spacing"
            )

    @property
    def doppler_max(self) -> float:
        if self.max_doppler is not None:
            return float(self.max_doppler)
        return self.velocity_kmh / 3.6 * self.carrier_frequency / SPEED_OF_LIGHT

    def path_powers(self) -> np.ndarray:
        if self.powers is not None:
            p = np.asarray(self.powers, dtype=float)
        else:
            p = np.exp(-np.asarray(self.delays) / self.decay_time)
        return p / p.sum()


@dataclass
class ChannelRealization:
    """Path parameters of every (antenna, user) link plus per-user timing offsets."""

    M: int
    N: int
    subcarrier_spacing: float
    rolloff: float
    paths: list  # paths[u][j] -> list[ChannelPath]
    timing_offsets: np.ndarray
    rc_span: int = 8
    rc_floor: float = 1e-8

    @property
    def U(self) -> int:
        return len(self.paths)

    @property
    def J(self) -> int:
        return len(self.paths[0])

    @property
    def sample_interval(self) -> float:
        return 1.0 / (self.M * self.subcarrier_spacing)

    def taps(self, u: int, j: int, *, start: int = 0, n_samples: int | None = None) -> np.ndarray:
        return discretize_taps(
            self.paths[u][j],
            self.timing_offsets[j],
            self.rolloff,
            self.M,
            self.N,
            self.subcarrier_spacing,
            start=start,
            n_samples=n_samples,
            span=self.rc_span,
            floor=self.rc_floor,
        )

    def block(self, u: int, j: int, q_threshold: float | None = None) -> sp.csr_matrix:
        return build_dd_blocks(
            self.paths[u][j],
            self.timing_offsets[j],
            self.rolloff,
            self.M,
            self.N,
            self.subcarrier_spacing,
            q_threshold=q_threshold,
            span=self.rc_span,
            floor=self.rc_floor,
        )

    def blocks(self, q_threshold: float | None = None) -> list:
        return [[self.block(u, j, q_threshold) for j in range(self.J)] for u in range(self.U)]


def sample_paths(
    config: ChannelConfig, M: int, N: int, U: int, J: int, rng: np.random.Generator
) -> ChannelRealization:
    """Draw Rayleigh path gains and Jakes Dopplers for every link.

    Gains are circularly-symmetric Gaussian with the profile's powers as
    variances; Dopplers are ``nu_max * cos(angle)`` with the angle uniform on
    [-pi, pi]. Timing offsets are uniform on ``[0, max_timing_offset]``.
    """
    delays = np.asarray(config.delays)
    powers = config.path_powers()
    L = len(delays)
    nu_max = config.doppler_max
    paths = []
    for _u in range(U):
        row = []
        for _j in range(J):
            g = np.sqrt(powers / 2) * (rng.standard_normal(L) + 1j * rng.standard_normal(L))
            nu = nu_max * np.cos(rng.uniform(-np.pi, np.pi, L))
            row.append(
                [
                    ChannelPath.create(g[i], delays[i], nu[i], N, config.subcarrier_spacing)
                    for i in range(L)
                ]
            )
        paths.append(row)
    if config.max_timing_offset > 0:
        offsets = rng.uniform(0.0, config.max_timing_offset, J)
    else:
        offsets = np.zeros(J)
    return ChannelRealization(
        M, N, config.subcarrier_spacing, config.rolloff, paths, offsets,
        rc_span=config.rc_span, rc_floor=config.rc_floor,
    )


def raised_cosine(t: np.ndarray, rolloff: float) -> np.ndarray:
    """Raised-cosine pulse at times ``t`` given in sample intervals."""
    t = np.asarray(t, dtype=float)
    out = np.sinc(t)
    if rolloff == 0:
        return out
    den = 1.0 - (2.0 * rolloff * t) ** 2
    sing = np.abs(den) < 1e-10
    safe = np.where(sing, 1.0, den)
    out = out * np.cos(np.pi * rolloff * t) / safe
    # limit at |t| = 1 / (2 * rolloff)
    return np.where(sing, np.pi / 4 * np.sinc(1.0 / (2.0 * rolloff)), out)


def rc_weights(
    offsets: np.ndarray, rolloff: float, span: int = 8, floor: float = 1e-8
) -> np.ndarray:
    """``P_rc(p - offset)`` for p = 0, 1, ... with offsets in sample intervals.

    Returns an array of shape (len(offsets), P). Entries below ``floor`` are
    zeroed and P is the last tap index with any surviving entry plus one.
    """
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    if np.any(offsets < 0):
        raise ValueError("delays and timing offsets must be non-negative")
    n = int(math.ceil(offsets.max())) + span + 1
    p = np.arange(n)
    w = raised_cosine(p[None, :] - offsets[:, None], rolloff)
    w[np.abs(w) < floor] = 0.0
    nz = np.flatnonzero(np.any(w != 0, axis=0))
    P = int(nz[-1]) + 1 if nz.size else 1
    return w[:, :P]


def _link_arrays(paths: Sequence[ChannelPath]):
    g = np.array([p.gain for p in paths], dtype=complex)
    tau = np.array([p.delay for p in paths], dtype=float)
    nu = np.array([p.doppler for p in paths], dtype=float)
    k = np.array([p.doppler_index for p in paths], dtype=int)
    beta = np.array([p.doppler_frac for p in paths], dtype=float)
    return g, tau, nu, k, beta


def discretize_taps(
    paths: Sequence[ChannelPath],
    timing_offset: float,
    rolloff: float,
    M: int,
    N: int,
    subcarrier_spacing: float,
    *,
    start: int = 0,
    n_samples: int | None = None,
    span: int = 8,
    floor: float = 1e-8,
) -> np.ndarray:
    """Time-varying taps ``h[c, p]`` for ``c = start, ..., start + n_samples - 1``.

    ``h[c, p] = sum_i g_i exp(j 2 pi nu_i (c - p) T_s) P_rc(p T_s - t_j - tau_i)``.
    Negative ``start`` gives the taps seen by cyclic-prefix samples.
    """
    Ts = 1.0 / (M * subcarrier_spacing)
    g, tau, nu, _, _ = _link_arrays(paths)
    w = rc_weights((timing_offset + tau) / Ts, rolloff, span, floor)
    P = w.shape[1]
    if P >= M * N:
        raise ValueError(f"channel span of {P} taps does not fit in a frame of {M * N} samples")
    if n_samples is None:
        n_samples = M * N
    c = np.arange(start, start + n_samples)
    p = np.arange(P)
    phase = np.exp(2j * np.pi * nu[:, None, None] * (c[None, :, None] - p[None, None, :]) * Ts)
    return np.einsum("i,icp,ip->cp", g, phase, w)


def apply_time_domain(
    signals: np.ndarray,
    taps: Sequence[np.ndarray],
    noise_var: float = 0.0,
    rng: np.random.Generator | None = None,
    cp_len: int = 0,
) -> np.ndarray:
    """Received samples at one antenna from all users plus AWGN.

    ``signals`` has shape (J, n). With ``cp_len == 0`` the frame is treated as
    periodic (circular model); otherwise the signals carry a cyclic prefix, the
    convolution is linear and ``taps[j]`` must cover all n samples, starting at
    time index ``-cp_len``.
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=complex))
    n = signals.shape[1]
    r = np.zeros(n, dtype=complex)
    for s, h in zip(signals, taps):
        if h.shape[0] != n:
            raise ValueError(f"taps cover {h.shape[0]} samples, signal has {n}")
        for p in range(h.shape[1]):
            if cp_len == 0:
                shifted = np.roll(s, p)
            else:
                shifted = np.concatenate([np.zeros(p, dtype=complex), s[: n - p]])
            r += h[:, p] * shifted
    if noise_var > 0:
        if rng is None:
            raise ValueError("an rng is required when noise_var > 0")
        r += np.sqrt(noise_var / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return r


def doppler_leakage(q: np.ndarray, beta: float, N: int) -> np.ndarray:
    """Inter-Doppler leakage ``sum_m exp(j 2 pi m (q + beta) / N)`` over m < N.

    Equals N when ``q + beta`` is a multiple of N and 0 at other integers.
    """
    q = np.asarray(q, dtype=float)
    x = q + beta
    if beta == 0:
        return np.where(np.mod(q, N) == 0, float(N), 0.0).astype(complex)
    num = np.exp(2j * np.pi * x) - 1.0
    den = np.exp(2j * np.pi * x / N) - 1.0
    return num / den


def build_dd_blocks(
    paths: Sequence[ChannelPath],
    timing_offset: float,
    rolloff: float,
    M: int,
    N: int,
    subcarrier_spacing: float,
    *,
    q_threshold: float | None = None,
    span: int = 8,
    floor: float = 1e-8,
) -> sp.csr_matrix:
    """Delay-Doppler channel matrix of one link, ``vec(Y_uj) = H_uj vec(X_j)``.

    Entry ((l, k), (l', k')) accumulates, over taps p and paths i,
    ``g_i P_rc(p T_s - t_j - tau_i) xi(l, p) theta(q, beta_i) / N * phase`` with
    ``l' = [l - p]_M`` and ``k' = [k - k_i + q]_N``. The wrap phase is
    ``exp(j 2 pi a k' / N)`` with ``a = floor((l - p) / M)``; for p <= M this
    is 1 when p <= l and ``exp(-j 2 pi k' / N)`` otherwise.

    ``q_threshold`` drops Doppler-leakage terms with ``|theta| / N`` below it;
    ``None`` keeps the exact full sum.
    """
    Ts = 1.0 / (M * subcarrier_spacing)
    g, tau, _, kidx, beta = _link_arrays(paths)
    w = rc_weights((timing_offset + tau) / Ts, rolloff, span, floor)
    P = w.shape[1]
    if P >= M * N:
        raise ValueError(f"channel span of {P} taps does not fit in a frame of {M * N} samples")

    ell = np.arange(M)
    k = np.arange(N)
    # qmat[k, k'] = [k' - k]_N, shifted per path by its integer Doppler
    qbase = k[None, :] - k[:, None]
    H4 = np.zeros((M, N, M, N), dtype=complex)
    for i in range(len(g)):
        alpha = kidx[i] + beta[i]
        theta = doppler_leakage(np.arange(N), beta[i], N) / N
        if q_threshold is not None:
            theta = np.where(np.abs(theta) >= q_threshold, theta, 0.0)
        doppler_mix = theta[np.mod(qbase + kidx[i], N)]  # (k, k')
        for p in np.flatnonzero(w[i]):
            diff = ell - p
            lpp = np.mod(diff, M)
            a = np.floor_divide(diff, M)
            xi = np.exp(2j * np.pi * diff * alpha / (M * N))
            wrap = np.exp(2j * np.pi * a[:, None] * k[None, :] / N)  # (l, k')
            coef = (g[i] * w[i, p]) * xi[:, None, None] * doppler_mix[None, :, :] * wrap[:, None, :]
            H4[ell, :, lpp, :] += coef
    dense = H4.transpose(1, 0, 3, 2).reshape(M * N, M * N)
    return sp.csr_matrix(dense)


@dataclass(frozen=True, eq=False)
class EffectiveChannel:
    """Stacked effective matrix and the map from grid cells to its columns."""

    H: sp.csr_matrix
    index_map: np.ndarray  # (J, MN/K * D) grid vector indices per user
    U: int
    M: int
    N: int

    @property
    def shape(self):
        return self.H.shape


def assemble_effective(
    blocks: Sequence[Sequence[sp.spmatrix]], codebook: ScmaCodebook, placement: GridPlacement
) -> EffectiveChannel:
    """Drop the always-zero input columns and stack antennas.

    Column ordering is user-major, then codeword slot, then the D nonzero
    positions, so each slot occupies D adjacent columns.
    """
    U = len(blocks)
    J = len(blocks[0])
    MN = placement.M * placement.N
    if J != codebook.J:
        raise ValueError(f"{J} user blocks for a {codebook.J}-user codebook")
    index_map = effective_indices(codebook, placement)
    rows = []
    for u in range(U):
        if len(blocks[u]) != J:
            raise ValueError("every antenna needs one block per user")
        parts = []
        for j in range(J):
            B = sp.csc_matrix(blocks[u][j])
            if B.shape != (MN, MN):
                raise ValueError(f"block ({u}, {j}) has shape {B.shape}, expected {(MN, MN)}")
            parts.append(B[:, index_map[j]])
        rows.append(sp.hstack(parts, format="csr"))
    H = sp.vstack(rows, format="csr")
    return EffectiveChannel(H, index_map, U, placement.M, placement.N)


def cp_length(config: ChannelConfig, M: int) -> int:
    """CP long enough for the largest delay plus timing offset plus the pulse tail."""
    Ts = 1.0 / (M * config.subcarrier_spacing)
    worst = (config.max_timing_offset + max(config.delays)) / Ts
    return int(math.ceil(worst - 1e-9)) + config.rc_span


def expected_rx_power(config: ChannelConfig, realization: ChannelRealization, K: int) -> float:
    """Mean received signal power per sample and antenna.

    Averages over path gains and data with unit-energy codewords (each user
    frame carries power 1/K per sample) and treats samples as uncorrelated.
    """
    Ts = realization.sample_interval
    powers = config.path_powers()
    tau = np.asarray(config.delays)
    total = 0.0
    for tj in realization.timing_offsets:
        w = rc_weights((tj + tau) / Ts, config.rolloff, config.rc_span, config.rc_floor)
        total += float(np.sum(powers[:, None] * np.abs(w) ** 2)) / K
    return total


def dump_coo(H: sp.spmatrix, path: str | Path) -> None:
    """Write ``row col re im`` lines for every stored entry."""
    C = sp.coo_matrix(H)
    data = np.column_stack([C.row, C.col, C.data.real, C.data.imag])
    np.savetxt(path, data, fmt=["%d", "%d", "%.17g", "%.17g"], header=f"{H.shape[0]} {H.shape[1]}")
