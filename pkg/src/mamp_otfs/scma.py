"""SCMA codebooks, bit labelling and codeword placement on the delay-Doppler grid.

Grid cells are addressed by the column-wise vector index ``l + k*M`` (delay
index fastest), the same convention used by the OTFS modem and the channel
module.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ScmaCodebook",
    "GridPlacement",
    "build_default_codebook",
    "load_codebook",
    "save_codebook",
    "map_bits",
    "demap",
    "place_on_grid",
    "effective_indices",
    "gather_effective",
    "scatter_effective",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ScmaCodebook:
    """Per-user SCMA codebooks.

    Attributes
    ----------
    codewords : ndarray, shape (J, Q, K)
        Full K-dimensional codewords; user ``j`` is nonzero only on
        ``supports[j]``.
    supports : ndarray, shape (J, D)
        Sorted resource indices carrying the nonzero entries of each user.
    """

    codewords: np.ndarray
    supports: np.ndarray

    def __post_init__(self):
        cw = np.asarray(self.codewords, dtype=complex)
        sup = np.asarray(self.supports, dtype=int)
        if cw.ndim != 3 or sup.ndim != 2 or cw.shape[0] != sup.shape[0]:
            raise ValueError("codewords must be (J, Q, K) and supports (J, D)")
        J, Q, K = cw.shape
        D = sup.shape[1]
        if not 1 <= D < K:
            raise ValueError(f"need 1 <= D < K, got D={D}, K={K}")
        if Q < 2 or Q & (Q - 1):
            raise ValueError(f"codebook size Q={Q} is not a power of two >= 2")
        for j in range(J):
            s = sup[j]
            if len(set(s.tolist())) != D or s.min() < 0 or s.max() >= K:
                raise ValueError(f"invalid support for user {j}: {s.tolist()}")
            off = np.setdiff1d(np.arange(K), s)
            if np.any(cw[j][:, off] != 0):
                raise ValueError(f"user {j} has nonzero entries outside its support")
            if np.any(cw[j][:, s] == 0):
                raise ValueError(f"user {j} has a zero entry inside its support")
        energy = np.mean(np.sum(np.abs(cw) ** 2, axis=2), axis=1)
        if not np.allclose(energy, 1.0, rtol=0, atol=1e-9):
            raise ValueError(f"mean codeword energy per user must be 1, got {energy}")
        object.__setattr__(self, "codewords", _frozen(cw))
        object.__setattr__(self, "supports", _frozen(np.sort(sup, axis=1)))

    @property
    def J(self) -> int:
        return self.codewords.shape[0]

    @property
    def Q(self) -> int:
        return self.codewords.shape[1]

    @property
    def K(self) -> int:
        return self.codewords.shape[2]

    @property
    def D(self) -> int:
        return self.supports.shape[1]

    @property
    def bits_per_codeword(self) -> int:
        return int(math.log2(self.Q))

    @property
    def overloading(self) -> float:
        return self.J / self.K

    @property
    def nonzero_codewords(self) -> np.ndarray:
        """Codeword entries on the support, shape (J, Q, D)."""
        return np.take_along_axis(self.codewords, self.supports[:, None, :], axis=2)

    @property
    def entry_energy(self) -> float:
        """Average energy of one nonzero codeword entry."""
        return float(np.mean(np.abs(self.nonzero_codewords) ** 2))

    def resource_degrees(self) -> np.ndarray:
        """Number of users sharing each of the K resources."""
        return np.bincount(self.supports.ravel(), minlength=self.K)


def _base_constellation(Q: int) -> np.ndarray:
    if Q == 2:
        return np.array([1.0, -1.0], dtype=complex)
    if Q == 4:
        # natural index q = 2*b0 + b1 gives a Gray-labelled QPSK
        b = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
        return ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) / np.sqrt(2)
    return np.exp(2j * np.pi * np.arange(Q) / Q)


def build_default_codebook(
    K: int = 4, J: int = 6, Q: int = 4, D: int = 2, *, allow_shared_supports: bool = False
) -> ScmaCodebook:
    """Deterministic SCMA codebook with unit mean codeword energy.

    Users are assigned the D-of-K supports in lexicographic order. Every user
    repeats a PSK/QPSK symbol over its D resources; users sharing a resource
    get distinct phase rotations spread over the constellation's symmetry
    angle, so superimposed symbols remain separable.

    When ``J`` exceeds ``comb(K, D)`` the supports are reused cyclically, which
    is only done if ``allow_shared_supports`` is set.
    """
    if not 1 <= D < K:
        raise ValueError(f"need 1 <= D < K, got D={D}, K={K}")
    if J < 1:
        raise ValueError("J must be positive")
    if Q < 2 or Q & (Q - 1):
        raise ValueError(f"Q={Q} is not a power of two >= 2")
    combos = list(itertools.combinations(range(K), D))
    if J > len(combos) and not allow_shared_supports:
        raise ValueError(
            f"no distinct support pattern: J={J} users but only {len(combos)} "
            f"{D}-of-{K} supports"
        )
    supports = np.array([combos[j % len(combos)] for j in range(J)], dtype=int)

    base = _base_constellation(Q)
    symmetry = np.pi if Q == 2 else 2 * np.pi / Q
    codewords = np.zeros((J, Q, K), dtype=complex)
    for k in range(K):
        users = [j for j in range(J) if k in supports[j]]
        for m, j in enumerate(users):
            rot = np.exp(1j * symmetry * m / len(users))
            codewords[j, :, k] = base * rot / np.sqrt(D)
    return ScmaCodebook(codewords, supports)


def load_codebook(path: str | Path) -> ScmaCodebook:
    """Read a codebook from JSON.

    Expected keys: ``K, J, Q, D, supports, codewords``. ``codewords[j][q]`` is a
    list of ``[re, im]`` pairs, either K long (full codeword) or D long (entries
    on the support only).
    """
    with open(path) as fh:
        obj = json.load(fh)
    K, J, Q, D = (int(obj[k]) for k in ("K", "J", "Q", "D"))
    supports = np.asarray(obj["supports"], dtype=int)
    raw = np.asarray(obj["codewords"], dtype=float)
    if raw.ndim != 4 or raw.shape[-1] != 2 or raw.shape[:2] != (J, Q):
        raise ValueError(f"{path}: codewords must be nested [J][Q][K or D][2]")
    entries = raw[..., 0] + 1j * raw[..., 1]
    if supports.shape != (J, D):
        raise ValueError(f"{path}: supports must have shape ({J}, {D})")
    if entries.shape[2] == K:
        codewords = entries
    elif entries.shape[2] == D:
        codewords = np.zeros((J, Q, K), dtype=complex)
        for j in range(J):
            codewords[j][:, np.sort(supports[j])] = entries[j][:, np.argsort(supports[j])]
    else:
        raise ValueError(f"{path}: codeword length must be K={K} or D={D}")
    try:
        return ScmaCodebook(codewords, supports)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def save_codebook(codebook: ScmaCodebook, path: str | Path) -> None:
    cw = codebook.codewords
    obj = {
        "K": codebook.K,
        "J": codebook.J,
        "Q": codebook.Q,
        "D": codebook.D,
        "supports": codebook.supports.tolist(),
        "codewords": np.stack([cw.real, cw.imag], axis=-1).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(obj, fh)


def map_bits(bits: np.ndarray, codebook: ScmaCodebook) -> np.ndarray:
    """Group bits into codeword indices with natural (MSB-first) labelling.

    Works on the last axis, so ``bits`` of shape (J, n) map to (J, n / log2 Q).
    """
    bits = np.asarray(bits)
    m = codebook.bits_per_codeword
    if bits.shape[-1] % m:
        raise ValueError(f"bit length {bits.shape[-1]} is not a multiple of log2(Q)={m}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    groups = bits.reshape(*bits.shape[:-1], -1, m).astype(np.int64)
    weights = 1 << np.arange(m - 1, -1, -1)
    return groups @ weights


def demap(indices: np.ndarray, codebook: ScmaCodebook) -> np.ndarray:
    """Inverse of :func:`map_bits`."""
    indices = np.asarray(indices)
    if np.any(indices < 0) or np.any(indices >= codebook.Q):
        raise ValueError(f"codeword index out of range [0, {codebook.Q})")
    m = codebook.bits_per_codeword
    shifts = np.arange(m - 1, -1, -1)
    bits = (indices[..., None].astype(np.int64) >> shifts) & 1
    return bits.reshape(*indices.shape[:-1], -1).astype(np.int8)


@dataclass(frozen=True)
class GridPlacement:
    """Where the K entries of each codeword land on the M x N grid.

    ``axis="delay"`` puts a codeword on K consecutive delay bins of one Doppler
    column; ``axis="doppler"`` on K consecutive Doppler bins of one delay row.
    """

    M: int
    N: int
    K: int
    axis: str = "delay"

    def __post_init__(self):
        if self.M % self.K or self.N % self.K:
            raise ValueError(f"M={self.M} and N={self.N} must be multiples of K={self.K}")
        if self.axis not in ("delay", "doppler"):
            raise ValueError(f"unknown placement axis {self.axis!r}")

    @property
    def slots_per_user(self) -> int:
        return self.M * self.N // self.K

    def cell_indices(self) -> np.ndarray:
        """Vector index ``l + k*M`` of every (slot, codeword position), shape (MN/K, K)."""
        M, N, K = self.M, self.N, self.K
        i = np.arange(K)
        s = np.arange(self.slots_per_user)[:, None]
        if self.axis == "delay":
            # slot s covers delay bins of column k = s // (M/K)
            per_col = M // K
            ell = (s % per_col) * K + i
            k = s // per_col + 0 * i
        else:
            ell = s % M + 0 * i
            k = (s // M) * K + i
        return ell + k * M


def effective_indices(codebook: ScmaCodebook, placement: GridPlacement) -> np.ndarray:
    """Grid vector indices of the nonzero entries, shape (J, MN/K * D).

    Row j lists, slot by slot, the cells holding user j's D nonzeros. Reading
    the rows in order gives the ordering of the effective input vector.
    """
    if placement.K != codebook.K:
        raise ValueError(f"placement K={placement.K} does not match codebook K={codebook.K}")
    cells = placement.cell_indices()
    return np.stack([cells[:, codebook.supports[j]].ravel() for j in range(codebook.J)])


def place_on_grid(
    indices: np.ndarray, user: int, codebook: ScmaCodebook, placement: GridPlacement
) -> np.ndarray:
    """Build the M x N delay-Doppler frame of one user from its codeword indices."""
    indices = np.asarray(indices)
    if placement.K != codebook.K:
        raise ValueError(f"placement K={placement.K} does not match codebook K={codebook.K}")
    if indices.shape != (placement.slots_per_user,):
        raise ValueError(
            f"expected {placement.slots_per_user} codeword indices, got {indices.shape}"
        )
    vec = np.zeros(placement.M * placement.N, dtype=complex)
    vec[placement.cell_indices()] = codebook.codewords[user][indices]
    return vec.reshape((placement.M, placement.N), order="F")


def gather_effective(frames: np.ndarray, index_map: np.ndarray) -> np.ndarray:
    """Stack the nonzero entries of per-user frames (J, M, N) into the effective vector."""
    frames = np.asarray(frames)
    flat = frames.transpose(0, 2, 1).reshape(frames.shape[0], -1)
    return np.take_along_axis(flat, index_map, axis=1).ravel()


def scatter_effective(x: np.ndarray, index_map: np.ndarray, M: int, N: int) -> np.ndarray:
    """Inverse of :func:`gather_effective`; returns frames of shape (J, M, N)."""
    J = index_map.shape[0]
    flat = np.zeros((J, M * N), dtype=complex)
    np.put_along_axis(flat, index_map, np.asarray(x).reshape(J, -1), axis=1)
    return flat.reshape(J, N, M).transpose(0, 2, 1)
