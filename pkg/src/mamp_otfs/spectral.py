"""Eigenvalue bounds of H H^H and the trace moments used by the memory detector.

The moments are ``a_t = tr(H^H B^t H) / n_cols`` with ``B = lam_plus I - H H^H``.
They are computed either from the exact eigenvalues or by Hutchinson trace
estimation using sparse matrix-vector products only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

__all__ = [
    "SpectralBounds",
    "MomentCache",
    "power_iteration",
    "gram_eigenvalues",
    "estimate_bounds",
    "bounds_from_eigenvalues",
    "compute_moments",
]


@dataclass(frozen=True)
class SpectralBounds:
    lam_min: float
    lam_max: float

    def __post_init__(self):
        if not (0 <= self.lam_min <= self.lam_max) or self.lam_max <= 0:
            raise ValueError(f"invalid bounds ({self.lam_min}, {self.lam_max})")

    @property
    def lam_plus(self) -> float:
        return 0.5 * (self.lam_max + self.lam_min)


def _gram_matvec(H):
    """Matvec of the smaller Gram matrix (H^H H or H H^H) and its size."""
    m, n = H.shape
    Hh = H.conj().T
    if n <= m:
        return n, lambda v: Hh @ (H @ v)
    return m, lambda v: H @ (Hh @ v)


def power_iteration(matvec, n: int, *, tol: float = 1e-8, max_iter: int = 200_000, seed: int = 0):
    """Dominant eigenpair of a Hermitian PSD operator.

    Stops when the residual ``||A v - lam v||`` drops below ``tol * lam``.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(max_iter):
        w = matvec(v)
        lam = float(np.real(np.vdot(v, w)))
        res = np.linalg.norm(w - lam * v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, v
        if res <= tol * abs(lam):
            break
        v = w / nw
    else:
        logger.warning("power iteration stopped after %d iterations (residual %.3g)", max_iter, res)
    return lam, v


def gram_eigenvalues(H) -> np.ndarray:
    """Eigenvalues of the smaller Gram matrix (the nonzero spectrum of H H^H), ascending."""
    A = H.toarray() if sp.issparse(H) else np.asarray(H)
    m, n = A.shape
    G = A.conj().T @ A if n <= m else A @ A.conj().T
    return np.clip(np.linalg.eigvalsh(G), 0.0, None)


def bounds_from_eigenvalues(eigs: np.ndarray) -> SpectralBounds:
    return SpectralBounds(float(eigs.min()), float(eigs.max()))


def estimate_bounds(H, mode: str = "exact", *, tol: float = 1e-8) -> SpectralBounds:
    """Extreme eigenvalues of H H^H.

    ``exact`` runs power iteration on the smaller Gram matrix G for the largest
    eigenvalue, then on ``lam_max I - G`` for the smallest. When H has more
    rows than columns this is the smallest *nonzero* eigenvalue of H H^H; the
    null space of H^H never reaches the detector output.

    ``bound`` avoids any eigensolve: ``lam_min = 0`` and
    ``lam_max = min(||H||_F^2, ||H||_1 ||H||_inf)``.
    """
    fro2 = float(abs(H.multiply(H.conj()).sum())) if sp.issparse(H) else float(np.sum(np.abs(H) ** 2))
    if fro2 == 0:
        raise ValueError("H is the zero matrix")
    if mode == "bound":
        absH = abs(H)
        norm1 = float(absH.sum(axis=0).max())
        norm_inf = float(absH.sum(axis=1).max())
        return SpectralBounds(0.0, min(fro2, norm1 * norm_inf))
    if mode != "exact":
        raise ValueError(f"unknown eigen mode {mode!r}")
    n, gram = _gram_matvec(H)
    lam_max, _ = power_iteration(gram, n, tol=tol)
    shifted, _ = power_iteration(lambda v: lam_max * v - gram(v), n, tol=tol, seed=1)
    lam_min = min(max(lam_max - shifted, 0.0), lam_max)
    return SpectralBounds(lam_min, lam_max)


@dataclass(frozen=True, eq=False)
class MomentCache:
    """``a[t]`` for t = 0 .. len(a) - 1 together with the ``lam_plus`` that defines B."""

    a: np.ndarray
    lam_plus: float

    def abar(self, i: int, j: int) -> float:
        a = self.a
        return self.lam_plus * a[i + j] - a[i + j + 1] - a[i] * a[j]

    @property
    def a0(self) -> float:
        return float(self.a[0])


def _moment_order(max_iterations: int) -> int:
    # the extrinsic variance needs a_{2t-1} at t = T
    return 2 * max_iterations


def compute_moments(
    H,
    bounds: SpectralBounds,
    max_iterations: int,
    mode: str = "exact",
    *,
    eigenvalues: np.ndarray | None = None,
    n_probes: int = 64,
    seed: int = 2024,
) -> MomentCache:
    """Trace moments ``a_0 .. a_{2T}``.

    ``exact`` uses ``a_t = sum_k lam_k (lam_plus - lam_k)^t / n_cols`` over the
    eigenvalues of H H^H (zero eigenvalues contribute nothing). ``probe`` uses
    fixed-seed Rademacher probes. In both modes ``a_0`` is the exact
    ``||H||_F^2 / n_cols``.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be at least 1")
    n_cols = H.shape[1]
    tmax = _moment_order(max_iterations)
    lp = bounds.lam_plus
    fro2 = float(abs(H.multiply(H.conj()).sum())) if sp.issparse(H) else float(np.sum(np.abs(H) ** 2))
    a = np.empty(tmax + 1)
    if mode == "exact":
        lam = gram_eigenvalues(H) if eigenvalues is None else np.asarray(eigenvalues)
        d = lp - lam
        pw = lam.copy()
        for t in range(tmax + 1):
            a[t] = pw.sum() / n_cols
            pw *= d
    elif mode == "probe":
        rng = np.random.default_rng(seed)
        V = rng.choice([-1.0, 1.0], size=(n_cols, n_probes))
        W = H @ V
        U = W.astype(complex)
        Hh = H.conj().T
        for t in range(tmax + 1):
            a[t] = np.real(np.sum(W.conj() * U)) / (n_probes * n_cols)
            U = lp * U - H @ (Hh @ U)
    else:
        raise ValueError(f"unknown moment mode {mode!r}")
    a[0] = fro2 / n_cols
    return MomentCache(a, lp)
