"""Reference detectors: one-shot LMMSE, an OAMP/VAMP-style loop and exhaustive MAP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .mamp import DetectorConfig, nle_step, scale_columns, slot_users
from .scma import ScmaCodebook

__all__ = [
    "BASELINE_KINDS",
    "MAP_BUDGET",
    "BaselineResult",
    "lmmse_estimate",
    "lmmse_detect",
    "nearest_codeword",
    "oamp_vamp_detect",
    "map_oracle_detect",
    "hypothesis_count",
]

BASELINE_KINDS = ("lmmse", "oamp_vamp", "map_oracle")
MAP_BUDGET = 2 ** 24


@dataclass
class BaselineResult:
    decisions: np.ndarray
    iterations: int = 1
    posteriors: np.ndarray | None = None
    estimate: np.ndarray | None = None


def _dense(H) -> np.ndarray:
    return H.toarray() if sp.issparse(H) else np.asarray(H, dtype=complex)


def lmmse_estimate(y, H, noise_var: float, mu=None, eta: float = 1.0) -> np.ndarray:
    """``mu + H^H (rho I + H H^H)^{-1} (y - H mu)`` with ``rho = noise_var / eta``.

    The solve runs on the smaller side through the push-through identity.
    """
    A = _dense(H)
    m, n = A.shape
    mu = np.zeros(n, dtype=complex) if mu is None else np.asarray(mu, dtype=complex)
    if eta <= 0:
        raise ValueError("prior variance must be positive")
    rho = noise_var / eta
    e = np.asarray(y, dtype=complex) - A @ mu
    Ah = A.conj().T
    try:
        if m <= n:
            G = A @ Ah + rho * np.eye(m)
            sol = Ah @ sla.solve(G, e, assume_a="her")
        else:
            G = Ah @ A + rho * np.eye(n)
            sol = sla.solve(G, Ah @ e, assume_a="her")
    except (sla.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"singular LMMSE system (rho={rho:g})") from exc
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError(f"singular LMMSE system (rho={rho:g})")
    return mu + sol


def nearest_codeword(z, codebook: ScmaCodebook, users=None) -> np.ndarray:
    """Per-slot minimum-distance codeword index."""
    Z = np.asarray(z).reshape(-1, codebook.D)
    if users is None:
        users = slot_users(Z.shape[0], codebook.J)
    chi = codebook.nonzero_codewords[users]
    return np.argmin(np.sum(np.abs(chi - Z[:, None, :]) ** 2, axis=2), axis=1)


def lmmse_detect(y, H, noise_var: float, codebook: ScmaCodebook, mu=None, eta: float | None = None):
    """One-shot LMMSE with the codebook's entry energy as prior variance."""
    if eta is None:
        eta = codebook.entry_energy
    z = lmmse_estimate(y, H, noise_var, mu, eta)
    return BaselineResult(nearest_codeword(z, codebook), 1, None, z)


def oamp_vamp_detect(y, H, noise_var: float, codebook: ScmaCodebook, T: int = 6,
                     damping: float = 0.7, config: DetectorConfig | None = None) -> BaselineResult:
    """Iterative detector with an exact LMMSE linear stage.

    The linear stage uses one eigendecomposition of ``H^H H``; each iteration
    forms the LMMSE posterior for prior ``(mu, v)``, converts it to extrinsic
    form, runs the codeword denoiser and damps the new prior with ``damping``
    on both mean and variance. Column scaling follows ``config.column_scaling``
    exactly as in the memory AMP detector.
    """
    config = config or DetectorConfig()
    Hs, gains = scale_columns(H, config.column_scaling)
    A = Hs.toarray()
    n = A.shape[1]
    y = np.asarray(y, dtype=complex)
    S = n // codebook.D
    users = slot_users(S, codebook.J)
    scale = None if config.column_scaling == "none" else gains.reshape(S, codebook.D)
    Ah = A.conj().T
    lam, Uh = np.linalg.eigh(Ah @ A)
    lam = np.clip(lam, 0.0, None)
    mf_y = Ah @ y
    mu = np.zeros(n, dtype=complex)
    v = codebook.entry_energy
    post = None
    floor, ceil = config.var_floor, config.var_ceiling
    for it in range(1, T + 1):
        gain = v / (noise_var + v * lam) if noise_var > 0 else np.where(lam > 0, 1.0 / np.maximum(lam, 1e-300), v)
        grad = mf_y - Ah @ (A @ mu)
        z = mu + Uh @ (gain * (Uh.conj().T @ grad))
        if noise_var > 0:
            v_post = float(np.mean(v * noise_var / (noise_var + v * lam)))
        else:
            v_post = float(np.mean(np.where(lam > 0, 0.0, v)))
        v_post = max(v_post, floor)
        if v_post >= v:
            tau, r = ceil, z
        else:
            tau = 1.0 / (1.0 / v_post - 1.0 / v)
            r = tau * (z / v_post - mu / v)
        tau = max(tau, floor)
        nle = nle_step(r, tau, codebook, users, config, scale=scale)
        post = nle.posteriors
        if it == T:
            break
        mu = damping * nle.mu_bar + (1 - damping) * mu
        v = min(max(damping * nle.eta_bar + (1 - damping) * v, floor), ceil)
    return BaselineResult(np.argmax(post, axis=1), T, post, None)


def hypothesis_count(codebook: ScmaCodebook, n_slots: int) -> int:
    return codebook.Q ** n_slots


def map_oracle_detect(y, H, noise_var: float, codebook: ScmaCodebook, *, budget: int = MAP_BUDGET,
                      chunk: int = 1 << 14) -> BaselineResult:
    """Exhaustive minimisation of ``||y - H x||^2`` over all codeword combinations.

    Under a uniform prior and white Gaussian noise this is the joint MAP decision
    and it does not depend on ``noise_var``.
    """
    A = _dense(H)
    D, Q = codebook.D, codebook.Q
    S = A.shape[1] // D
    count = hypothesis_count(codebook, S)
    if count > budget:
        raise ValueError(f"{count} hypotheses exceed the MAP budget of {budget}")
    users = slot_users(S, codebook.J)
    # columns of H grouped per slot; every codeword's contribution precomputed
    chi = codebook.nonzero_codewords[users]  # (S, Q, D)
    contrib = np.einsum("msd,sqd->sqm", A.reshape(A.shape[0], S, D), chi)  # (S, Q, m)
    y = np.asarray(y, dtype=complex)
    best_cost, best = np.inf, None
    powers = Q ** np.arange(S - 1, -1, -1, dtype=np.int64)
    for start in range(0, count, chunk):
        ids = np.arange(start, min(start + chunk, count), dtype=np.int64)
        idx = (ids[:, None] // powers) % Q  # first slot is the most significant digit
        pred = contrib[np.arange(S), idx].sum(axis=1)  # (chunk, m)
        cost = np.sum(np.abs(y - pred) ** 2, axis=1)
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_cost, best = cost[k], idx[k].astype(np.intp)
    return BaselineResult(best, 1, None, None)
