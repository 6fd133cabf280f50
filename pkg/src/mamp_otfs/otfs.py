"""OTFS modulation and demodulation with a rectangular pulse.

With a rectangular pulse the ISFFT followed by the Heisenberg transform
collapses to an inverse DFT along the Doppler axis; the Wigner transform plus
SFFT collapses to a forward DFT. All DFTs are unitary.
"""

from __future__ import annotations

import numpy as np

__all__ = ["modulate", "demodulate", "append_cp", "strip_cp", "vec", "unvec"]


def vec(X: np.ndarray) -> np.ndarray:
    """Column-wise vectorisation (delay index fastest)."""
    return np.asarray(X).reshape(-1, order="F")


def unvec(x: np.ndarray, M: int, N: int) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != M * N:
        raise ValueError(f"vector length {x.shape[-1]} != M*N = {M * N}")
    return x.reshape((M, N), order="F")


def modulate(X: np.ndarray) -> np.ndarray:
    """Time-domain samples of one delay-Doppler frame, ``vec(X F_N^H)``."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"expected an M x N frame, got shape {X.shape}")
    return vec(np.fft.ifft(X, axis=1, norm="ortho"))


def demodulate(r: np.ndarray, M: int, N: int) -> np.ndarray:
    """Delay-Doppler frame ``unvec(r) F_N`` from MN received samples (CP removed)."""
    R = unvec(r, M, N)
    return np.fft.fft(R, axis=1, norm="ortho")


def append_cp(s: np.ndarray, n_cp: int) -> np.ndarray:
    """Prepend the last ``n_cp`` samples (works on the last axis)."""
    s = np.asarray(s)
    if n_cp < 0:
        raise ValueError("CP length must be non-negative")
    if n_cp > s.shape[-1]:
        raise ValueError(f"CP length {n_cp} exceeds frame length {s.shape[-1]}")
    if n_cp == 0:
        return s.copy()
    return np.concatenate([s[..., -n_cp:], s], axis=-1)


def strip_cp(s: np.ndarray, n_cp: int) -> np.ndarray:
    s = np.asarray(s)
    if n_cp < 0 or n_cp > s.shape[-1]:
        raise ValueError(f"invalid CP length {n_cp} for {s.shape[-1]} samples")
    return s[..., n_cp:].copy()
