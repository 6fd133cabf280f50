"""Memory AMP detector for the effective MIMO-OTFS SCMA model ``y = H x + w``.

Each iteration runs three stages:

1. a memory linear estimator. A matched-filter recursion stands in for the
   LMMSE matrix inverse, and its output is orthogonalised against every
   earlier input estimate;
2. an SCMA codeword denoiser that projects the per-slot posterior onto a
   Gaussian and removes the incoming message (extrinsic update);
3. damping over the last L estimates, with weights that minimise the
   predicted error variance in closed form.

Only sparse products with H and H^H touch the large dimensions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .scma import ScmaCodebook
from .spectral import (
    MomentCache,
    SpectralBounds,
    bounds_from_eigenvalues,
    compute_moments,
    estimate_bounds,
    gram_eigenvalues,
)

logger = logging.getLogger(__name__)

__all__ = [
    "DetectorConfig",
    "OpCounter",
    "MampState",
    "NleOutput",
    "IterationRecord",
    "DetectionResult",
    "prepare_spectrum",
    "init_state",
    "compute_varpi",
    "tau_of_xi",
    "compute_tau",
    "optimal_xi",
    "filter_step",
    "memory_le_step",
    "nle_step",
    "optimal_damping",
    "explicit_b",
    "fixed_rho_filter",
    "scale_columns",
    "damping_combine",
    "detect",
    "slot_users",
]


@dataclass
class DetectorConfig:
    max_iterations: int = 6
    damping_length: int = 3
    eigen_mode: str = "exact"
    moment_mode: str = "exact"
    n_probes: int = 64
    probe_seed: int = 2024
    tolerance: float = 1e-6
    var_floor: float = 1e-10
    var_ceiling: float = 1e6
    eps_floor: float = 1e-12
    xi_den_floor: float = 1e-12
    xi_inf_scale: float = 1e4
    cond_limit: float = 1e12
    column_scaling: str = "column"
    variance_estimator: str = "gram"
    b_mode: str = "factored"
    fallback: str = "previous"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.damping_length < 1:
            raise ValueError("damping_length must be at least 1")
        if self.eigen_mode not in ("exact", "bound"):
            raise ValueError(f"unknown eigen_mode {self.eigen_mode!r}")
        if self.moment_mode not in ("exact", "probe"):
            raise ValueError(f"unknown moment_mode {self.moment_mode!r}")
        if self.variance_estimator not in ("nle", "residual", "max", "gram"):
            raise ValueError(f"unknown variance_estimator {self.variance_estimator!r}")
        if self.b_mode not in ("factored", "explicit"):
            raise ValueError(f"unknown b_mode {self.b_mode!r}")
        if self.column_scaling not in ("column", "none"):
            raise ValueError(f"unknown column_scaling {self.column_scaling!r}")
        if self.fallback not in ("previous", "best"):
            raise ValueError(f"unknown fallback {self.fallback!r}")


@dataclass
class OpCounter:
    """Tally of sparse mat-vecs and complex multiplies."""

    matvecs: int = 0
    multiplies: int = 0

    def matvec(self, A) -> None:
        self.matvecs += 1
        self.multiplies += A.nnz if sp.issparse(A) else A.size

    def vec(self, n: int, times: int = 1) -> None:
        self.multiplies += n * times


def slot_users(n_slots: int, J: int) -> np.ndarray:
    """User owning each codeword slot; slots are grouped user by user."""
    if n_slots % J:
        raise ValueError(f"{n_slots} slots cannot be split evenly across {J} users")
    return np.repeat(np.arange(J), n_slots // J)


@dataclass
class MampState:
    """Everything carried from one iteration to the next.

    Lists are indexed by iteration minus one. ``V`` holds ``eta[i, j]`` for the
    accepted means; ``residuals[i]`` caches ``y - H mu^(i+1)``.
    """

    noise_var: float
    bounds: SpectralBounds
    moments: MomentCache
    n_rows: int
    n_cols: int
    t: int = 1
    mu: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    V: np.ndarray = None
    thetas: list = field(default_factory=list)
    xis: list = field(default_factory=list)
    r_bar: np.ndarray = None
    mf_r_bar: np.ndarray = None  # H^H r_bar
    r: np.ndarray = None
    tau: float = None
    varpi: tuple = None
    B: sp.csr_matrix = None  # only set when the B product is explicit

    @property
    def eta(self) -> float:
        return float(self.V[self.t - 1, self.t - 1])

    def phis(self, xi: float) -> np.ndarray:
        """``phi[t, i]`` for i = 1..t given the current ``xi_t``."""
        t = self.t
        th = np.asarray(self.thetas[1:t], dtype=float)
        # tail[i] = prod(theta_{i+2} .. theta_t) for 0-based i < t - 1
        tail = np.cumprod(th[::-1])[::-1]
        out = np.empty(t)
        out[: t - 1] = np.asarray(self.xis[: t - 1], dtype=float) * tail
        out[t - 1] = xi
        return out


def scale_columns(H, mode: str = "column"):
    """Equalise column energies: ``H = H_s G`` with G diagonal and positive.

    Detecting ``G x`` on ``H_s`` is the same model with a per-entry gain on the
    codewords. Gains are normalised to unit mean square, so ``a_0`` does not
    change. Returns ``(H_s, gains)``.
    """
    H = sp.csr_matrix(H) if not sp.issparse(H) else H.tocsr()
    n = H.shape[1]
    if mode == "none":
        return H, np.ones(n)
    energy = np.asarray(abs(H.multiply(H.conj())).sum(axis=0)).ravel()
    live = energy > 0
    if not np.any(live):
        return H, np.ones(n)
    # an all-zero column carries no information; leave it unscaled
    energy = np.where(live, energy, energy[live].mean())
    gains = np.sqrt(energy / energy.mean())
    return (H @ sp.diags(1.0 / gains)).tocsr(), gains


def prepare_spectrum(H, config: DetectorConfig, eigenvalues: np.ndarray | None = None):
    """Bounds and moments for one channel realisation.

    With column scaling enabled the spectrum is that of the scaled matrix
    (``eigenvalues``, when given, must belong to it as well).
    """
    H, _ = scale_columns(H, config.column_scaling)
    if eigenvalues is None and config.moment_mode == "exact":
        eigenvalues = gram_eigenvalues(H)
    if config.eigen_mode == "exact":
        bounds = bounds_from_eigenvalues(eigenvalues) if eigenvalues is not None else estimate_bounds(H)
    else:
        bounds = estimate_bounds(H, "bound")
    moments = compute_moments(
        H, bounds, config.max_iterations, config.moment_mode,
        eigenvalues=eigenvalues, n_probes=config.n_probes, seed=config.probe_seed,
    )
    return bounds, moments


def init_state(y, H, noise_var: float, bounds: SpectralBounds, moments: MomentCache,
               config: DetectorConfig | None = None) -> MampState:
    """Zero initial mean and the energy-based initial variance (floored)."""
    config = config or DetectorConfig()
    m, n = H.shape
    if y.shape != (m,):
        raise ValueError(f"y has shape {y.shape}, expected ({m},)")
    size = config.max_iterations + 2
    state = MampState(noise_var, bounds, moments, m, n, V=np.zeros((size, size)))
    eta = (np.real(np.vdot(y, y)) / n - m * noise_var / n) / moments.a0
    state.V[0, 0] = max(eta, config.var_floor)
    state.mu.append(np.zeros(n, dtype=complex))
    state.residuals.append(np.asarray(y, dtype=complex).copy())
    state.r_bar = np.zeros(m, dtype=complex)
    state.mf_r_bar = np.zeros(n, dtype=complex)
    return state


def compute_varpi(state: MampState) -> tuple:
    """``(w0, w1, w2, w3)``; requires ``state.thetas`` to include theta_t."""
    t = state.t
    a = state.moments.a
    lp = state.moments.lam_plus
    s2 = state.noise_var
    V = state.V
    w1 = s2 * a[0] + V[t - 1, t - 1] * state.moments.abar(0, 0)
    if t == 1:
        return 0.0, float(w1), 0.0, 0.0
    phi = state.phis(0.0)[: t - 1]
    k = t - np.arange(1, t)  # t - i for i = 1 .. t-1
    w0 = phi @ a[k] / a[0]
    abar_0k = lp * a[k] - a[k + 1] - a[0] * a[k]
    w2 = -phi @ (s2 * a[k] + V[t - 1, : t - 1] * abar_0k)
    kk = k[:, None] + k[None, :]
    abar_kk = lp * a[kk] - a[kk + 1] - np.outer(a[k], a[k])
    w3 = phi @ (s2 * a[kk] + V[: t - 1, : t - 1] * abar_kk) @ phi
    return float(w0), float(w1), float(w2), float(w3)


def tau_of_xi(varpi: tuple, a0: float, xi: float) -> float:
    w0, w1, w2, w3 = varpi
    den = a0 ** 2 * (w0 + xi) ** 2
    if den == 0:
        return np.inf
    return (w1 * xi ** 2 - 2 * w2 * xi + w3) / den


def compute_tau(state: MampState, xi: float) -> float:
    """Extrinsic variance of the linear stage as a function of ``xi_t``."""
    return tau_of_xi(state.varpi, state.moments.a0, xi)


def optimal_xi(state: MampState, config: DetectorConfig | None = None) -> tuple[float, float]:
    """Minimiser of the extrinsic variance and the variance it attains.

    The only finite stationary point competes with ``xi -> +inf``, whose limit
    is ``w1 / a0^2``; the infinite branch is executed with a large finite xi.
    It is also taken when the stationary value is not a positive variance.
    """
    config = config or DetectorConfig()
    w0, w1, w2, w3 = state.varpi
    a0 = state.moments.a0
    tau_inf = w1 / a0 ** 2
    xi_inf = config.xi_inf_scale * max(1.0, abs(w0))
    if state.t == 1:
        return 1.0, tau_of_xi(state.varpi, a0, 1.0)
    den = w0 * w1 + w2
    if abs(den) > config.xi_den_floor * max(1.0, abs(w0 * w1), abs(w2)):
        xi = (w0 * w2 + w3) / den
        tau = tau_of_xi(state.varpi, a0, xi)
        # a non-positive "variance" means the stationary point is spurious
        if np.isfinite(tau) and config.var_floor < tau <= tau_inf:
            return float(xi), float(tau)
    return float(xi_inf), float(tau_inf)


def filter_step(r_bar_prev, mf_prev, residual, H, lam_plus: float, theta: float, xi: float,
                ops: OpCounter | None = None, B=None):
    """One step of ``r_bar = theta * B r_bar_prev + xi * residual``.

    ``mf_prev`` must equal ``H^H r_bar_prev``. Without an explicit ``B`` the
    product is formed as ``lam_plus r - H (H^H r)`` from the cached ``mf_prev``.
    Returns ``(r_bar, H^H r_bar)``.
    """
    if B is None:
        Bv = lam_plus * r_bar_prev - H @ mf_prev
    else:
        Bv = B @ r_bar_prev
    r_bar = theta * Bv + xi * residual
    mf = H.conj().T @ r_bar
    if ops is not None:
        ops.matvec(H if B is None else B)
        ops.matvec(H)
        ops.vec(r_bar.size, 3 if B is None else 2)
    return r_bar, mf


def explicit_b(H, lam_plus: float) -> sp.csr_matrix:
    """``lam_plus I - H H^H`` as a sparse matrix."""
    H = sp.csr_matrix(H)
    return (lam_plus * sp.identity(H.shape[0], dtype=complex, format="csr") - H @ H.conj().T).tocsr()


def fixed_rho_filter(y, H, rho: float, mu=None, lam_plus: float | None = None,
                     iterations: int = 200) -> list:
    """Memory filter with ``rho``, ``theta`` and ``xi = theta`` held fixed.

    Without orthogonalisation the outputs ``z^(t) = mu + H^H r_bar^(t)`` form a
    truncated Neumann series of the LMMSE inverse and converge to it. Returns
    the list of all ``z^(t)``.
    """
    H = sp.csr_matrix(H)
    if lam_plus is None:
        lam_plus = estimate_bounds(H).lam_plus
    mu = np.zeros(H.shape[1], dtype=complex) if mu is None else np.asarray(mu, dtype=complex)
    theta = 1.0 / (lam_plus + rho)
    residual = np.asarray(y, dtype=complex) - H @ mu
    r_bar = np.zeros(H.shape[0], dtype=complex)
    mf = np.zeros(H.shape[1], dtype=complex)
    out = []
    for _ in range(iterations):
        r_bar, mf = filter_step(r_bar, mf, residual, H, lam_plus, theta, theta)
        out.append(mu + mf)
    return out


def memory_le_step(state: MampState, y, H, config: DetectorConfig | None = None,
                   ops: OpCounter | None = None) -> dict:
    """Linear stage of iteration ``state.t``; updates ``state.r`` and ``state.tau``."""
    config = config or DetectorConfig()
    t = state.t
    lp = state.bounds.lam_plus
    a0 = state.moments.a0
    rho = state.noise_var / state.eta
    theta = 1.0 / (lp + rho)
    state.thetas = state.thetas[: t - 1] + [theta]
    state.varpi = compute_varpi(state)
    xi, tau = optimal_xi(state, config)
    state.xis = state.xis[: t - 1] + [xi]

    phi = state.phis(xi)
    a = state.moments.a
    c = np.array([-phi[i - 1] * a[t - i] for i in range(1, t)] + [1.0 - xi * a0])
    eps = 1.0 - c.sum()

    if t == 1:
        # r_bar^(0) = 0: skip the B product
        r_bar = xi * state.residuals[0]
        mf = H.conj().T @ r_bar
        if ops is not None:
            ops.matvec(H)
            ops.vec(r_bar.size)
    else:
        r_bar, mf = filter_step(state.r_bar, state.mf_r_bar, state.residuals[t - 1], H,
                                lp, theta, xi, ops, state.B)
    state.r_bar, state.mf_r_bar = r_bar, mf
    z = state.mu[t - 1] + mf
    degenerate = abs(eps) < config.eps_floor
    if degenerate and state.r is not None:
        logger.debug("iteration %d: epsilon %.3g below floor, keeping previous extrinsic", t, eps)
    else:
        acc = z.copy()
        for i in range(t):
            if c[i] != 0:
                acc -= c[i] * state.mu[i]
        state.r = acc / eps
        state.tau = max(tau, config.var_floor)
        if ops is not None:
            ops.vec(z.size, t + 1)
    return {
        "theta": theta, "xi": xi, "tau": state.tau, "eps": eps, "c": c,
        "varpi": state.varpi, "degenerate": degenerate, "z": z,
    }


@dataclass
class NleOutput:
    posteriors: np.ndarray  # (S, Q)
    g: np.ndarray
    delta: float
    mu_bar: np.ndarray
    eta_bar: float
    clamped: bool


def nle_step(r, tau: float, codebook: ScmaCodebook, users: np.ndarray | None = None,
             config: DetectorConfig | None = None, ops: OpCounter | None = None,
             prior: np.ndarray | None = None, scale: np.ndarray | None = None) -> NleOutput:
    """Codeword-wise posterior, Gaussian projection and extrinsic update.

    ``r`` holds D entries per slot; ``users[c]`` selects the codebook of slot c.
    ``prior`` is an optional (S, Q) array of a priori probabilities and
    ``scale`` an optional (S, D) gain applied to every codeword entry.
    """
    config = config or DetectorConfig()
    if tau <= 0:
        raise ValueError("tau must be positive")
    r = np.asarray(r)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite extrinsic mean")
    D = codebook.D
    R = r.reshape(-1, D)
    S = R.shape[0]
    if users is None:
        users = slot_users(S, codebook.J)
    chi = codebook.nonzero_codewords[users]  # (S, Q, D)
    if scale is not None:
        chi = chi * np.asarray(scale).reshape(S, 1, D)
    dist = np.sum(np.abs(chi - R[:, None, :]) ** 2, axis=2)
    logp = -dist / tau
    if prior is not None:
        logp = logp + np.log(np.maximum(prior, 1e-300))
    logp -= logp.max(axis=1, keepdims=True)
    post = np.exp(logp)
    post /= post.sum(axis=1, keepdims=True)
    g = np.einsum("sq,sqd->sd", post, chi)
    second = np.einsum("sq,sqd->sd", post, np.abs(chi) ** 2)
    delta = max(float(np.mean(second - np.abs(g) ** 2)), config.var_floor)
    g = g.ravel()
    if delta < tau:
        eta_bar = 1.0 / (1.0 / delta - 1.0 / tau)
        mu_bar = eta_bar * (g / delta - r / tau)
        clamped = False
    else:
        eta_bar = config.var_ceiling
        mu_bar = g.copy()
        clamped = True
    if ops is not None:
        n = r.size
        ops.vec(n * codebook.Q, 3)
        ops.vec(n, 2)
    return NleOutput(post, g, delta, mu_bar, float(eta_bar), clamped)


def optimal_damping(Vbar: np.ndarray, cond_limit: float = 1e12):
    """Weights minimising ``Lam^H Vbar Lam`` subject to ``sum(Lam) = 1``.

    Returns ``(Lam, eta)`` or ``None`` when Vbar is numerically singular or the
    minimum is not a positive variance.
    """
    n = Vbar.shape[0]
    if not np.all(np.isfinite(Vbar)) or np.linalg.cond(Vbar) >= cond_limit:
        return None
    w = np.linalg.solve(Vbar, np.ones(n))
    s = float(np.real(np.sum(w)))
    if not np.isfinite(s) or s <= 0:
        return None
    return w / s, 1.0 / s


def damping_combine(state: MampState, nle: NleOutput, y, H, config: DetectorConfig | None = None,
                    ops: OpCounter | None = None) -> dict:
    """Append ``mu^(t+1)`` and its variance row to the state.

    The weights solve the constrained quadratic on the trailing window. When
    that window's matrix is singular or not positive on the constraint set,
    shorter trailing windows (always containing the new estimate) are tried
    before falling back to the previous accepted mean.
    """
    config = config or DetectorConfig()
    t = state.t
    n, m = state.n_cols, state.n_rows
    a0 = state.moments.a0
    L = min(config.damping_length, t + 1)
    window = list(range(t - L + 1, t))  # 0-based indices of accepted means used
    res_bar = y - H @ nle.mu_bar
    if ops is not None:
        ops.matvec(H)
        ops.vec(m, 1 + len(window))
    Vbar = np.zeros((L, L), dtype=complex)
    if window:
        Vbar[:-1, :-1] = state.V[np.ix_(window, window)]
    for k, i in enumerate(window):
        cross = (np.vdot(res_bar, state.residuals[i]) / n - m * state.noise_var / n) / a0
        Vbar[-1, k] = cross
        Vbar[k, -1] = np.conj(cross)
    eta_bar = nle.eta_bar
    if config.variance_estimator != "nle":
        est = (np.real(np.vdot(res_bar, res_bar)) / n - m * state.noise_var / n) / a0
        eta_bar = est if config.variance_estimator == "residual" else max(est, eta_bar)
        eta_bar = max(eta_bar, config.var_floor)
    Vbar[-1, -1] = eta_bar
    shift = 0.0
    if config.variance_estimator == "gram":
        # every window entry from the same residual estimator; the common
        # noise term m sigma^2 / (n a0) is a constant shift of all entries,
        # which leaves the constrained minimiser unchanged
        R = np.column_stack([state.residuals[i] for i in window] + [res_bar])
        shift = m * state.noise_var / (n * a0)
        Vbar = (R.conj().T @ R) / (n * a0) - shift
        if ops is not None:
            ops.vec(m, L * (L - 1) // 2)

    Vsolve = Vbar + shift
    # full window first; if it is unusable, drop the oldest entries
    lam, used, fallback = None, L, False
    for start in range(0, max(L - 1, 1)):
        sol = optimal_damping(Vsolve[start:, start:], config.cond_limit)
        if sol is not None:
            lam = np.zeros(L, dtype=complex)
            lam[start:], eta_new = sol
            eta_new = max(eta_new - shift, config.var_floor)
            used = L - start
            break
    if lam is None:
        lam = np.zeros(L, dtype=complex)
        if config.fallback == "best":
            # the feasible unit vector with the smallest objective value
            k = int(np.argmin(np.real(np.diag(Vbar))))
        else:
            # all weight on the latest accepted mean
            k = L - 2 if L > 1 else L - 1
        lam[k] = 1.0
        eta_new = float(np.real(Vbar[k, k]))
        fallback = True

    mu_new = lam[-1] * nle.mu_bar
    res_new = lam[-1] * res_bar
    for k, i in enumerate(window):
        if lam[k] != 0:
            mu_new = mu_new + lam[k] * state.mu[i]
            res_new = res_new + lam[k] * state.residuals[i]
    if ops is not None:
        ops.vec(n + m, L)

    state.mu.append(mu_new)
    state.residuals.append(res_new)
    state.V[t, : t + 1] = eta_new
    state.V[: t + 1, t] = eta_new
    state.t = t + 1
    return {"lam": lam, "eta": eta_new, "Vbar": Vsolve, "fallback": fallback, "window": used}


@dataclass
class IterationRecord:
    t: int
    tau: float
    eta: float
    xi: float
    eps: float
    varpi: tuple
    a0: float
    delta: float
    eta_bar: float
    clamped: bool
    degenerate: bool
    lam: np.ndarray | None = None
    Vbar: np.ndarray | None = None
    fallback: bool = False
    window: int = 0  # damping entries actually optimised


@dataclass
class DetectionResult:
    decisions: np.ndarray  # (S,) codeword index per slot
    posteriors: np.ndarray  # (S, Q)
    iterations: int
    converged: bool
    failed: bool
    diagnostics: list
    ops: OpCounter
    iteration_decisions: list = field(default_factory=list)


def detect(y, H, noise_var: float, codebook: ScmaCodebook, config: DetectorConfig | None = None, *,
           bounds: SpectralBounds | None = None, moments: MomentCache | None = None,
           eigenvalues: np.ndarray | None = None) -> DetectionResult:
    """Run the memory AMP detector.

    Stops after ``config.max_iterations`` iterations or once the relative change
    of the damped mean falls below ``config.tolerance``. Decisions are the
    argmax of the last codeword posteriors. ``iteration_decisions`` keeps the
    decisions of every iteration (for convergence traces).
    """
    config = config or DetectorConfig()
    y = np.asarray(y, dtype=complex)
    if bounds is None or moments is None:
        bounds, moments = prepare_spectrum(H, config, eigenvalues)
    H, gains = scale_columns(H, config.column_scaling)
    S = H.shape[1] // codebook.D
    users = slot_users(S, codebook.J)
    scale = None if config.column_scaling == "none" else gains.reshape(S, codebook.D)
    ops = OpCounter()
    state = init_state(y, H, noise_var, bounds, moments, config)
    if config.b_mode == "explicit":
        state.B = explicit_b(H, bounds.lam_plus)
    diagnostics, per_iter = [], []
    post = None
    converged = failed = False
    T = config.max_iterations
    for it in range(1, T + 1):
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                le = memory_le_step(state, y, H, config, ops)
                nle = nle_step(state.r, state.tau, codebook, users, config, ops, scale=scale)
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("detection failed at iteration %d: %s", it, exc)
            failed = True
            break
        post = nle.posteriors
        per_iter.append(np.argmax(post, axis=1))
        rec = IterationRecord(it, state.tau, state.eta, le["xi"], le["eps"], le["varpi"],
                              moments.a0, nle.delta, nle.eta_bar, nle.clamped, le["degenerate"])
        diagnostics.append(rec)
        if it == T:
            break
        damp = damping_combine(state, nle, y, H, config, ops)
        rec.lam, rec.Vbar, rec.fallback = damp["lam"], damp["Vbar"], damp["fallback"]
        rec.window = damp["window"]
        if not np.all(np.isfinite(state.mu[-1])):
            failed = True
            break
        if rec.fallback:
            # the fallback repeats the previous mean; that is a stall, not convergence
            continue
        prev = np.linalg.norm(state.mu[-2])
        if prev > 0 and np.linalg.norm(state.mu[-1] - state.mu[-2]) < config.tolerance * prev:
            converged = True
            break
    if post is None:
        post = np.full((S, codebook.Q), 1.0 / codebook.Q)
        per_iter.append(np.zeros(S, dtype=int))
    return DetectionResult(
        decisions=np.argmax(post, axis=1),
        posteriors=post,
        iterations=len(diagnostics),
        converged=converged,
        failed=failed,
        diagnostics=diagnostics,
        ops=ops,
        iteration_decisions=per_iter,
    )


def diagnostics_rows(result: DetectionResult) -> list[dict]:
    """Flatten the per-iteration records into CSV-friendly rows."""
    rows = []
    for rec in result.diagnostics:
        row = {"t": rec.t, "tau": rec.tau, "eta": rec.eta, "xi": rec.xi, "eps": rec.eps,
               "delta": rec.delta, "eta_bar": rec.eta_bar, "fallback": int(rec.fallback)}
        if rec.lam is not None:
            for k, v in enumerate(rec.lam):
                row[f"lam_{k}_re"] = float(np.real(v))
                row[f"lam_{k}_im"] = float(np.imag(v))
        rows.append(row)
    return rows
