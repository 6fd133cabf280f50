import numpy as np
import pytest
import scipy.sparse as sp

from mamp_otfs.baselines import lmmse_estimate, nearest_codeword
from mamp_otfs.mamp import (
    DetectorConfig,
    MampState,
    OpCounter,
    compute_tau,
    compute_varpi,
    damping_combine,
    detect,
    explicit_b,
    fixed_rho_filter,
    init_state,
    memory_le_step,
    nle_step,
    optimal_damping,
    optimal_xi,
    prepare_spectrum,
    scale_columns,
    slot_users,
    tau_of_xi,
)
from mamp_otfs.scma import ScmaCodebook, build_default_codebook
from mamp_otfs.spectral import MomentCache, SpectralBounds, estimate_bounds


def random_system(m=64, n=48, noise_var=0.05, seed=0, codebook=None):
    cb = codebook or build_default_codebook()
    rng = np.random.default_rng(seed)
    H = (rng.normal(size=(m, n)) + 1j * rng.normal(size=(m, n))) / np.sqrt(2 * m)
    S = n // cb.D
    idx = rng.integers(0, cb.Q, size=S)
    x = cb.nonzero_codewords[slot_users(S, cb.J), idx].ravel()
    w = np.sqrt(noise_var / 2) * (rng.normal(size=m) + 1j * rng.normal(size=m))
    return sp.csr_matrix(H), H @ x + w, x, idx, cb


def advance(state, y, H, cb, config, steps):
    """Run ``steps`` full iterations (LE, NLE, damping) on an existing state."""
    users = slot_users(H.shape[1] // cb.D, cb.J)
    for _ in range(steps):
        memory_le_step(state, y, H, config)
        nle = nle_step(state.r, state.tau, cb, users, config)
        damping_combine(state, nle, y, H, config)
    return state


def make_state(seed=0, noise_var=0.05, config=None):
    config = config or DetectorConfig(column_scaling="none")
    H, y, x, idx, cb = random_system(seed=seed, noise_var=noise_var)
    bounds, moments = prepare_spectrum(H, config)
    return init_state(y, H, noise_var, bounds, moments, config), H, y, cb, config


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(max_iterations=0)
    with pytest.raises(ValueError):
        DetectorConfig(damping_length=0)
    with pytest.raises(ValueError):
        DetectorConfig(eigen_mode="guess")
    with pytest.raises(ValueError):
        DetectorConfig(variance_estimator="oracle")


def test_init_state_floor():
    H = sp.identity(4, format="csr", dtype=complex)
    b = estimate_bounds(H)
    mc = MomentCache(np.array([1.0, 0, 0, 0, 0]), 1.0)
    st = init_state(np.zeros(4, dtype=complex), H, 1.0, b, mc)
    assert st.eta == pytest.approx(1e-10)


def test_init_state_energy_estimate():
    cb = build_default_codebook()
    etas = []
    for s in range(200):
        H, y, x, _, _ = random_system(noise_var=0.0, seed=s)
        config = DetectorConfig(column_scaling="none")
        b, mc = prepare_spectrum(H, config)
        etas.append(init_state(y, H, 0.0, b, mc).eta)
    assert np.mean(etas) == pytest.approx(cb.entry_energy, rel=0.03)


def test_init_state_shape_check():
    H = sp.identity(4, format="csr", dtype=complex)
    mc = MomentCache(np.ones(5), 1.0)
    with pytest.raises(ValueError):
        init_state(np.zeros(3), H, 1.0, estimate_bounds(H), mc)


def test_first_iteration_closed_form():
    state, H, y, cb, config = make_state()
    out = memory_le_step(state, y, H, config)
    a0 = state.moments.a0
    assert out["xi"] == 1.0
    w0, w1, w2, w3 = state.varpi
    assert (w0, w2, w3) == (0.0, 0.0, 0.0)
    assert state.tau == pytest.approx(w1 / a0 ** 2)
    np.testing.assert_allclose(state.r, H.conj().T @ y / a0, rtol=1e-12)


def double_sum_tau(state, xi):
    """Extrinsic variance written directly as a double sum over the memory."""
    t = state.t
    a = state.moments.a
    lp = state.moments.lam_plus
    phi = state.phis(xi)
    num = 0.0
    for i in range(1, t + 1):
        for j in range(1, t + 1):
            ki, kj = t - i, t - j
            abar = lp * a[ki + kj] - a[ki + kj + 1] - a[ki] * a[kj]
            num += phi[i - 1] * phi[j - 1] * (state.noise_var * a[ki + kj] + state.V[i - 1, j - 1] * abar)
    eps = sum(phi[i - 1] * a[t - i] for i in range(1, t)) + xi * state.moments.a0
    return num / eps ** 2


@pytest.mark.parametrize("seed", range(5))
def test_tau_matches_double_sum(seed):
    state, H, y, cb, config = make_state(seed)
    advance(state, y, H, cb, config, 2)
    assert state.t == 3
    rho = state.noise_var / state.eta
    state.thetas = state.thetas[:2] + [1.0 / (state.bounds.lam_plus + rho)]
    state.varpi = compute_varpi(state)
    for xi in (-2.0, 0.3, 1.0, 7.5):
        ref = double_sum_tau(state, xi)
        assert compute_tau(state, xi) == pytest.approx(ref, rel=1e-10)


def test_tau_pole():
    varpi = (0.4, 1.0, 0.1, 0.2)
    assert tau_of_xi(varpi, 1.0, -0.4) == np.inf
    assert tau_of_xi(varpi, 1.0, -0.4 + 1e-8) > 1e10


def test_optimal_xi_first_iteration():
    state, H, y, cb, config = make_state()
    state.thetas = [1.0]
    state.varpi = compute_varpi(state)
    assert optimal_xi(state)[0] == 1.0


@pytest.mark.parametrize("seed", range(4))
def test_optimal_xi_beats_grid(seed):
    state, H, y, cb, config = make_state(seed)
    grid = np.linspace(-100, 100, 10_001)
    for _ in range(5):
        out = memory_le_step(state, y, H, config)
        if state.t > 1:
            w0 = state.varpi[0]
            g = grid[np.abs(grid + w0) > 1e-3]
            vals = np.array([compute_tau(state, v) for v in g])
            assert compute_tau(state, out["xi"]) <= vals.min() + 1e-9
        users = slot_users(H.shape[1] // cb.D, cb.J)
        damping_combine(state, nle_step(state.r, state.tau, cb, users, config), y, H, config)


def test_optimal_xi_degenerate_takes_infinite_branch():
    mc = MomentCache(np.array([2.0, 0.1, 0.1, 0.1, 0.1]), 1.0)
    st = MampState(0.1, SpectralBounds(0.5, 1.5), mc, 4, 4, t=2)
    w0, w1 = 0.5, 3.0
    st.varpi = (w0, w1, -w0 * w1, 0.7)
    xi, tau = optimal_xi(st)
    assert xi == DetectorConfig().xi_inf_scale * max(1, w0)
    assert tau == pytest.approx(w1 / 4.0)


def test_identity_fixed_rho_single_step():
    n = 6
    H = sp.identity(n, format="csr", dtype=complex)
    rng = np.random.default_rng(0)
    y = rng.normal(size=n) + 1j * rng.normal(size=n)
    mu = rng.normal(size=n)
    rho = 0.7
    z = fixed_rho_filter(y, H, rho, mu, iterations=1)[0]
    np.testing.assert_allclose(z, mu + (y - mu) / (1 + rho), atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_fixed_rho_filter_converges_to_lmmse(seed):
    H, y, *_ = random_system(seed=seed)
    rng = np.random.default_rng(seed)
    mu = 0.3 * (rng.normal(size=48) + 1j * rng.normal(size=48))
    rho = 0.4
    z = fixed_rho_filter(y, H, rho, mu, iterations=200)[-1]
    ref = lmmse_estimate(y, H, rho, mu, 1.0)
    assert np.linalg.norm(z - ref) <= 1e-6 * np.linalg.norm(ref)


def test_explicit_b_matches_factored_product():
    H, *_ = random_system(32, 24)
    B = explicit_b(H, 1.3)
    v = np.random.default_rng(0).normal(size=32)
    np.testing.assert_allclose(B @ v, 1.3 * v - H @ (H.conj().T @ v), atol=1e-12)


def test_nle_zero_noise_point_mass():
    cb = build_default_codebook()
    users = slot_users(6, cb.J)
    idx = np.arange(6) % cb.Q
    r = cb.nonzero_codewords[users, idx].ravel()
    out = nle_step(r, 1e-9, cb, users)
    np.testing.assert_allclose(out.posteriors[np.arange(6), idx], 1.0)
    np.testing.assert_allclose(out.g, r, atol=1e-12)
    assert out.delta <= 1e-9


def test_nle_antipodal_scalar_matches_tanh():
    cw = np.zeros((1, 2, 2), dtype=complex)
    cw[0, :, 0] = [1.0, -1.0]
    # second resource carries nothing, so mean energy is 1 with D=1
    cb = ScmaCodebook(cw, np.array([[0]]))
    rng = np.random.default_rng(1)
    r = rng.normal(size=20) + 1j * rng.normal(size=20)
    tau = 0.8
    out = nle_step(r, tau, cb, np.zeros(20, dtype=int))
    np.testing.assert_allclose(out.g.real, np.tanh(2 * r.real / tau), atol=1e-12)
    np.testing.assert_allclose(out.g.imag, 0, atol=1e-12)


def test_nle_symmetric_zero_input():
    cb = build_default_codebook()
    users = slot_users(12, cb.J)
    out = nle_step(np.zeros(24, dtype=complex), 1.0, cb, users)
    np.testing.assert_allclose(out.g, 0, atol=1e-12)
    assert out.delta == pytest.approx(cb.entry_energy)


def test_nle_extrinsic_clamp():
    cb = build_default_codebook()
    users = slot_users(6, cb.J)
    out = nle_step(np.zeros(12, dtype=complex), 1e-3, cb, users)
    assert out.clamped and out.eta_bar == DetectorConfig().var_ceiling
    with pytest.raises(ValueError):
        nle_step(np.zeros(12), 0.0, cb, users)


def test_nle_scale_matches_scaled_codebook():
    cb = build_default_codebook()
    users = slot_users(6, cb.J)
    scale = np.full((6, 2), 1.7)
    rng = np.random.default_rng(0)
    r = rng.normal(size=12) + 1j * rng.normal(size=12)
    a = nle_step(r, 0.5, cb, users, scale=scale)
    b = nle_step(r / 1.7, 0.5 / 1.7 ** 2, cb, users)
    np.testing.assert_allclose(a.posteriors, b.posteriors, atol=1e-12)
    np.testing.assert_allclose(a.g, 1.7 * b.g, atol=1e-12)


def test_damping_symmetric_case():
    lam, eta = optimal_damping(np.eye(2))
    np.testing.assert_allclose(lam, [0.5, 0.5])
    assert eta == pytest.approx(0.5)


def test_damping_prefers_low_variance():
    lam, eta = optimal_damping(np.diag([1.0, 1e-9]))
    np.testing.assert_allclose(lam, [0, 1], atol=1e-8)
    assert eta == pytest.approx(1e-9, rel=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_damping_beats_random_search(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    V = A @ A.T + 0.1 * np.eye(3)
    lam, _ = optimal_damping(V)
    best = 0.5 * lam @ V @ lam
    X = rng.normal(scale=3, size=(100_000, 3))
    X[:, -1] = 1 - X[:, :-1].sum(axis=1)
    assert best <= np.min(0.5 * np.einsum("ki,ij,kj->k", X, V, X)) + 1e-9


def test_damping_singular_returns_none():
    assert optimal_damping(np.ones((2, 2))) is None
    assert optimal_damping(np.array([[1.0, np.nan], [np.nan, 1.0]])) is None
    assert optimal_damping(-np.eye(2)) is None


def test_eps_identity_and_window():
    H, y, x, idx, cb = random_system(seed=2)
    res = detect(y, H, 0.05, cb, DetectorConfig(tolerance=0.0))
    for rec in res.diagnostics:
        assert abs(rec.eps - rec.a0 * (rec.varpi[0] + rec.xi)) <= 1e-10 * max(1.0, abs(rec.eps))
    assert all(1 <= rec.window <= 3 for rec in res.diagnostics[:-1])


def test_scale_columns_factorisation():
    H, *_ = random_system(seed=4)
    Hs, g = scale_columns(H @ sp.diags(np.linspace(0.2, 3, 48)))
    col = np.asarray(abs(Hs.multiply(Hs.conj())).sum(axis=0)).ravel()
    np.testing.assert_allclose(col, col.mean(), rtol=1e-12)
    np.testing.assert_allclose((Hs @ sp.diags(g)).toarray(), (H @ sp.diags(np.linspace(0.2, 3, 48))).toarray(),
                               atol=1e-12)
    assert np.mean(g ** 2) == pytest.approx(1.0)
    same, ones = scale_columns(H, "none")
    assert np.all(ones == 1)


def test_identity_single_user_is_nearest_codeword():
    cb = build_default_codebook(2, 1, 4, 1)
    rng = np.random.default_rng(0)
    S = 40
    H = sp.identity(S, format="csr", dtype=complex)
    idx = rng.integers(0, 4, S)
    y = cb.nonzero_codewords[0, idx, 0] + 0.4 * (rng.normal(size=S) + 1j * rng.normal(size=S))
    res = detect(y, H, 0.32, cb, DetectorConfig(eigen_mode="exact"))
    np.testing.assert_array_equal(res.decisions, nearest_codeword(y, cb))


def test_detect_noiseless_random_system():
    H, y, x, idx, cb = random_system(128, 48, noise_var=0.0, seed=3)
    res = detect(y, H, 1e-12, cb)
    assert not res.failed
    np.testing.assert_array_equal(res.decisions, idx)


@pytest.mark.parametrize("mode", ["nle", "residual", "max", "gram"])
def test_detect_variance_estimators(mode):
    H, y, x, idx, cb = random_system(96, 48, noise_var=0.01, seed=5)
    res = detect(y, H, 0.01, cb, DetectorConfig(variance_estimator=mode))
    assert not res.failed
    assert np.mean(res.decisions != idx) < 0.1


@pytest.mark.parametrize("seed", range(5))
def test_damping_weights_invariant_to_constant_shift(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 3)) + 1j * rng.normal(size=(4, 3))
    V = A.conj().T @ A
    lam, eta = optimal_damping(V)
    lam_s, eta_s = optimal_damping(V + 0.7)
    np.testing.assert_allclose(lam_s, lam, atol=1e-10)
    assert eta_s == pytest.approx(eta + 0.7, rel=1e-10)


def test_gram_estimator_weights_combine_residuals():
    # the chosen combination of residuals has the smallest norm among all affine ones
    H, y, x, idx, cb = random_system(96, 48, noise_var=0.02, seed=11)
    res = detect(y, H, 0.02, cb, DetectorConfig(variance_estimator="gram", tolerance=0))
    recs = [r for r in res.diagnostics if r.lam is not None and not r.fallback and r.window == len(r.lam)]
    assert recs
    for r in recs:
        V = r.Vbar
        np.testing.assert_allclose(V, V.conj().T, atol=1e-12)
        # positive semidefinite once the common noise offset is restored
        assert np.linalg.eigvalsh(V).min() > -1e-10
        lam = r.lam
        assert np.sum(lam) == pytest.approx(1.0)


def test_fallback_option():
    with pytest.raises(ValueError):
        DetectorConfig(fallback="oldest")
    H, y, x, idx, cb = random_system(96, 48, noise_var=0.01, seed=5)
    for fb in ("previous", "best"):
        res = detect(y, H, 0.01, cb, DetectorConfig(fallback=fb))
        assert not res.failed
        for r in res.diagnostics:
            if r.fallback:
                assert np.count_nonzero(r.lam) == 1 and np.sum(r.lam) == 1


def test_b_modes_agree():
    H, y, x, idx, cb = random_system(seed=6)
    a = detect(y, H, 0.05, cb, DetectorConfig(b_mode="factored", tolerance=0))
    b = detect(y, H, 0.05, cb, DetectorConfig(b_mode="explicit", tolerance=0))
    np.testing.assert_allclose(a.posteriors, b.posteriors, atol=1e-8)


def test_prefix_property():
    H, y, x, idx, cb = random_system(seed=7)
    long = detect(y, H, 0.05, cb, DetectorConfig(max_iterations=6, tolerance=0))
    short = detect(y, H, 0.05, cb, DetectorConfig(max_iterations=1, tolerance=0))
    np.testing.assert_array_equal(short.iteration_decisions[0], long.iteration_decisions[0])


def test_detect_reports_failure_on_bad_input():
    H, y, x, idx, cb = random_system(seed=8)
    y = y.copy()
    y[0] = np.nan
    res = detect(y, H, 0.05, cb)
    assert res.failed
    assert res.decisions.shape == (24,)


def test_op_counter_hand_count():
    H, y, x, idx, cb = random_system(seed=9)
    res = detect(y, H, 0.05, cb, DetectorConfig(max_iterations=1))
    m, n = H.shape
    # H^H y, xi * y, orthogonalisation over two terms, denoiser
    expected = H.nnz + m + 2 * n + 3 * n * cb.Q + 2 * n
    assert res.ops.multiplies == expected
    assert res.ops.matvecs == 1
    c = OpCounter()
    c.matvec(np.zeros((3, 4)))
    assert c.multiplies == 12
