import numpy as np
import pytest
import scipy.sparse as sp
from scipy import stats

from mamp_otfs.channel import (
    ChannelConfig,
    ChannelPath,
    ChannelRealization,
    apply_time_domain,
    assemble_effective,
    build_dd_blocks,
    cp_length,
    discretize_taps,
    doppler_leakage,
    dump_coo,
    expected_rx_power,
    raised_cosine,
    rc_weights,
    sample_paths,
)
from mamp_otfs.otfs import append_cp, demodulate, modulate, strip_cp, vec
from mamp_otfs.scma import GridPlacement, build_default_codebook, gather_effective, place_on_grid

DF = 15e3


def _path(gain=1.0, delay=0.0, doppler=0.0, N=8):
    return ChannelPath.create(gain, delay, doppler, N, DF)


def test_max_doppler_from_speed():
    assert ChannelConfig(velocity_kmh=300, carrier_frequency=4e9).doppler_max == pytest.approx(1111.1, abs=0.1)


def test_doppler_above_half_spacing_rejected():
    with pytest.raises(ValueError, match="half the"):
        ChannelConfig(max_doppler=8e3)


def test_static_single_path():
    cfg = ChannelConfig(delays=[0.0], max_doppler=0.0)
    real = sample_paths(cfg, 4, 4, 1, 1, np.random.default_rng(0))
    p = real.paths[0][0][0]
    assert p.doppler == 0 and p.doppler_index == 0 and p.doppler_frac == 0


def test_doppler_index_split():
    p = ChannelPath.create(1, 0, 1.3 * DF / 8, 8, DF)
    assert p.doppler_index == 1 and p.doppler_frac == pytest.approx(0.3)
    p = ChannelPath.create(1, 0, -2.7 * DF / 8, 8, DF)
    assert p.doppler_index == -3 and p.doppler_frac == pytest.approx(0.3)


def test_path_statistics():
    cfg = ChannelConfig()
    real = sample_paths(cfg, 4, 4, 100, 200, np.random.default_rng(1))
    links = [real.paths[u][j] for u in range(100) for j in range(200)]
    gains = np.array([[p.gain for p in link] for link in links])
    np.testing.assert_allclose(np.mean(np.abs(gains) ** 2, axis=0), cfg.path_powers(), rtol=0.02)
    nu = np.array([p.doppler for link in links for p in link])[:100_000]
    # nu / nu_max = cos(uniform angle) follows the arcsine law on [-1, 1]
    u = (nu / cfg.doppler_max + 1) / 2
    assert stats.kstest(u, stats.arcsine.cdf).pvalue > 1e-3


def test_path_powers_normalised():
    cfg = ChannelConfig(delays=[0, 1e-6], powers=[3.0, 1.0])
    np.testing.assert_allclose(cfg.path_powers(), [0.75, 0.25])


def test_raised_cosine_zero_crossings_and_singularity():
    np.testing.assert_allclose(raised_cosine(np.arange(-5, 6), 0.4), np.eye(11)[5], atol=1e-15)
    t = 1 / (2 * 0.4)
    near = raised_cosine(np.array([t - 1e-7, t + 1e-7]), 0.4)
    np.testing.assert_allclose(raised_cosine(np.array([t]), 0.4), near.mean(), rtol=1e-6)


def test_taps_integer_delays():
    M, N = 8, 4
    Ts = 1 / (M * DF)
    h = discretize_taps([_path()], 0.0, 0.4, M, N, DF)
    np.testing.assert_allclose(h[:, 0], 1.0)
    np.testing.assert_allclose(h[:, 1:], 0.0, atol=1e-15)
    h = discretize_taps([_path(delay=2 * Ts)], 0.0, 0.4, M, N, DF)
    np.testing.assert_allclose(h[:, 2], 1.0)
    assert np.count_nonzero(np.abs(h) > 1e-15) == M * N


def test_taps_half_sample_delay():
    M, N = 8, 4
    Ts = 1 / (M * DF)
    h = discretize_taps([_path(delay=0.5 * Ts, doppler=500.0, N=N)], 0.0, 0.4, M, N, DF)
    w = rc_weights(np.array([0.5]), 0.4)[0]
    np.testing.assert_allclose(np.abs(h[0]), np.abs(w), atol=1e-14)
    energy = np.sum(np.abs(h) ** 2, axis=1)
    np.testing.assert_allclose(energy, energy[0], rtol=1e-12)


def test_rc_weights_reject_negative_offsets():
    with pytest.raises(ValueError):
        rc_weights(np.array([-0.1]), 0.4)


def test_identity_channel_sums_users():
    M, N = 4, 4
    rng = np.random.default_rng(0)
    s = rng.normal(size=(3, M * N)) + 1j * rng.normal(size=(3, M * N))
    taps = [discretize_taps([_path()], 0.0, 0.4, M, N, DF)[:, :1] for _ in range(3)]
    np.testing.assert_allclose(apply_time_domain(s, taps), s.sum(axis=0), atol=1e-14)


def test_noise_calibration():
    n = 100_000
    r = apply_time_domain(np.zeros((1, n)), [np.zeros((n, 1))], 1.0, np.random.default_rng(0))
    assert np.var(r) == pytest.approx(1.0, rel=0.03)
    with pytest.raises(ValueError, match="rng"):
        apply_time_domain(np.zeros((1, 4)), [np.zeros((4, 1))], 1.0)


@pytest.mark.parametrize("cp", [0, 12])
def test_time_domain_matches_naive_convolution(cp):
    M, N = 8, 4
    Ts = 1 / (M * DF)
    rng = np.random.default_rng(5)
    paths = [_path(0.8 - 0.3j, 0.7 * Ts, 900.0, N), _path(0.2 + 0.5j, 2.2 * Ts, -400.0, N)]
    n = M * N + cp
    h = discretize_taps(paths, 0.1 * Ts, 0.4, M, N, DF, start=-cp, n_samples=n)
    s = rng.normal(size=n) + 1j * rng.normal(size=n)
    got = apply_time_domain(s[None], [h], cp_len=cp)
    ref = np.zeros(n, dtype=complex)
    for c in range(n):
        for p in range(h.shape[1]):
            if cp == 0:
                ref[c] += h[c, p] * s[(c - p) % n]
            elif c - p >= 0:
                ref[c] += h[c, p] * s[c - p]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_theta_limit():
    assert doppler_leakage(np.array([0.0]), 0.0, 16)[0] == 16
    np.testing.assert_allclose(doppler_leakage(np.arange(1, 16), 0.0, 16), 0)
    # continuity of the fractional formula towards the integer limit
    assert abs(doppler_leakage(np.array([0.0]), 1e-9, 16)[0] - 16) < 1e-6


def test_identity_dd_block():
    H = build_dd_blocks([_path()], 0.0, 0.4, 8, 4, DF, q_threshold=None)
    np.testing.assert_allclose(H.toarray(), np.eye(32), atol=1e-12)


def _pipeline(paths, offset, M, N, X, rolloff=0.4):
    cfg = ChannelConfig(delays=[p.delay for p in paths], max_timing_offset=offset)
    n_cp = cp_length(cfg, M)
    h = discretize_taps(paths, offset, rolloff, M, N, DF, start=-n_cp, n_samples=M * N + n_cp)
    r = apply_time_domain(append_cp(modulate(X), n_cp)[None], [h], cp_len=n_cp)
    return vec(demodulate(strip_cp(r, n_cp), M, N))


@pytest.mark.parametrize("M,N", [(8, 8), (4, 8), (16, 4)])
def test_dd_block_matches_time_domain(M, N):
    Ts = 1 / (M * DF)
    rng = np.random.default_rng(M + N)
    paths = [_path(rng.normal() + 1j * rng.normal(), d * Ts, nu, N)
             for d, nu in [(0.0, 700.0), (1.3, -1234.5), (3.7, 210.0)]]
    X = rng.normal(size=(M, N)) + 1j * rng.normal(size=(M, N))
    H = build_dd_blocks(paths, 0.4 * Ts, 0.4, M, N, DF, q_threshold=None)
    ref = _pipeline(paths, 0.4 * Ts, M, N, X)
    assert np.linalg.norm(H @ vec(X) - ref) <= 1e-9 * np.linalg.norm(ref)


def test_truncation_sparsifies_with_small_error():
    M, N = 16, 16
    Ts = 1 / (M * DF)
    paths = [_path(1.0, 0.0, 0.37 * DF / N, N), _path(0.5, 2 * Ts, -1.21 * DF / N, N)]
    full = build_dd_blocks(paths, 0.0, 0.4, M, N, DF, q_threshold=None)
    cut = build_dd_blocks(paths, 0.0, 0.4, M, N, DF, q_threshold=0.1)
    assert cut.nnz < full.nnz
    err = sp.linalg.norm(full - cut) / sp.linalg.norm(full)
    assert err < 0.3


def test_assemble_effective_paper_dims():
    cfg = ChannelConfig()
    cb = build_default_codebook()
    real = sample_paths(cfg, 32, 16, 4, 6, np.random.default_rng(0))
    eff = assemble_effective(real.blocks(cfg.q_threshold), cb, GridPlacement(32, 16, 4))
    assert eff.shape == (2048, 1536)


def test_assemble_effective_matches_per_link_sum():
    M, N, U = 8, 4, 2
    cfg = ChannelConfig(q_threshold=None, max_timing_offset=2e-6)
    cb = build_default_codebook()
    pl = GridPlacement(M, N, 4)
    rng = np.random.default_rng(4)
    real = sample_paths(cfg, M, N, U, cb.J, rng)
    blocks = real.blocks(None)
    eff = assemble_effective(blocks, cb, pl)
    idx = rng.integers(0, cb.Q, size=(cb.J, pl.slots_per_user))
    frames = np.stack([place_on_grid(idx[j], j, cb, pl) for j in range(cb.J)])
    x = gather_effective(frames, eff.index_map)
    ref = np.concatenate([sum(blocks[u][j] @ vec(frames[j]) for j in range(cb.J)) for u in range(U)])
    np.testing.assert_allclose(eff.H @ x, ref, atol=1e-12)


def test_assemble_effective_shape_checks():
    cb = build_default_codebook()
    pl = GridPlacement(4, 4, 4)
    with pytest.raises(ValueError):
        assemble_effective([[sp.identity(16)] * 5], cb, pl)
    with pytest.raises(ValueError):
        assemble_effective([[sp.identity(8)] * 6], cb, pl)


def test_expected_rx_power_matches_monte_carlo():
    M, N = 8, 4
    cfg = ChannelConfig(max_timing_offset=1e-6)
    cb = build_default_codebook()
    pl = GridPlacement(M, N, 4)
    rng = np.random.default_rng(2)
    real = sample_paths(cfg, M, N, 1, cb.J, rng)
    target = expected_rx_power(cfg, real, cb.K)
    powers = []
    for _ in range(400):
        fresh = sample_paths(cfg, M, N, 1, cb.J, rng)
        fresh = ChannelRealization(M, N, DF, cfg.rolloff, fresh.paths, real.timing_offsets,
                                   cfg.rc_span, cfg.rc_floor)
        idx = rng.integers(0, cb.Q, size=(cb.J, pl.slots_per_user))
        s = np.stack([modulate(place_on_grid(idx[j], j, cb, pl)) for j in range(cb.J)])
        taps = [fresh.taps(0, j) for j in range(cb.J)]
        powers.append(np.mean(np.abs(apply_time_domain(s, taps)) ** 2))
    assert np.mean(powers) == pytest.approx(target, rel=0.1)


def test_cp_covers_channel_span():
    cfg = ChannelConfig(max_timing_offset=1e-6)
    M = 32
    Ts = 1 / (M * DF)
    w = rc_weights((np.asarray(cfg.delays) + cfg.max_timing_offset) / Ts, cfg.rolloff, cfg.rc_span)
    assert cp_length(cfg, M) >= w.shape[1] - 1


def test_dump_coo(tmp_path):
    H = sp.csr_matrix(np.array([[1 + 2j, 0], [0, -3.5]]))
    path = tmp_path / "h.txt"
    dump_coo(H, path)
    rows = np.loadtxt(path)
    assert rows.shape == (2, 4)
    np.testing.assert_allclose(rows[0], [0, 0, 1, 2])
