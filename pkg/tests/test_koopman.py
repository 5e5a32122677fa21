import numpy as np
import pytest

from koopmanflow import gradcore as gc
from koopmanflow import koopman
from koopmanflow.errors import ConfigError, ContractError, DimensionError
from koopmanflow.gradcore import DiffTensor, Tape


def brute_force_fit(Z, lam):
    """Normal equations assembled with an explicit inverse (oracle)."""
    X, Y = Z[:, :-1], Z[:, 1:]
    return Y @ X.T @ np.linalg.inv(X @ X.T + lam * np.eye(Z.shape[0]))


def chained_window(rng, d, w, spectral_scale=1.0):
    """Columns follow z_{k+1} = A z_k for a random rotation-like A."""
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    A = spectral_scale * q
    cols = [rng.normal(size=d) * 2.0]
    for _ in range(w - 1):
        cols.append(A @ cols[-1])
    return A, np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# dmd_fit


def test_dmd_fit_scalar_no_damping_limit():
    K = koopman.dmd_fit(DiffTensor([[1.0, 0.5, 0.25]]), lam=1e-12)
    np.testing.assert_allclose(K.data, [[0.5]], atol=1e-9)


def test_dmd_fit_scalar_damped():
    # 0.625 / 1.251 by hand
    K = koopman.dmd_fit(DiffTensor([[1.0, 0.5, 0.25]]), lam=1e-3)
    np.testing.assert_allclose(K.data, [[0.625 / 1.251]], atol=1e-9)


def test_dmd_fit_zero_window():
    K = koopman.dmd_fit(DiffTensor(np.zeros((3, 4))), lam=1e-3)
    np.testing.assert_array_equal(K.data, np.zeros((3, 3)))


def test_dmd_fit_matches_brute_force(rng):
    for d in (1, 2, 3, 4):
        Z = rng.normal(size=(d, 6))
        K = koopman.dmd_fit(DiffTensor(Z), lam=1e-3)
        np.testing.assert_allclose(K.data, brute_force_fit(Z, 1e-3), atol=1e-9)


def test_dmd_fit_needs_positive_damping():
    with pytest.raises(ConfigError):
        koopman.dmd_fit(DiffTensor(np.ones((2, 3))), lam=0.0)


def test_dmd_fit_window_too_short():
    with pytest.raises(DimensionError):
        koopman.dmd_fit(DiffTensor(np.ones((2, 1))), lam=1e-3)


def test_dmd_fit_is_differentiable(rng):
    Z = gc.param(rng.normal(size=(3, 5)))
    with Tape() as tape:
        tape.backward(gc.sum_all(gc.square(koopman.dmd_fit(Z, lam=1e-2))))
    assert Z.grad is not None and np.isfinite(Z.grad).all()


def test_dmd_fit_tikhonov_norm_monotone(rng):
    Z = rng.normal(size=(5, 4))
    norms = [
        np.linalg.norm(koopman.dmd_fit(DiffTensor(Z), lam).data)
        for lam in (1e-4, 1e-3, 1e-2)
    ]
    assert norms[0] >= norms[1] >= norms[2]


def test_dmd_fit_norm_bound(rng):
    # |K|_2 <= |Y| |X| / lam  since (X X^T + lam I)^-1 is bounded by 1/lam
    for _ in range(10):
        Z = rng.normal(size=(4, 6))
        lam = 10.0 ** rng.uniform(-4, -1)
        X, Y = Z[:, :-1], Z[:, 1:]
        K = koopman.dmd_fit(DiffTensor(Z), lam).data
        bound = np.linalg.norm(Y, 2) * np.linalg.norm(X, 2) / lam
        assert np.linalg.norm(K, 2) <= bound * (1 + 1e-12)


def test_dmd_fit_rank_deficient_window_stays_bounded(rng):
    col = rng.normal(size=3)
    Z = np.stack([col, col, col, col], axis=1)  # duplicate snapshots
    K = koopman.dmd_fit(DiffTensor(Z), lam=1e-3).data
    assert np.isfinite(K).all()
    assert np.linalg.norm(K) <= np.linalg.norm(col) ** 2 * 3 / 1e-3


# ---------------------------------------------------------------------------
# dmd_fit_svd


def test_dmd_fit_svd_full_rank_matches_dmd_fit(rng):
    Z = rng.normal(size=(8, 4))
    K_solve = koopman.dmd_fit(DiffTensor(Z), lam=1e-3).data
    K_svd = koopman.dmd_fit_svd(Z, lam=1e-3)
    np.testing.assert_allclose(K_svd, K_solve, atol=1e-8)


def test_dmd_fit_svd_rank_zero():
    np.testing.assert_array_equal(koopman.dmd_fit_svd(np.ones((3, 4)), 1e-3, rank=0),
                                  np.zeros((3, 3)))


def test_dmd_fit_svd_rank_contract():
    with pytest.raises(ContractError):
        koopman.dmd_fit_svd(np.ones((3, 4)), 1e-3, rank=4)


def test_dmd_fit_svd_latency_smoke(rng):
    import time
    Z = rng.normal(size=(128, 4))
    koopman.dmd_fit_svd(Z, 1e-3)  # warm-up / compile
    times = []
    for _ in range(200):
        start = time.perf_counter()
        koopman.dmd_fit_svd(Z, 1e-3)
        times.append(time.perf_counter() - start)
    assert sorted(times)[len(times) // 2] < 1e-3  # median under a millisecond


# ---------------------------------------------------------------------------
# window tiling


def test_window_tiles_exact_multiple():
    assert koopman.window_tiles(16, 4) == [(0, 0, 4), (4, 0, 4), (8, 0, 4), (12, 0, 4)]


def test_window_tiles_right_aligned_tail():
    tiles = koopman.window_tiles(18, 4)
    assert tiles[-1] == (14, 2, 2)  # fits on [14,18), applies to steps 16..17
    covered = sum(length for _, _, length in tiles)
    assert covered == 18


def test_window_tiles_too_short():
    with pytest.raises(DimensionError):
        koopman.window_tiles(3, 4)


# ---------------------------------------------------------------------------
# invariant path


def make_identity_invariant(d):
    op = koopman.InvariantKoopman(d, d, np.random.default_rng(0))
    op.enc.data = np.eye(d)
    op.dec.data = np.eye(d)
    return op


def test_invariant_path_identity(rng):
    op = make_identity_invariant(3)
    x = rng.normal(size=(2, 4, 3))
    np.testing.assert_allclose(op(DiffTensor(x)).data, x, atol=1e-12)


def test_invariant_path_zero_operator(rng):
    op = make_identity_invariant(3)
    op.K.data = np.zeros((3, 3))
    out = op(DiffTensor(rng.normal(size=(2, 4, 3))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_invariant_path_scaling():
    op = make_identity_invariant(2)
    op.K.data = 0.5 * np.eye(2)
    out = op(DiffTensor(np.ones((1, 3, 2))))
    np.testing.assert_allclose(out.data, 0.5)


def test_invariant_path_linearity(rng):
    op = koopman.InvariantKoopman(4, 3, rng)
    x, y = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
    a, b = 1.7, -0.4
    lhs = op(DiffTensor(a * x + b * y)).data
    rhs = a * op(DiffTensor(x)).data + b * op(DiffTensor(y)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_spectral_radius_identity_init(rng):
    op = koopman.InvariantKoopman(4, 3, rng)
    assert op.spectral_radius() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# variant path


def make_identity_dmd(d, T, lam=1e-3):
    op = koopman.LocalizedDMD(d, d, T, np.random.default_rng(0), lam=lam)
    op.enc.data = np.eye(d)
    op.dec.data = np.eye(d)
    return op


def test_variant_path_zero_input(rng):
    op = koopman.LocalizedDMD(4, 3, 16, rng)
    out = op(DiffTensor(np.zeros((2, 16, 4))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_variant_path_window_invariant():
    assert koopman.LocalizedDMD(4, 3, 16, np.random.default_rng(0)).window == 4
    assert koopman.LocalizedDMD(4, 3, 40, np.random.default_rng(0)).window == 10
    assert koopman.LocalizedDMD(4, 3, 8, np.random.default_rng(0)).window == 4


def test_variant_path_too_short_sequence(rng):
    op = koopman.LocalizedDMD(4, 3, 16, rng)
    with pytest.raises(DimensionError):
        op(DiffTensor(np.zeros((1, 3, 4))))


def test_variant_path_one_step_prediction(rng):
    # lifted linear dynamics with enough snapshots to identify the operator
    # (full row rank X), so the fit advances every window row
    d, w = 3, 4
    A, Z = chained_window(rng, d, w)
    assert np.linalg.svd(Z[:, :-1], compute_uv=False).min() > 0.5
    op = make_identity_dmd(d, w, lam=1e-6)
    out = op(DiffTensor(Z.T[None]))  # rows = steps
    predicted = out.data[0]
    expected = (A @ Z).T  # one-step-advanced states
    rel = np.linalg.norm(predicted - expected) / np.linalg.norm(expected)
    assert rel <= 1e-6


def test_variant_path_svd_matches_solve(rng):
    op = koopman.LocalizedDMD(5, 4, 16, rng)
    x = rng.normal(size=(3, 16, 5))
    slow = op(DiffTensor(x), use_svd=False).data
    fast = op(DiffTensor(x), use_svd=True).data
    np.testing.assert_allclose(fast, slow, atol=1e-8)


def test_variant_path_right_aligned_tail(rng):
    op = koopman.LocalizedDMD(3, 2, 18, rng)
    x = rng.normal(size=(2, 18, 3))
    out = op(DiffTensor(x))
    assert out.shape == (2, 18, 3)


def test_variant_path_gradient_flows(rng):
    op = koopman.LocalizedDMD(3, 2, 8, rng)
    x = gc.param(rng.normal(size=(1, 8, 3)))
    with Tape() as tape:
        tape.backward(gc.sum_all(gc.square(op(x))))
    assert x.grad is not None and np.abs(x.grad).max() > 0
    assert op.enc.grad is not None and op.dec.grad is not None
