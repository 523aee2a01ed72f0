import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irs_tt import estimators as est
from irs_tt.cli import finite_difference_check
from irs_tt.errors import ConfigError, DimensionMismatch, Diverged, RankOutOfRange
from irs_tt.system_model import (
    SystemConfig,
    build_ground_truth,
    build_phase_tensor,
    chain_from,
    gen_channels,
    gen_phase_schedule,
    measure,
    tt_from_factors,
)
from irs_tt.tensor_core import kron, left_unfold, right_unfold, unfold

from conftest import crandn, make_instance


def rel_err(A, B):
    return np.linalg.norm(A - B) / np.linalg.norm(B)


# ---------------------------------------------------------------- options and helpers


@pytest.mark.parametrize("kw", [{"max_iters": 0}, {"step_size": 0.0}, {"stop_tol": -1.0},
                                {"init_scale": "huge"}])
def test_solver_options_validation(kw):
    with pytest.raises(ConfigError):
        est.SolverOptions(**kw)


def test_random_init_scaling():
    raw = est.random_init([(3, 4), (5, 3)], 1, "raw")
    unit = est.random_init([(3, 4), (5, 3)], 1, "unit")
    for r, u in zip(raw, unit):
        assert abs(np.linalg.norm(u) - 1) < 1e-14
        np.testing.assert_allclose(u * np.linalg.norm(r), r, rtol=1e-14)


def test_loss_examples(small_single, rng):
    tt, B, X, Y = make_instance(small_single, seed=1)
    assert est.loss(tt, X, Y) < 1e-20
    zero = tt_from_factors([np.zeros_like(f) for f in tt.channels.factors], tt.phases)
    Yr = crandn(rng, *Y.shape)
    assert est.loss(zero, X, Yr) == pytest.approx(np.linalg.norm(Yr) ** 2 / X.shape[1], rel=1e-14)
    # definitional: measure + norm
    other = tt_from_factors(gen_channels(small_single, 99).factors, tt.phases)
    R = measure(build_ground_truth(other), X, 0.0, 0) - Yr
    assert est.loss(other, X, Yr) == np.vdot(R, R).real / X.shape[1]
    with pytest.raises(DimensionMismatch):
        est.loss(tt, X, Yr[:, :, :-1])


# ---------------------------------------------------------------- E-1 unfolding identities


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_unfolding_identities(LP, K, N, UM, seed):
    cfg = SystemConfig(L=LP, M=UM, K=K, irs_sizes=(N,))
    tt = make_instance(cfg, seed % 10_000)[0]
    B = build_ground_truth(tt)
    H, G = tt.channels.H, tt.channels.G
    S = build_phase_tensor(tt.phases, 1)
    assert np.abs(unfold(B, 1) - H @ right_unfold(S) @ kron(G, np.eye(K))).max() < 1e-12
    assert np.abs(unfold(B, 2) - kron(np.eye(K), H) @ left_unfold(S) @ G).max() < 1e-12


# ---------------------------------------------------------------- ALS


def test_als_fixed_point_on_exact_data():
    cfg = SystemConfig(L=5, M=4, K=4, T=8, irs_sizes=(3,))
    tt, B, X, Y = make_instance(cfg, seed=2, noise_var=0.0)
    S = build_phase_tensor(tt.phases, 1)
    H, G, flag = est.als_step_single(tt.channels.H, tt.channels.G, S, X, Y)
    assert not flag
    B_next = build_ground_truth(tt_from_factors([G, H], tt.phases))
    assert np.abs(B_next - B).max() < 1e-10


def _design_H(s, G):
    # B(p,k,m) = sum_n H(p,n) [s_n(k) G(n,m)]
    N, UM = G.shape
    K = s.shape[0]
    return np.einsum("kn,nm->nkm", s, G).reshape(N, K * UM)


def _design_G(H, s):
    # B(p,k,m) = sum_n [H(p,n) s_n(k)] G(n,m)
    return np.einsum("pn,kn->pkn", H, s).reshape(-1, H.shape[1])


def test_als_updates_match_normal_equations():
    cfg = SystemConfig(L=5, M=4, K=3, T=7, irs_sizes=(3,), noise_var=1e-2)
    tt, B, X, Y = make_instance(cfg, seed=3)
    s = tt.phases.diagonals(1)
    S = build_phase_tensor(tt.phases, 1)
    H0, G0 = crandn(np.random.default_rng(0), 5, 3), crandn(np.random.default_rng(1), 3, 4)
    Z = Y @ X.conj().T @ np.linalg.inv(X @ X.conj().T)  # Y x_3 pinv(X) for full-row-rank X
    H1, G1, _ = est.als_step_single(H0, G0, S, X, Y)

    A = _design_H(s, G0)
    Hn = Z.reshape(5, -1) @ A.conj().T @ np.linalg.inv(A @ A.conj().T)
    assert np.abs(H1 - Hn).max() < 1e-9 * np.abs(Hn).max()
    Phi = _design_G(H1, s)
    Gn = np.linalg.solve(Phi.conj().T @ Phi, Phi.conj().T @ Z.reshape(-1, 4))
    assert np.abs(G1 - Gn).max() < 1e-9 * np.abs(Gn).max()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_als_block_monotone(seed):
    cfg = SystemConfig(L=4, M=3, K=3, T=6, irs_sizes=(2,), noise_var=0.1)
    tt, B, X, Y = make_instance(cfg, seed % 10_000)
    s = tt.phases.diagonals(1)
    S = build_phase_tensor(tt.phases, 1)
    rng = np.random.default_rng(seed)
    H0, G0 = crandn(rng, 4, 2), crandn(rng, 2, 3)
    Z = est.pilot_backprojection(Y, X)
    H1, G1, _ = est.als_step_single(H0, G0, S, X, Y)

    def sub_h(H, G):
        return np.linalg.norm(H @ _design_H(s, G) - Z.reshape(4, -1))

    def sub_g(H, G):
        return np.linalg.norm(_design_G(H, s) @ G - Z.reshape(-1, 3))

    assert sub_h(H1, G0) <= sub_h(H0, G0) + 1e-10
    assert sub_g(H1, G1) <= sub_g(H1, G0) + 1e-10


def test_als_noiseless_convergence_small():
    cfg = SystemConfig(L=4, M=4, K=4, T=16, irs_sizes=(4,), noise_var=0.0)
    tt, B, X, Y = make_instance(cfg, seed=4)
    init = est.random_init(cfg.factor_shapes, 7)
    res = est.als_single((init[1], init[0]), tt.phases, X, Y, est.SolverOptions(max_iters=100))
    assert rel_err(res.tensor(), B) < 1e-8
    assert len(res.loss_trace) == res.iterations + 1
    assert np.all(np.isfinite(res.loss_trace)) and np.all(res.loss_trace >= 0)


def test_als_stop_tol_exits_early():
    cfg = SystemConfig(L=4, M=4, K=4, T=16, irs_sizes=(4,), noise_var=1e-4)
    tt, B, X, Y = make_instance(cfg, seed=5)
    init = est.random_init(cfg.factor_shapes, 7)
    res = est.als_single((init[1], init[0]), tt.phases, X, Y, est.SolverOptions(max_iters=500, stop_tol=1e-10))
    assert res.converged and res.iterations < 500


def test_als_flags_rank_deficiency():
    # N > UM*K makes the H-update system rank deficient
    cfg = SystemConfig(L=4, M=2, K=1, T=4, irs_sizes=(3,), noise_var=0.0)
    tt, B, X, Y = make_instance(cfg, seed=6)
    init = est.random_init(cfg.factor_shapes, 1)
    res = est.als_single((init[1], init[0]), tt.phases, X, Y, est.SolverOptions(max_iters=3))
    assert res.rank_deficient
    assert np.all(np.isfinite(res.tensor()))


def test_als_requires_T_at_least_UM():
    cfg = SystemConfig(L=4, M=6, K=2, T=4, irs_sizes=(2,))
    tt, B, X, Y = make_instance(cfg, seed=0)
    init = est.random_init(cfg.factor_shapes, 0)
    with pytest.raises(ConfigError):
        est.als_single((init[1], init[0]), tt.phases, X, Y)
    with pytest.raises(ConfigError):
        est.ttsvd_baseline(Y, X, (2, 2))


def test_als_rejects_multi_hop(small_double):
    tt, B, X, Y = make_instance(small_double, seed=0)
    init = est.random_init(small_double.factor_shapes, 0)
    with pytest.raises(ConfigError):
        est.als_single((init[-1], init[0]), tt.phases, X, Y)


def test_als_rank_limits_project_factors():
    cfg = SystemConfig(L=6, M=5, K=4, T=10, irs_sizes=(4,), noise_var=0.0)
    tt, B, X, Y = make_instance(cfg, seed=8)
    init = est.random_init(cfg.factor_shapes, 2)
    res = est.als_single((init[1], init[0]), tt.phases, X, Y,
                         est.SolverOptions(max_iters=5, rank_limits=(2, 3)))
    G, H = res.factors
    assert np.linalg.matrix_rank(G, tol=1e-10) <= 2
    assert np.linalg.matrix_rank(H, tol=1e-10) <= 3


# ---------------------------------------------------------------- gradients (E-3)


def _fd_setup(cfg, seed):
    tt, B, X, Y = make_instance(cfg, seed=seed, noise_var=0.01)
    factors = est.random_init(cfg.factor_shapes, seed + 50, "raw")
    diags = tt.phases.all_diagonals()

    def f(d):
        def inner(Z):
            fs = list(factors)
            fs[d] = Z
            R = chain_from(fs, diags) @ X - Y
            return np.vdot(R, R).real / X.shape[1]
        return inner

    return tt, X, Y, factors, diags, f


def test_single_hop_gradients_vs_finite_differences(small_single):
    tt, X, Y, (G, H), diags, f = _fd_setup(small_single, 11)
    S = build_phase_tensor(tt.phases, 1)
    gH, gG = est.wirtinger_grads_single(H, G, S, X, Y)
    assert finite_difference_check(f(1), gH, H, 1e-5) < 1e-6
    assert finite_difference_check(f(0), gG, G, 1e-5) < 1e-6


def test_multi_hop_gradients_vs_finite_differences(small_double):
    tt, X, Y, factors, diags, f = _fd_setup(small_double, 12)
    for d in range(3):
        g = est.wirtinger_grad_multi(factors, diags, X, Y, d)
        assert finite_difference_check(f(d), g, factors[d], 1e-5) < 1e-6


def test_multi_hop_gradient_reduces_to_single(small_single):
    tt, X, Y, (G, H), diags, f = _fd_setup(small_single, 13)
    S = build_phase_tensor(tt.phases, 1)
    gH, gG = est.wirtinger_grads_single(H, G, S, X, Y)
    assert np.abs(est.wirtinger_grad_multi([G, H], diags, X, Y, 1) - gH).max() < 1e-12
    assert np.abs(est.wirtinger_grad_multi([G, H], diags, X, Y, 0) - gG).max() < 1e-12
    # dense phase tensors are accepted too
    assert np.abs(est.wirtinger_grad_multi([G, H], [S], X, Y, 1) - gH).max() < 1e-12
    with pytest.raises(ValueError):
        est.wirtinger_grad_multi([G, H], diags, X, Y, 2)


def test_gradients_vanish_on_consistent_data(small_single, small_double):
    tt, B, X, Y = make_instance(small_single, seed=14, noise_var=0.0)
    S = build_phase_tensor(tt.phases, 1)
    gH, gG = est.wirtinger_grads_single(tt.channels.H, tt.channels.G, S, X, Y)
    assert np.abs(gH).max() < 1e-14 and np.abs(gG).max() < 1e-14
    tt, B, X, Y = make_instance(small_double, seed=15, noise_var=0.0)
    for d in range(3):
        g = est.wirtinger_grad_multi(tt.channels.factors, tt.phases.all_diagonals(), X, Y, d)
        assert np.abs(g).max() < 1e-14


def test_gradients_linear_in_residual(small_single):
    tt, X, Y, (G, H), diags, f = _fd_setup(small_single, 16)
    S = build_phase_tensor(tt.phases, 1)
    model = chain_from([G, H], diags) @ X
    alpha = 2.5 - 0.5j
    # residual model - Y' = alpha (model - Y)
    Y2 = model - alpha * (model - Y)
    g1 = est.wirtinger_grads_single(H, G, S, X, Y)
    g2 = est.wirtinger_grads_single(H, G, S, X, Y2)
    for a, b in zip(g1, g2):
        assert np.abs(b - alpha * a).max() < 1e-12 * np.abs(alpha * a).max()


# ---------------------------------------------------------------- gauge (E-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_diagonal_gauge_invariance(seed):
    rng = np.random.default_rng(seed)
    cfg = SystemConfig(L=4, M=3, K=3, irs_sizes=(4,))
    sched = gen_phase_schedule(cfg, seed % 1000)
    G, H = gen_channels(cfg, seed % 1000 + 1).factors
    lam = rng.uniform(0.5, 2.0, 4) * np.exp(1j * rng.uniform(0, 2 * np.pi, 4))
    B1 = build_ground_truth(tt_from_factors([G, H], sched))
    B2 = build_ground_truth(tt_from_factors([G / lam[:, None], H * lam], sched))
    assert np.abs(B1 - B2).max() < 1e-12


# ---------------------------------------------------------------- AGD


def test_agd_stationary_at_ground_truth(small_single, small_double):
    for cfg in (small_single, small_double):
        tt, B, X, Y = make_instance(cfg, seed=20, noise_var=0.0)
        res = est.agd_multi(tt.channels.factors, tt.phases, X, Y, est.SolverOptions(max_iters=20))
        assert np.all(res.loss_trace < 1e-28)
        assert np.abs(res.tensor() - B).max() < 1e-14


def test_agd_single_and_multi_agree():
    cfg = SystemConfig(L=5, M=4, K=3, T=8, irs_sizes=(3,), noise_var=1e-3)
    tt, B, X, Y = make_instance(cfg, seed=21)
    init = est.random_init(cfg.factor_shapes, 3)
    for n in (1, 2, 5, 50):
        opts = est.SolverOptions(max_iters=n, step_size=0.2)
        a = est.agd_single((init[1], init[0]), tt.phases, X, Y, opts)
        b = est.agd_multi(init, tt.phases, X, Y, opts)
        np.testing.assert_allclose(a.loss_trace, b.loss_trace, rtol=1e-12)
        for fa, fb in zip(a.factors, b.factors):
            assert np.abs(fa - fb).max() < 1e-12


def test_agd_update_order_matches_explicit_steps():
    cfg = SystemConfig(L=4, M=3, K=2, T=5, irs_sizes=(2, 3), noise_var=1e-2)
    tt, B, X, Y = make_instance(cfg, seed=22)
    init = est.random_init(cfg.factor_shapes, 4)
    mu = 0.3
    diags = tt.phases.all_diagonals()
    ref = [f.copy() for f in init]
    for _ in range(3):
        for d in (2, 1, 0):
            ref[d] = ref[d] - mu * est.wirtinger_grad_multi(ref, diags, X, Y, d)
    res = est.agd_multi(init, tt.phases, X, Y, est.SolverOptions(max_iters=3, step_size=mu))
    for a, b in zip(res.factors, ref):
        assert np.abs(a - b).max() < 1e-12
    assert res.iterations == 3 and len(res.loss_trace) == 4
    assert res.loss_trace[-1] == pytest.approx(est.loss(res.estimate, X, Y), rel=1e-10)


def test_agd_diverges_with_huge_step():
    cfg = SystemConfig()
    tt, B, X, Y = make_instance(cfg, seed=23)
    init = est.random_init(cfg.factor_shapes, 0)
    with pytest.raises(Diverged) as info:
        est.agd_single((init[1], init[0]), tt.phases, X, Y, est.SolverOptions(max_iters=1000, step_size=1e3))
    assert info.value.loss_trace is not None and len(info.value.loss_trace) >= 2


def test_agd_stop_tol_and_rank_limits():
    cfg = SystemConfig(L=6, M=5, K=4, T=12, irs_sizes=(4,), noise_var=1e-6)
    tt, B, X, Y = make_instance(cfg, seed=24)
    init = est.random_init(cfg.factor_shapes, 5)
    res = est.agd_multi(init, tt.phases, X, Y, est.SolverOptions(max_iters=50_000, step_size=0.2, stop_tol=1e-9))
    assert res.converged and res.iterations < 50_000
    res = est.agd_multi(init, tt.phases, X, Y,
                        est.SolverOptions(max_iters=20, step_size=0.2, rank_limits=(2, 3)))
    assert np.linalg.matrix_rank(res.factors[0], tol=1e-10) <= 2
    assert np.linalg.matrix_rank(res.factors[1], tol=1e-10) <= 3
    with pytest.raises(ConfigError):
        est.agd_multi(init, tt.phases, X, Y, est.SolverOptions(max_iters=2, rank_limits=(2,)))


def test_agd_shape_checks(small_single):
    tt, B, X, Y = make_instance(small_single, seed=25)
    init = est.random_init(small_single.factor_shapes, 0)
    with pytest.raises(DimensionMismatch):
        est.agd_multi(init, tt.phases, X, Y[:, :, :-1])
    with pytest.raises(DimensionMismatch):
        est.agd_multi([init[0].T, init[1]], tt.phases, X, Y)


def _sweep_loss(factors, diags, X, Y, mu):
    fs = [f.copy() for f in factors]
    for d in range(len(fs) - 1, -1, -1):
        fs[d] = fs[d] - mu * est.wirtinger_grad_multi(fs, diags, X, Y, d)
    R = chain_from(fs, diags) @ X - Y
    return np.vdot(R, R).real / X.shape[1]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 2))
def test_descent_for_small_steps(seed, D):
    cfg = SystemConfig(L=4, M=3, K=3, T=6, irs_sizes=(3,) * D, noise_var=0.01)
    tt, B, X, Y = make_instance(cfg, seed % 10_000)
    factors = est.random_init(cfg.factor_shapes, seed, "raw")
    diags = tt.phases.all_diagonals()
    R = chain_from(factors, diags) @ X - Y
    f0 = np.vdot(R, R).real / X.shape[1]
    # backtracking probe for a step that decreases the loss
    mu = 1.0
    while _sweep_loss(factors, diags, X, Y, mu) > f0 and mu > 1e-12:
        mu /= 2
    for scale in (1, 0.5, 0.25, 0.125):
        assert _sweep_loss(factors, diags, X, Y, mu * scale) <= f0 * (1 + 1e-10)


@pytest.mark.slow
def test_agd_matches_als_at_reference_point():
    """AGD error within 2x of ALS error on the same data (UM=LP=K=N=10, T=100, noise 1e-6)."""
    cfg = SystemConfig()
    for seed in range(3):
        tt, B, X, Y = make_instance(cfg, seed=seed)
        init = est.random_init(cfg.factor_shapes, seed)
        als = est.als_single((init[1], init[0]), tt.phases, X, Y)
        agd = est.agd_single((init[1], init[0]), tt.phases, X, Y,
                             est.SolverOptions(max_iters=100_000, step_size=0.2, stop_tol=1e-12))
        e_als, e_agd = rel_err(als.tensor(), B), rel_err(agd.tensor(), B)
        assert e_agd <= 2 * e_als and e_als <= 2 * e_agd


# ---------------------------------------------------------------- TT-SVD baseline and projection


def test_ttsvd_noiseless_exact_and_zero():
    cfg = SystemConfig(L=6, M=5, K=4, T=10, irs_sizes=(3,), noise_var=0.0)
    tt, B, X, Y = make_instance(cfg, seed=30)
    assert rel_err(est.ttsvd_baseline(Y, X, (3, 3)), B) < 1e-8
    np.testing.assert_array_equal(est.ttsvd_baseline(np.zeros_like(Y), X, (3, 3)), 0)


def test_rank_project_examples(rng):
    A = crandn(rng, 5, 4)
    assert np.abs(est.rank_project(A, 4) - A).max() < 1e-12
    R1 = np.outer(crandn(rng, 5), crandn(rng, 4))
    assert np.abs(est.rank_project(R1, 1) - R1).max() < 1e-12
    s = np.linalg.svd(A, compute_uv=False)
    assert np.linalg.norm(est.rank_project(A, 2) - A) == pytest.approx(np.sqrt(s[2] ** 2 + s[3] ** 2), abs=1e-10)
    with pytest.raises(RankOutOfRange):
        est.rank_project(A, 5)
    with pytest.raises(RankOutOfRange):
        est.rank_project(A, 0)
