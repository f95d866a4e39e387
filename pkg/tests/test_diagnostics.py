import math

from hypothesis import given, strategies as st
import numpy as np
import pytest

from bvrlp.diagnostics import (
    SospReport, assemble_hessian, check_sosp, estimate_zeta, estimator_deviation_probe,
    full_gradient_norm, min_eigenvalue, scan_history_for_sosp, spectral_norm,
)
from bvrlp.optimizers import RunConfig, run_bvr_l_psgd
from bvrlp.problems import (
    ContractError, SoftmaxRegression, build_quartic_saddle, build_softmax_regression,
)

from helpers import Quadratic, identical_sample_softmax


# ------------------------------------------------------------ gradient norm


def test_grad_norm_zero_at_quartic_saddle():
    pr = build_quartic_saddle(8, 2, zeta=0.3, seed=1)
    assert full_gradient_norm(pr, np.zeros(8)) == 0.0


def test_grad_norm_is_norm_of_mean_local_gradients():
    pr = build_softmax_regression(4, q=0.5, n=200, d_in=5, C=3, seed=2)
    x = np.random.default_rng(0).standard_normal(pr.dim)
    g = np.mean([pr.local_grad(p, x) for p in range(pr.P)], axis=0)
    assert abs(full_gradient_norm(pr, x) - np.linalg.norm(g)) <= 1e-12


def test_grad_norm_softmax_at_zero_matches_direct_summation():
    # at x = 0 all classes get probability 1/C, so the gradient is
    # mean_i a_i (1/C - e_{y_i}) with a_i = (x_i, 1); summed with fsum
    rng = np.random.default_rng(3)
    C, d_in, n = 4, 3, 40
    X = rng.standard_normal((n, d_in))
    y = np.arange(n) % C
    pr = SoftmaxRegression(X, y, X[:4], y[:4], P=2, q=0.5, seed=0, n_classes=C)
    W = [[math.fsum(X[i, j] * ((1.0 / C) - (y[i] == c)) for i in range(n)) / n
          for c in range(C)] for j in range(d_in)]
    bias = [math.fsum((1.0 / C) - (y[i] == c) for i in range(n)) / n for c in range(C)]
    expected = math.sqrt(math.fsum(w * w for row in W for w in row) + math.fsum(v * v for v in bias))
    assert abs(full_gradient_norm(pr, np.zeros(pr.dim)) - expected) <= 1e-12


# ------------------------------------------------------------ eigensolver


def test_min_eigenvalue_quartic_saddle_at_origin():
    for lam_neg in (0.5, 1.0, 2.0):
        pr = build_quartic_saddle(20, 2, lambda_neg=lam_neg, zeta=0.2, seed=4)
        lam, res, ok = min_eigenvalue(pr, np.zeros(20))
        assert ok
        assert abs(lam + lam_neg) <= 1e-8
        assert res <= 1e-8 * (1 + abs(lam))


def test_min_eigenvalue_quadratic_bowl():
    D = np.array([3.0, 0.7, 2.0, 5.0, 1.5])
    lam, _, ok = min_eigenvalue(Quadratic(D, P=2), np.ones(5))
    assert ok and abs(lam - 0.7) <= 1e-10


def test_min_eigenvalue_rejects_bad_tol():
    pr = build_quartic_saddle(4, 1)
    with pytest.raises(ContractError):
        min_eigenvalue(pr, np.zeros(4), tol=0.0)


def test_min_eigenvalue_matches_dense_on_random_points():
    pr = build_quartic_saddle(30, 4, zeta=0.7, seed=5)
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = rng.standard_normal(30)
        lam, _, _ = min_eigenvalue(pr, x)
        assert abs(lam - np.linalg.eigvalsh(pr.dense_hessian(x))[0]) <= 1e-6


def test_min_eigenvalue_matches_dense_on_softmax():
    pr = build_softmax_regression(2, q=0.5, n=120, d_in=6, C=4, seed=1)
    rng = np.random.default_rng(7)
    for _ in range(5):
        x = 0.3 * rng.standard_normal(pr.dim)
        lam, _, _ = min_eigenvalue(pr, x)
        assert abs(lam - np.linalg.eigvalsh(assemble_hessian(pr, x))[0]) <= 1e-6


def test_lanczos_handles_repeated_eigenvalues():
    # identity block plus one negative direction: the Krylov space breaks down early
    D = np.r_[-2.0, np.ones(15)]
    lam, _, ok = min_eigenvalue(Quadratic(D), np.zeros(16))
    assert ok and abs(lam + 2.0) <= 1e-10


def test_spectral_norm_dense_oracle():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((12, 12))
    A = (A + A.T) / 2
    val, _, ok = spectral_norm(lambda v: A @ v, 12)
    assert ok and abs(val - np.linalg.norm(A, 2)) <= 1e-8


def test_assemble_hessian_matches_dense():
    pr = build_quartic_saddle(6, 2, zeta=0.4, seed=2)
    x = np.random.default_rng(0).standard_normal(6)
    for scope in (None, 0, 1):
        np.testing.assert_allclose(assemble_hessian(pr, x, scope), pr.dense_hessian(x, scope), atol=1e-12)


# ------------------------------------------------------------ zeta estimate


def test_estimate_zeta_recovers_construction():
    pr = build_quartic_saddle(10, 2, zeta=0.5, seed=9)
    rng = np.random.default_rng(1)
    for x in (np.zeros(10), rng.standard_normal(10), 3 * rng.standard_normal(10)):
        assert abs(estimate_zeta(pr, x) - 0.5) <= 1e-6


def test_estimate_zeta_single_worker_is_zero():
    assert estimate_zeta(build_quartic_saddle(6, 1, seed=0), np.ones(6)) == 0.0


def test_estimate_zeta_zero_when_worker_hessians_agree():
    pr = build_quartic_saddle(8, 4, zeta=0.0, seed=3)
    assert estimate_zeta(pr, np.random.default_rng(2).standard_normal(8)) <= 1e-9
    sm = identical_sample_softmax(3)
    assert estimate_zeta(sm, 0.2 * np.ones(sm.dim)) <= 1e-9


def test_estimate_zeta_matches_dense_difference():
    pr = build_quartic_saddle(12, 4, zeta=0.8, seed=4)
    x = np.random.default_rng(5).standard_normal(12)
    dense = max(np.linalg.norm(pr.dense_hessian(x, p) - pr.dense_hessian(x, q), 2)
                for p in range(4) for q in range(p + 1, 4))
    assert abs(estimate_zeta(pr, x) - dense) <= 1e-6


def test_estimate_zeta_below_declared_bound():
    rng = np.random.default_rng(10)
    problems = [build_quartic_saddle(10, 2, zeta=0.3, seed=1),
                build_softmax_regression(3, q=0.4, n=90, d_in=4, C=3, seed=2)]
    for pr in problems:
        for _ in range(20):
            x = 0.5 * rng.standard_normal(pr.dim)
            assert estimate_zeta(pr, x) <= pr.constants.zeta + 1e-6


# ------------------------------------------------------------ SOSP checks


@given(g=st.floats(0, 1), lam=st.floats(-2, 2), eps=st.floats(1e-4, 1),
       rho=st.floats(1e-3, 10), tol=st.floats(0, 1e-3))
def test_verdict_matches_independent_checker(g, lam, eps, rho, tol):
    expected = (g <= eps) and (lam >= -(rho * eps) ** 0.5 - tol)
    assert SospReport.decide(g, lam, eps, rho, tol) == expected


def test_check_sosp_reports():
    pr = build_quartic_saddle(10, 1, seed=0)
    saddle = check_sosp(pr, np.zeros(10), eps=1e-2, rho=pr.constants.rho)
    assert not saddle.verdict and saddle.grad_norm == 0.0
    xmin = np.zeros(10)
    xmin[0] = math.sqrt(pr.lambda_neg / pr.gamma)
    rep = check_sosp(pr, xmin, eps=1e-2, rho=pr.constants.rho)
    assert rep.verdict and rep.lambda_min > 0
    assert rep.verdict == SospReport.decide(rep.grad_norm, rep.lambda_min, rep.eps, rep.rho, rep.certificate_tol)


def test_scan_history_empty():
    pr = build_quartic_saddle(4, 1)
    assert scan_history_for_sosp([], pr, 1e-2, 1.0) == (False, None, None)


def test_scan_history_pinned_at_saddle():
    pr = build_quartic_saddle(10, 1, noise=0.0, seed=0)
    cfg = RunConfig(eta=0.05, b=2, K=4, T=2, S=5, r=0.0, full_batch=True, checkpoint_every=1, init="saddle")
    tr = run_bvr_l_psgd(cfg, pr)
    assert len(tr.checkpoints) == 41
    assert scan_history_for_sosp(tr, pr, 1e-2, pr.constants.rho) == (False, None, None)


def test_scan_history_finds_minimum_region():
    pr = build_quartic_saddle(10, 1, noise=0.0, seed=0)
    cfg = RunConfig(eta=0.05, b=2, K=4, T=2, S=60, r=0.0, full_batch=True, checkpoint_every=1, init="random",
                    master_seed=3)
    tr = run_bvr_l_psgd(cfg, pr)
    found, i, rep = scan_history_for_sosp(tr, pr, 1e-2, pr.constants.rho)
    assert found and rep.verdict and rep.grad_norm <= 1e-2
    # the index is the first certified checkpoint
    earlier = [x for j, x in tr.checkpoints if j < i]
    assert all(not check_sosp(pr, x, 1e-2, pr.constants.rho).verdict for x in earlier)


# ------------------------------------------------------------ deviation probe


def _probe_cfg(**kw):
    base = dict(eta=0.05, b=4, K=8, T=2, S=3, r=1e-3, P=2, init="random")
    base.update(kw)
    return RunConfig(**base)


def test_probe_zero_at_anchor_steps():
    pr = build_quartic_saddle(10, 2, zeta=0.5, noise=1.0, seed=1)
    idx, dev, env = estimator_deviation_probe(_probe_cfg(), pr)
    cfg = _probe_cfg()
    per_epoch = cfg.K * cfg.T
    assert len(idx) == per_epoch * cfg.S
    anchors = idx % per_epoch == 0
    assert np.all(dev[anchors] <= 1e-12)
    assert np.all(env[anchors] == 0.0)


def test_probe_zero_for_homogeneous_full_batch():
    pr = build_quartic_saddle(10, 2, zeta=0.0, noise=1.0, seed=2)
    _, dev, _ = estimator_deviation_probe(_probe_cfg(full_batch=True), pr)
    assert np.all(dev <= 1e-10)


def test_probe_within_loose_envelope():
    inside = total = 0
    for seed in range(5):
        pr = build_quartic_saddle(10, 2, zeta=0.5, noise=1.0, seed=seed)
        _, dev, env = estimator_deviation_probe(_probe_cfg(master_seed=seed), pr)
        inside += int(np.sum(dev <= 10 * env + 1e-12))
        total += len(dev)
    assert inside >= 0.95 * total
