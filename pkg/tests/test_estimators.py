import math

from hypothesis import given, strategies as st
import numpy as np
import pytest

from bvrlp.estimators import (
    LocalEstimator,
    NonFiniteError,
    ServerEstimator,
    batch_size_schedule,
    local_step,
    perturbed_update,
    sample_ball,
    schedule_total,
    server_round_update,
    start_epoch,
)
from bvrlp.oracle import CostLedger, RngStream, grad_pair, sample_minibatch
from bvrlp.optimizers import RunConfig, run_bvr_l_psgd
from bvrlp.problems import ContractError, build_quartic_saddle
from bvrlp.simnet import Cluster, ProtocolError
from helpers import identical_sample_softmax


def test_ball_zero_radius():
    assert not np.any(sample_ball(RngStream(0, "noise", 0), 4, 0.0))
    with pytest.raises(ContractError):
        sample_ball(RngStream(0, "noise", 0), 4, -1.0)


def test_ball_moments():
    N, d, r = 100_000, 3, 1.0
    s = RngStream(7, "noise", 0)
    xi = np.array([sample_ball(s, d, r) for _ in range(N)])
    sq = (xi ** 2).sum(axis=1)
    assert sq.max() <= r * r
    # mean zero coordinate-wise
    assert np.all(np.abs(xi.mean(axis=0)) <= 3 * xi.std(axis=0) / math.sqrt(N))
    # E|xi|^2 = d/(d+2) r^2
    assert abs(sq.mean() - d / (d + 2) * r * r) <= 3 * sq.std() / math.sqrt(N)


@given(d=st.integers(1, 30), r=st.floats(0.0, 100.0), seed=st.integers(0, 10_000))
def test_ball_norm_bound(d, r, seed):
    xi = sample_ball(RngStream(seed, "noise", 1), d, r)
    assert xi.shape == (d,)
    assert np.linalg.norm(xi) <= r * (1 + 1e-12)


def test_schedule_examples():
    assert [batch_size_schedule(k, 5, 2) for k in range(5)] == [6, 2, 2, 6, 2]
    assert batch_size_schedule(0, 1, 7) == 7


@pytest.mark.parametrize("K", [1, 4, 5, 16, 64])
@pytest.mark.parametrize("b", [1, 3, 16])
def test_schedule_closed_form(K, b):
    c = math.ceil(math.sqrt(K))
    direct = sum(batch_size_schedule(k, K, b) for k in range(K))
    assert direct == b * (K + (c - 1) * math.ceil(K / c)) == schedule_total(K, b)


@given(K=st.integers(1, 5000), b=st.integers(1, 64))
def test_schedule_closed_form_property(K, b):
    assert schedule_total(K, b) == sum(batch_size_schedule(k, K, b) for k in range(K))


def _server_state(pr, x, cluster):
    return start_epoch([pr.local_grad(p, x) for p in range(pr.P)], x, cluster)


def test_epoch_start_is_exact_gradient():
    pr = build_quartic_saddle(5, 4, zeta=0.4, seed=0)
    x = np.random.default_rng(0).standard_normal(5)
    est = _server_state(pr, x, Cluster(4))
    np.testing.assert_allclose(est.v, pr.grad(x), atol=1e-12)
    assert est.t_index == 0
    # t = 0 update resends the exact local gradients
    pairs = [(np.ones(5), np.zeros(5))] * 4
    est1 = server_round_update(est, pairs, x, Cluster(4))
    np.testing.assert_allclose(est1.v, pr.grad(x), atol=1e-12)
    assert est1.t_index == 1


def test_unchanged_point_keeps_v():
    pr = build_quartic_saddle(4, 2, seed=1)
    x = np.random.default_rng(1).standard_normal(4)
    est = ServerEstimator(v=np.arange(4.0), anchor_x=x, t_index=3, worker_v0=())
    pairs = [grad_pair(pr, pr.datasets[p].samples[:3], x, x, CostLedger()) for p in range(2)]
    assert np.array_equal(server_round_update(est, pairs, x, Cluster(2)).v, est.v)


def test_single_worker_full_batch_server_recursion_tracks_gradient():
    pr = build_quartic_saddle(6, 1, seed=2)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(6)
    cl = Cluster(1)
    est = _server_state(pr, x, cl)
    est = server_round_update(est, [(None, None)], x, cl)
    for _ in range(20):
        x_new = x + 0.1 * rng.standard_normal(6)
        pair = grad_pair(pr, pr.datasets[0].samples, x_new, est.anchor_x, CostLedger())
        est = server_round_update(est, [pair], x_new, cl)
        x = x_new
        np.testing.assert_allclose(est.v, pr.grad(x), atol=1e-10)


def test_missing_worker_is_protocol_error():
    pr = build_quartic_saddle(4, 2, seed=1)
    est = _server_state(pr, np.zeros(4), Cluster(2))
    with pytest.raises(ProtocolError):
        server_round_update(est, [(np.zeros(4), np.zeros(4))], np.zeros(4), Cluster(2))


def test_local_step_k0_keeps_server_estimate_and_charges():
    pr = build_quartic_saddle(4, 2, seed=3)
    x = np.ones(4) * 0.2
    v0 = np.arange(4.0)
    led = CostLedger()
    est, bk = local_step(LocalEstimator(v0, x.copy()), pr, 1, 0, x, 2, 5, led, RngStream(0, "local_batch", 0, 0))
    assert bk == 6 and np.array_equal(est.v, v0)
    assert (led.budget_units, led.raw_grad_evals) == (6, 12)
    _, bk1 = local_step(est, pr, 1, 1, x, 2, 5, led, RngStream(0, "local_batch", 0, 0))
    assert bk1 == 2


def test_single_sample_telescoping():
    pr = identical_sample_softmax(2)
    rng = np.random.default_rng(4)
    x = rng.standard_normal(pr.dim)
    est = LocalEstimator(pr.grad(x), x.copy())
    stream = RngStream(0, "local_batch", 0, 0)
    for k in range(8):
        est, _ = local_step(est, pr, 1, k, x, 3, 8, CostLedger(), stream)
        np.testing.assert_allclose(est.v, pr.eval_grad(x, 0), atol=1e-12)
        x = x - 0.3 * est.v


def test_full_batch_collapse_in_driver():
    pr = build_quartic_saddle(6, 1, seed=5)
    cfg = RunConfig(eta=0.02, b=2, K=5, T=3, S=2, P=1, r=0.0, full_batch=True,
                    init="random", probe_deviation=True)
    tr = run_bvr_l_psgd(cfg, pr)
    dev = np.array([d for _, d, _ in tr.deviation])
    assert len(dev) == 30 and dev.max() <= 1e-10


def test_conditional_unbiasedness():
    pr = build_quartic_saddle(4, 2, zeta=0.3, seed=6)
    rng = np.random.default_rng(6)
    x_prev = rng.standard_normal(4) * 0.5
    x_cur = x_prev + 0.2 * rng.standard_normal(4)
    v_prev = rng.standard_normal(4)
    u = rng.standard_normal(4)
    reps = 10_000
    inc = np.empty(reps)
    for i in range(reps):
        est, _ = local_step(LocalEstimator(v_prev, x_prev), pr, 0, 1, x_cur, 1, 4, CostLedger(),
                            RngStream(11, "local_batch", i, 0))
        inc[i] = u @ (est.v - v_prev)
    target = u @ (pr.local_grad(0, x_cur) - pr.local_grad(0, x_prev))
    assert abs(inc.mean() - target) <= 3 * inc.std() / math.sqrt(reps)


def test_perturbed_update_examples():
    x = np.array([1.0, -2.0])
    v = np.array([0.5, 0.5])
    xt, xn = perturbed_update(x, v, 0.1, 0.0, RngStream(0, "noise", 0))
    assert np.array_equal(xt, xn) and np.allclose(xt, [0.95, -2.05])
    xt, xn = perturbed_update(x, np.zeros(2), 0.1, 0.0, RngStream(0, "noise", 0))
    assert np.array_equal(xn, x)
    with pytest.raises(NonFiniteError):
        perturbed_update(x, np.array([np.nan, 0.0]), 0.1, 0.0, RngStream(0, "noise", 0))
    with pytest.raises(ContractError):
        perturbed_update(x, v, 0.0, 0.0, RngStream(0, "noise", 0))


@given(eta=st.floats(1e-4, 10.0), r=st.floats(0.0, 10.0), seed=st.integers(0, 999))
def test_perturbation_within_eta_r(eta, r, seed):
    x = np.zeros(5)
    v = np.ones(5)
    xt, xn = perturbed_update(x, v, eta, r, RngStream(seed, "noise", 0))
    assert np.linalg.norm(xn - xt) <= eta * r * (1 + 1e-12)


def test_deviation_shrinks_with_larger_batches():
    pr = build_quartic_saddle(8, 2, zeta=0.0, seed=7)

    def mean_dev(b, seed):
        cfg = RunConfig(eta=0.05, b=b, K=16, T=2, S=2, P=2, r=0.0, init="random",
                        master_seed=seed, probe_deviation=True)
        tr = run_bvr_l_psgd(cfg, pr)
        return np.mean([d for _, d, _ in tr.deviation])

    for seed in range(5):
        assert mean_dev(16, seed) < mean_dev(4, seed)


def test_sample_minibatch_used_by_local_step_is_keyed():
    pr = build_quartic_saddle(4, 2, seed=8)
    a = sample_minibatch(RngStream(1, "local_batch", 0, 0), pr.datasets[0], 5)
    b = sample_minibatch(RngStream(1, "local_batch", 0, 0), pr.datasets[1], 5)
    # same stream, different worker: same offsets into each worker's block
    assert np.array_equal(a + pr.m, b)
