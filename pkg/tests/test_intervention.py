import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cicf_lab.clustering import ClusterAssignment, stats_from_gradients
from cicf_lab.data import DomainDataset
from cicf_lab.errors import ConfigError, DomainError, ShapeError
from cicf_lab.intervention import (GradientEstimate, global_gradient, monte_carlo_se,
                                   rounding_bias, se_ours, se_random, se_report, taylor_residual,
                                   virtual_update)
from cicf_lab.model import Batch, ModelSpec, ParamVector, init_params, loss_and_grad
from cicf_lab.sampling import Allocation, SamplerKind, allocation_for


def one_cluster(n):
    return ClusterAssignment(np.zeros(n, int), np.zeros((1, 1)), [0])


def scalar_population(values):
    return np.asarray(values, dtype=float).reshape(-1, 1)


# ---- global gradient -----------------------------------------------------

def test_identical_samples_give_their_own_gradient():
    X = np.tile([[0.2, -0.7]], (10, 1))
    y = np.ones(10, int)
    ds = DomainDataset(X, y, np.zeros(10, int), 2, 1)
    spec = ModelSpec((2, 3, 2))
    params = init_params(spec, 0)
    est = global_gradient(params, spec, ds, one_cluster(10), Allocation((4,)),
                          np.random.default_rng(0))
    np.testing.assert_allclose(est.g, loss_and_grad(params, spec, Batch(X[:1], y[:1]))[1],
                               rtol=1e-13)


def test_full_population_draw_equals_full_gradient(three_blob_fixture):
    ds, _ = three_blob_fixture
    spec = ModelSpec((2, 4, 2), split_index=1)
    params = init_params(spec, 2)
    est = global_gradient(params, spec, ds, one_cluster(len(ds)), Allocation((len(ds),)),
                          np.random.default_rng(0))
    full = loss_and_grad(params, spec, ds.batch())[1]
    # same rows in a different order; summation order differs only at rounding level
    np.testing.assert_allclose(est.g, full, rtol=1e-12, atol=1e-16)
    ordered = ds.batch(np.sort(est.batch_indices))
    assert loss_and_grad(params, spec, ordered)[1].tobytes() == full.tobytes()


def test_proportional_estimate_is_unbiased(three_blob_fixture):
    ds, a = three_blob_fixture
    spec = ModelSpec((2, 3, 2), split_index=1)
    params = init_params(spec, 4)
    alloc = allocation_for("stratified_proportional", a, 6)
    rng = np.random.default_rng(0)
    gs = np.array([global_gradient(params, spec, ds, a, alloc, rng).g for _ in range(3000)])
    full = loss_and_grad(params, spec, ds.batch())[1]
    se = gs.std(axis=0) / np.sqrt(len(gs))
    assert np.all(np.abs(gs.mean(axis=0) - full) <= 4 * se + 1e-12)


# ---- virtual update ------------------------------------------------------

def test_virtual_update_example():
    spec = ModelSpec((1, 1))
    th = ParamVector(np.array([1.0, 2.0]), spec.manifest)
    out = virtual_update(th, np.array([0.5, -1.0]), alpha=0.1)
    np.testing.assert_allclose(out.values, [0.95, 2.1], atol=1e-15)
    np.testing.assert_array_equal(th.values, [1.0, 2.0])


def test_virtual_update_alpha_zero_is_identity():
    spec = ModelSpec((2, 2))
    th = init_params(spec, 0)
    assert virtual_update(th, np.ones(spec.n_params), 0.0).values.tobytes() == th.values.tobytes()


def test_virtual_update_uses_estimate_alpha_and_mask():
    spec = ModelSpec((2, 2, 2), split_index=1)
    th = init_params(spec, 1)
    g = GradientEstimate(np.ones(spec.n_params), SamplerKind.RANDOM, np.arange(2), alpha=0.5)
    out = virtual_update(th, g, mask=spec.head_slice())
    head = spec.head_slice()
    np.testing.assert_allclose(out.values[head], th.values[head] - 0.5)
    np.testing.assert_array_equal(out.values[:head.start], th.values[:head.start])


def test_virtual_update_errors():
    spec = ModelSpec((2, 2))
    th = init_params(spec, 0)
    with pytest.raises(ConfigError):
        virtual_update(th, np.zeros(spec.n_params))
    with pytest.raises(ShapeError):
        virtual_update(th, np.zeros(3), 0.1)


def test_virtual_step_descends_on_quadratic():
    A = np.diag([1.0, 3.0])
    spec = ModelSpec((1, 1))
    th = ParamVector(np.array([1.0, -1.0]), spec.manifest)
    loss = lambda v: 0.5 * v @ A @ v
    assert loss(virtual_update(th, A @ th.values, 0.1).values) < loss(th.values)


# ---- Taylor residual -----------------------------------------------------

def test_taylor_residual_vanishes_for_affine_model():
    rng = np.random.default_rng(0)
    spec = ModelSpec((3, 2))  # single affine layer: logits are linear in theta
    params = init_params(spec, 0)
    batch = Batch(rng.standard_normal((5, 3)), rng.integers(0, 2, 5))
    x = rng.standard_normal((4, 3))
    assert taylor_residual(params, spec, x, batch, alpha=0.3) <= 1e-9


def test_taylor_residual_zero_alpha():
    spec = ModelSpec((2, 3, 2))
    batch = Batch(np.ones((2, 2)), [0, 1])
    assert taylor_residual(init_params(spec, 0), spec, np.ones(2), batch, 0.0) == 0.0


def test_taylor_residual_is_second_order():
    rng = np.random.default_rng(3)
    spec = ModelSpec((3, 6, 3), activation="tanh")
    params = init_params(spec, 3)
    batch = Batch(rng.standard_normal((8, 3)), rng.integers(0, 3, 8))
    x = rng.standard_normal((3, 3))
    r = [taylor_residual(params, spec, x, batch, a) for a in (1e-1, 1e-2)]
    assert 0.005 < r[1] / r[0] < 0.02


# ---- analytic SE ---------------------------------------------------------

def test_se_random_full_batch_is_zero():
    assert se_random(3.0, 50, 50) == 0.0


def test_se_random_value_and_approx():
    assert se_random(2.0, 4, 100) == pytest.approx(0.4848484848, rel=1e-9)
    assert se_random(2.0, 4, 100, "approx") == 0.5


def test_se_random_matches_monte_carlo():
    # 100 scalar gradients with population variance exactly 2
    vals = np.r_[np.full(50, np.sqrt(2.0)), np.full(50, -np.sqrt(2.0))]
    G = scalar_population(vals)
    assert stats_from_gradients(G, one_cluster(100)).sigma2 == pytest.approx(2.0)
    mc = monte_carlo_se(G, None, "random", 4, 100_000, np.random.default_rng(0))
    assert mc.estimate == pytest.approx(se_random(2.0, 4, 100), rel=0.02)


@pytest.mark.parametrize("bad", [dict(sigma2=1, M=0, N=5), dict(sigma2=1, M=6, N=5),
                                 dict(sigma2=-1, M=2, N=5), dict(sigma2=1, M=1, N=1)])
def test_se_random_domain(bad):
    with pytest.raises(DomainError):
        se_random(**bad)


def test_se_ours_single_cluster_equals_random():
    for M in (1, 5, 17, 40):
        assert se_ours([1.0], [M], [40], [1.7]) == pytest.approx(se_random(1.7, M, 40), rel=1e-12)
        assert se_ours([1.0], [M], [40], [1.7], "approx") == pytest.approx(
            se_random(1.7, M, 40, "approx"), rel=1e-12)


def test_se_ours_two_equal_clusters():
    # P = [.5, .5], sigma_k^2 = [.1, .3], M = 2: approx is sum P_k / M sigma_k^2
    assert se_ours([0.5, 0.5], [1, 1], [100, 100], [0.1, 0.3], "approx") == pytest.approx(0.1)


def test_se_ours_matches_monte_carlo():
    rng = np.random.default_rng(1)
    G = np.vstack([rng.standard_normal((20, 2)) + [5, 0], rng.standard_normal((40, 2)) - [0, 5]])
    a = ClusterAssignment(np.r_[np.zeros(20, int), np.ones(40, int)], np.zeros((2, 1)), [0, 1])
    s = stats_from_gradients(G, a)
    alloc = allocation_for("stratified_proportional", a, 6)
    analytic = se_ours(s.weights, alloc, s.sizes, s.sigma2_k)
    mc = monte_carlo_se(G, a, "stratified_proportional", 6, 100_000, np.random.default_rng(0))
    assert mc.estimate == pytest.approx(analytic, rel=0.03)


def test_se_ours_not_above_random_for_separated_clusters():
    rng = np.random.default_rng(2)
    G = np.vstack([rng.standard_normal((30, 3)) + 4, rng.standard_normal((30, 3)) - 4])
    a = ClusterAssignment(np.repeat([0, 1], 30), np.zeros((2, 1)), [0, 1])
    s = stats_from_gradients(G, a)
    for M in (2, 6, 10):
        alloc = allocation_for("stratified_proportional", a, M)
        assert se_ours(s.weights, alloc, s.sizes, s.sigma2_k) < se_random(s.sigma2, M, 60)


def test_se_ours_domain_errors():
    with pytest.raises(DomainError):
        se_ours([1.0], [0], [5], [1.0])
    with pytest.raises(DomainError):
        se_ours([0.5, 0.5], [1], [5, 5], [1.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.integers(2, 30), min_size=1, max_size=5), seed=st.integers(0, 999))
def test_exact_se_never_exceeds_approx(sizes, seed):
    rng = np.random.default_rng(seed)
    s2 = rng.uniform(0, 3, len(sizes))
    P = np.array(sizes) / sum(sizes)
    alloc = [int(rng.integers(1, s + 1)) for s in sizes]
    # with proportional weights N_k = P_k M the approx form is sum P_k^2 / N_k sigma_k^2
    approx = float(np.sum(P ** 2 / np.array(alloc) * s2))
    assert se_ours(P, alloc, sizes, s2) <= approx + 1e-15


def test_rounding_bias_zero_for_integral_quotas(three_blob_fixture):
    _, a = three_blob_fixture
    G = np.random.default_rng(0).standard_normal((60, 3))
    s = stats_from_gradients(G, a)
    assert rounding_bias(a, allocation_for("stratified_proportional", a, 6), s.mu_k, s.mu) < 1e-15


# ---- Monte-Carlo SE ------------------------------------------------------

def test_constant_gradients_give_zero_mc_se():
    G = np.ones((30, 4))
    mc = monte_carlo_se(G, None, "random", 5, 1000, np.random.default_rng(0))
    assert mc.estimate == 0.0 and mc.half_width == 0.0


def test_mc_se_small_fixture_matches_analytic():
    G = np.random.default_rng(4).standard_normal((60, 2))
    s2 = stats_from_gradients(G, one_cluster(60)).sigma2
    mc = monte_carlo_se(G, None, "random", 6, 100_000, np.random.default_rng(1))
    assert abs(mc.estimate - se_random(s2, 6, 60)) <= max(mc.half_width * 1.5,
                                                          0.02 * mc.estimate)


def test_mc_se_requires_enough_trials():
    with pytest.raises(ConfigError):
        monte_carlo_se(np.ones((5, 1)), None, "random", 2, 10, np.random.default_rng(0))


def test_mc_se_deterministic():
    G = np.random.default_rng(0).standard_normal((20, 2))
    a = monte_carlo_se(G, None, "random", 4, 500, np.random.default_rng(9))
    b = monte_carlo_se(G, None, "random", 4, 500, np.random.default_rng(9))
    assert a == b


def test_se_report_fields(three_blob_fixture):
    _, a = three_blob_fixture
    G = np.random.default_rng(0).standard_normal((60, 2)) + a.assignment[:, None] * 3
    r = se_report(G, a, 6, 2000, seed=0)
    assert r.se_ours_exact < r.se_random_exact
    assert r.N == 60 and r.M == 6
    assert set(r.to_json()) >= {"se_random_exact", "se_ours_mc", "rounding_bias"}
