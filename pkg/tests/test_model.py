import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cicf_lab.errors import ConfigError, NumericError, ShapeError
from cicf_lab.model import (Batch, ModelSpec, ParamVector, QuadraticLoss, forward, forward_batch,
                            hvp, init_params, loss_and_grad, numerical_grad, per_sample_grads)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def random_batch(spec, m, rng):
    return Batch(rng.standard_normal((m, spec.input_dim)), rng.integers(0, spec.n_classes, m))


def fd_grad(params, spec, batch, step=1e-5):
    return numerical_grad(
        lambda th: loss_and_grad(params.with_values(th), spec, batch)[0], params.values, step)


# ---- init_params ---------------------------------------------------------

def test_init_is_deterministic():
    spec = ModelSpec((2, 3, 2))
    a = init_params(spec, 7)
    b = init_params(spec, 7)
    assert a.values.tobytes() == b.values.tobytes()


def test_init_biases_are_zero():
    for _, b in init_params(ModelSpec((2, 3, 2)), 3).layers():
        assert np.all(b == 0.0)


def test_init_respects_fan_in_bound():
    params = init_params(ModelSpec((4, 8, 3)), 1)
    W0, _ = params.layers()[0]
    assert np.max(np.abs(W0)) <= 1 / math.sqrt(4)
    W1, _ = params.layers()[1]
    assert np.max(np.abs(W1)) <= 1 / math.sqrt(8)


@pytest.mark.parametrize("widths", [(0, 3), (2, 0, 2), (3,)])
def test_invalid_specs_rejected(widths):
    with pytest.raises(ConfigError):
        ModelSpec(widths)


def test_split_index_must_be_below_layer_count():
    with pytest.raises(ConfigError):
        ModelSpec((2, 3, 2), split_index=2)


def test_manifest_length_checked():
    spec = ModelSpec((2, 3, 2))
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(spec.n_params + 1), spec.manifest)


# ---- forward -------------------------------------------------------------

def test_zero_params_give_zero_logits():
    spec = ModelSpec((3, 4, 2))
    params = ParamVector(np.zeros(spec.n_params), spec.manifest)
    _, logits = forward(params, spec, np.array([1.0, -2.0, 3.0]))
    assert np.all(logits == 0.0)


def test_identity_layer_returns_input():
    spec = ModelSpec((3, 3))
    params = ParamVector(np.concatenate([np.eye(3).ravel(), np.zeros(3)]), spec.manifest)
    x = np.array([0.3, -1.2, 4.0])
    z, logits = forward(params, spec, x)
    np.testing.assert_array_equal(logits, x)
    np.testing.assert_array_equal(z, x)


def test_forward_matches_straight_line_oracle():
    spec = ModelSpec((2, 3, 2), activation="tanh", split_index=1)
    params = init_params(spec, 11)
    x = np.array([0.7, -0.4])
    v = params.values
    # manual unpacking: W1 (3x2), b1 (3), W2 (2x3), b2 (2)
    W1, b1, W2, b2 = v[:6].reshape(3, 2), v[6:9], v[9:15].reshape(2, 3), v[15:17]
    h = [math.tanh(sum(W1[i, j] * x[j] for j in range(2)) + b1[i]) for i in range(3)]
    out = [sum(W2[i, j] * h[j] for j in range(3)) + b2[i] for i in range(2)]
    z, logits = forward(params, spec, x)
    np.testing.assert_allclose(z, h, atol=1e-12)
    np.testing.assert_allclose(logits, out, atol=1e-12)


def test_forward_dimension_mismatch():
    spec = ModelSpec((2, 2))
    with pytest.raises(ShapeError):
        forward(init_params(spec, 0), spec, np.zeros(3))


@pytest.mark.parametrize("s", [0, 1, 2])
def test_split_changes_only_z(s):
    base = ModelSpec((3, 5, 4, 2), split_index=0)
    params = init_params(base, 5)
    X = np.random.default_rng(0).standard_normal((6, 3))
    spec = ModelSpec((3, 5, 4, 2), split_index=s)
    z, logits = forward_batch(params, spec, X)
    np.testing.assert_array_equal(logits, forward_batch(params, base, X)[1])
    assert z.shape[1] == spec.layer_widths[s]


def test_non_finite_activation_reports_layer():
    spec = ModelSpec((2, 2, 2), activation="relu")
    params = init_params(spec, 0)
    params.values[:] = 1e308
    with pytest.raises(NumericError) as err:
        forward(params, spec, np.array([1e308, 1e308]))
    assert err.value.layer == 0


# ---- loss_and_grad -------------------------------------------------------

def test_uniform_logits_loss_and_logit_gradient():
    spec = ModelSpec((1, 2))
    params = ParamVector(np.zeros(spec.n_params), spec.manifest)
    loss, grad = loss_and_grad(params, spec, Batch([[1.0]], [0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    # bias gradient equals the logit gradient
    np.testing.assert_allclose(grad[2:], [-0.5, 0.5], atol=1e-15)


def test_duplicated_sample_is_mean_invariant():
    spec = ModelSpec((3, 4, 2))
    params = init_params(spec, 2)
    x = np.array([[0.1, 0.2, -0.3]])
    l1, g1 = loss_and_grad(params, spec, Batch(x, [1]))
    l2, g2 = loss_and_grad(params, spec, Batch(np.vstack([x, x]), [1, 1]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    np.testing.assert_allclose(g1, g2, rtol=1e-13)


def test_gradient_matches_finite_differences_343():
    rng = np.random.default_rng(0)
    spec = ModelSpec((3, 4, 3), activation="tanh", split_index=1)
    params = init_params(spec, 4)
    batch = random_batch(spec, 5, rng)
    _, g = loss_and_grad(params, spec, batch)
    assert rel_err(g, fd_grad(params, spec, batch)) <= 1e-6


def test_per_sample_grads_average_to_batch_grad():
    rng = np.random.default_rng(1)
    spec = ModelSpec((3, 5, 2, 3), activation="relu", split_index=2)
    params = init_params(spec, 9)
    batch = random_batch(spec, 7, rng)
    G = per_sample_grads(params, spec, batch.features, batch.labels)
    _, g = loss_and_grad(params, spec, batch)
    np.testing.assert_allclose(G.mean(axis=0), g, rtol=1e-12, atol=1e-15)


def test_labels_out_of_range():
    spec = ModelSpec((2, 2))
    with pytest.raises(ShapeError):
        loss_and_grad(init_params(spec, 0), spec, Batch([[0.0, 1.0]], [2]))


def test_loss_and_grad_is_pure():
    spec = ModelSpec((2, 3, 2))
    params = init_params(spec, 3)
    before = params.values.copy()
    batch = random_batch(spec, 4, np.random.default_rng(3))
    a = loss_and_grad(params, spec, batch)
    b = loss_and_grad(params, spec, batch)
    assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes()
    np.testing.assert_array_equal(params.values, before)


@settings(max_examples=25, deadline=None)
@given(widths=st.lists(st.integers(1, 4), min_size=2, max_size=4),
       act=st.sampled_from(["tanh", "relu"]), seed=st.integers(0, 10_000))
def test_gradient_exactness_property(widths, act, seed):
    widths = tuple(widths[:-1]) + (max(widths[-1], 2),)
    spec = ModelSpec(widths, activation=act)
    if spec.n_params > 50:
        return
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    batch = random_batch(spec, 3, rng)
    _, g = loss_and_grad(params, spec, batch)
    fd = fd_grad(params, spec, batch)
    if act == "relu":
        # a kink inside the FD stencil invalidates the oracle, skip those draws
        acts = [batch.features]
        for i, (W, b) in enumerate(params.layers()[:-1]):
            pre = acts[-1] @ W.T + b
            if np.min(np.abs(pre)) < 1e-4:
                return
            acts.append(np.maximum(pre, 0))
    assert rel_err(g, fd) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_softmax_shift_invariance(shift, seed):
    spec = ModelSpec((3, 4))
    params = init_params(spec, seed)
    batch = random_batch(spec, 4, np.random.default_rng(seed))
    l1, g1 = loss_and_grad(params, spec, batch)
    shifted = params.values.copy()
    shifted[-4:] += shift  # adding to every output bias shifts all logits
    l2, g2 = loss_and_grad(params.with_values(shifted), spec, batch)
    assert l1 == pytest.approx(l2, abs=1e-12)
    np.testing.assert_allclose(g1[-4:], g2[-4:], atol=1e-12)


# ---- hvp -----------------------------------------------------------------

def test_hvp_zero_direction():
    spec = ModelSpec((2, 3, 2))
    params = init_params(spec, 0)
    batch = random_batch(spec, 3, np.random.default_rng(0))
    assert np.all(hvp(params, spec, batch, np.zeros(spec.n_params)) == 0.0)


def test_hvp_rejects_bad_eps():
    spec = ModelSpec((2, 2))
    params = init_params(spec, 0)
    with pytest.raises(ConfigError):
        hvp(params, spec, None, np.ones(spec.n_params), eps=0.0)


def test_hvp_symmetry():
    rng = np.random.default_rng(5)
    spec = ModelSpec((3, 4, 2), activation="tanh")
    params = init_params(spec, 5)
    batch = random_batch(spec, 6, rng)
    v1, v2 = rng.standard_normal((2, spec.n_params))
    a = v1 @ hvp(params, spec, batch, v2)
    b = v2 @ hvp(params, spec, batch, v1)
    assert abs(a - b) <= 1e-6


def test_hvp_on_quadratic_hook():
    rng = np.random.default_rng(2)
    B = rng.standard_normal((5, 5))
    A = B @ B.T
    spec = ModelSpec((1, 2))  # 4 params; manifest only
    A = A[:4, :4]
    params = ParamVector(rng.standard_normal(4), spec.manifest)
    v = rng.standard_normal(4)
    np.testing.assert_allclose(hvp(params, None, None, v, grad_fn=QuadraticLoss(A)), A @ v,
                               atol=1e-8)


def test_hvp_matches_fd_of_gradient_along_v():
    rng = np.random.default_rng(8)
    spec = ModelSpec((2, 3, 2))
    params = init_params(spec, 8)
    batch = random_batch(spec, 5, rng)
    v = rng.standard_normal(spec.n_params)
    # column-by-column Hessian oracle from finite differences of the analytic gradient
    H = np.empty((spec.n_params, spec.n_params))
    for i in range(spec.n_params):
        e = np.zeros(spec.n_params)
        e[i] = 1e-5
        gp = loss_and_grad(params.with_values(params.values + e), spec, batch)[1]
        gm = loss_and_grad(params.with_values(params.values - e), spec, batch)[1]
        H[:, i] = (gp - gm) / 2e-5
    np.testing.assert_allclose(hvp(params, spec, batch, v), H @ v, rtol=1e-5, atol=1e-7)
