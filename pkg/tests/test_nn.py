import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tatu import nn
from tatu.errors import NumericError, ParameterError

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _straight_line(params, x):
    h = x
    for W, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ W + b
        if act == "swish":
            h = z / (1 + np.exp(-z))
        elif act == "relu":
            h = np.where(z > 0, z, 0.0)
        elif act == "tanh":
            h = np.tanh(z)
        else:
            h = z
    return h


def test_zero_network_gives_zero():
    p = nn.MlpParams((np.zeros((3, 2)),), (np.zeros(2),), ("identity",))
    assert np.array_equal(nn.forward(p, np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_layer():
    p = nn.MlpParams((np.eye(4),), (np.zeros(4),), ("identity",))
    x = np.array([0.3, -1.0, 2.0, 5.0])
    assert np.array_equal(nn.forward(p, x), x)


@pytest.mark.parametrize("act", nn.ACTIVATIONS)
def test_forward_matches_reimplementation(act):
    rng = np.random.default_rng(1)
    p = nn.init_mlp([5, 7, 6, 3], act, rng)
    p = p.with_arrays([a + 0.1 * rng.standard_normal(a.shape) for a in p.arrays()])
    x = rng.standard_normal((4, 5))
    np.testing.assert_allclose(nn.forward(p, x), _straight_line(p, x), rtol=1e-12, atol=1e-14)


def test_forward_rejects_wrong_dim():
    p = nn.init_mlp([3, 2], "relu", np.random.default_rng(0))
    with pytest.raises(ParameterError):
        nn.forward(p, np.zeros(4))


def test_constant_loss_zero_gradient():
    p = nn.init_mlp([3, 4, 2], "swish", np.random.default_rng(0))
    loss, g = nn.grad(p, lambda out: (1.5, np.zeros_like(out)), (np.ones((5, 3)),))
    assert loss == 1.5 and all(np.all(gk == 0) for gk in g)


def test_quadratic_single_layer_closed_form():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((3, 2))
    p = nn.MlpParams((W,), (np.zeros(2),), ("identity",))
    x = rng.standard_normal(3)
    y = rng.standard_normal(2)

    def loss(out, y):
        d = out - y
        return float(d @ d), 2 * d

    _, g = nn.grad(p, loss, (x, y))
    # with W stored as (d_in, d_out) the closed form 2(Wx - y)x^T appears transposed
    expected = np.outer(x, 2 * (x @ W - y))
    np.testing.assert_allclose(g[0], expected, rtol=1e-13)


def test_non_finite_loss_raises():
    p = nn.init_mlp([2, 2], "relu", np.random.default_rng(0))
    with pytest.raises(NumericError):
        nn.grad(p, lambda out: (float("nan"), np.zeros_like(out)), (np.ones((1, 2)),))


@pytest.mark.parametrize("act", nn.ACTIVATIONS)
def test_mse_gradient_finite_differences(act):
    rng = np.random.default_rng(3)
    p = nn.init_mlp([4, 8, 8, 3], act, rng)
    x = rng.standard_normal((16, 4))
    y = rng.standard_normal((16, 3))

    def loss_fn(out, y):
        d = out - y
        return float(np.mean(np.sum(d * d, 1))), 2 * d / d.shape[0]

    _, g = nn.grad(p, loss_fn, (x, y))

    def f(arrays):
        return loss_fn(nn.forward(p.with_arrays(arrays), x), y)[0]

    assert nn.finite_difference_check(f, p.arrays(), g, rng=rng) <= 1e-4


def test_adam_zero_gradient_keeps_params():
    arrs = [np.array([1.0, -2.0]), np.array([[3.0]])]
    st0 = nn.AdamState.zeros_like(arrs)
    new, _ = nn.adam_step(arrs, [np.zeros(2), np.zeros((1, 1))], st0, lr=0.1)
    for a, b in zip(arrs, new):
        assert np.array_equal(a, b)


def test_adam_first_step_hand_computed():
    g = np.array([0.5, -2.0, 1e-3])
    lr, eps = 0.01, 1e-8
    new, state = nn.adam_step([np.zeros(3)], [g], nn.AdamState.zeros_like([g]), lr=lr, eps_adam=eps)
    # bias correction makes m_hat = g and v_hat = g^2 after one step
    np.testing.assert_allclose(new[0], -lr * g / (np.abs(g) + eps), rtol=1e-12)
    assert state.t == 1


def test_adam_scalar_convergence():
    x = [np.array([5.0])]
    st_ = nn.AdamState.zeros_like(x)
    for _ in range(200):
        g = [2 * (x[0] - 1.5)]
        x, st_ = nn.adam_step(x, g, st_, lr=0.1)
    assert abs(x[0][0] - 1.5) < 1e-3


def test_adam_accepts_mlp_params():
    p = nn.init_mlp([2, 3], "tanh", np.random.default_rng(0))
    st_ = nn.AdamState.zeros_like(p.arrays())
    q, _ = nn.adam_step(p, [np.ones_like(a) for a in p.arrays()], st_, lr=0.1)
    assert isinstance(q, nn.MlpParams)


def test_gaussian_nll_closed_forms():
    assert abs(nn.gaussian_nll([0.0], [0.0], [0.0]) - HALF_LOG_2PI) <= 1e-12
    assert abs(nn.gaussian_nll(np.ones(3), np.zeros(3), np.ones(3)) - 3 * HALF_LOG_2PI) <= 1e-12
    assert abs(nn.gaussian_nll([0.0], [0.0], [2.0]) - (HALF_LOG_2PI + 2.0)) <= 1e-12
    assert abs(HALF_LOG_2PI - 0.9189385) < 1e-7


def test_diag_kl_closed_forms():
    assert nn.diag_gaussian_kl(np.zeros(4), np.zeros(4)) == 0.0
    assert abs(nn.diag_gaussian_kl([1.0], [0.0]) - 0.5) <= 1e-12
    assert abs(nn.diag_gaussian_kl([0.0], [math.log(4)]) - 0.5 * (4 - math.log(4) - 1)) <= 1e-12
    assert abs(0.5 * (4 - math.log(4) - 1) - 0.8068528) < 1e-7


def test_gaussian_helpers_reject_bad_input():
    with pytest.raises(ParameterError):
        nn.gaussian_nll([0.0], [0.0, 1.0], [0.0])
    with pytest.raises(NumericError):
        nn.diag_gaussian_kl([np.inf], [0.0])


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-4, 2), st.floats(-3, 3))
def test_nll_and_kl_gradients_match_differences(m, lv, t):
    h = 1e-6
    dm, dlv = nn.gaussian_nll_grad(np.array(m), np.array(lv), np.array(t))
    num_m = (nn.gaussian_nll([m + h], [lv], [t]) - nn.gaussian_nll([m - h], [lv], [t])) / (2 * h)
    num_lv = (nn.gaussian_nll([m], [lv + h], [t]) - nn.gaussian_nll([m], [lv - h], [t])) / (2 * h)
    assert abs(dm - num_m) <= 1e-5 * max(1, abs(num_m))
    assert abs(dlv - num_lv) <= 1e-5 * max(1, abs(num_lv))
    km, klv = nn.diag_gaussian_kl_grad(np.array(m), np.array(lv))
    assert abs(km - (nn.diag_gaussian_kl([m + h], [lv]) - nn.diag_gaussian_kl([m - h], [lv])) / (2 * h)) <= 1e-5
    num = (nn.diag_gaussian_kl([m], [lv + h]) - nn.diag_gaussian_kl([m], [lv - h])) / (2 * h)
    assert abs(klv - num) <= 1e-5 * max(1, abs(num))


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50))
def test_gaussian_head_clamps_logvar(raw):
    head = nn.GaussianHead(-10.0, 2.0)
    _, lv = head.split(np.array([0.0, raw]))
    # the outer softplus may overshoot lv_max by log1p(exp(-(lv_max - lv_min)))
    assert -10.0 <= lv[0] <= 2.0 + math.log1p(math.exp(-12.0)) + 1e-12


def test_gaussian_head_backward_matches_differences():
    head = nn.GaussianHead(-4.0, 1.0)
    raw = np.linspace(-8, 5, 27)
    out = np.concatenate([np.zeros_like(raw), raw])
    d = head.backward(out[None], np.zeros((1, raw.size)), np.ones((1, raw.size)))[0, raw.size:]
    h = 1e-6
    num = (head.split(np.concatenate([np.zeros_like(raw), raw + h]))[1]
           - head.split(np.concatenate([np.zeros_like(raw), raw - h]))[1]) / (2 * h)
    np.testing.assert_allclose(d, num, rtol=1e-6, atol=1e-9)
