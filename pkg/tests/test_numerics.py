import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazekit import numerics as nx
from gazekit.errors import NumericFault, ShapeMismatch, ZeroBatch

import gradcheck as gc
from oracles import naive_conv2d, naive_pool


# --- forward passes against naive loops -------------------------------------

@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_same_matches_naive(rng, k):
    x = rng.standard_normal((2, 6, 5, 3))
    w = rng.standard_normal((k, k, 3, 4))
    b = rng.standard_normal(4)
    out, _ = nx.conv2d_forward(x, w, b, padding="same")
    assert out.shape == (2, 6, 5, 4)
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, k // 2), rtol=1e-12, atol=1e-12)


def test_conv_valid_and_stride(rng):
    x = rng.standard_normal((1, 7, 7, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    ref = naive_conv2d(x, w, b, 0)
    out, _ = nx.conv2d_forward(x, w, b, padding="valid")
    np.testing.assert_allclose(out, ref, atol=1e-12)
    out2, _ = nx.conv2d_forward(x, w, b, stride=2, padding="valid")
    np.testing.assert_allclose(out2, ref[:, ::2, ::2], atol=1e-12)


def test_conv_identity_kernel():
    # 1x1 kernel of ones over a single channel copies the input
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    out, _ = nx.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_shape_errors(rng):
    x = rng.standard_normal((1, 4, 4, 3))
    with pytest.raises(ShapeMismatch):
        nx.conv2d_forward(x, rng.standard_normal((3, 3, 2, 4)), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        nx.conv2d_forward(x, rng.standard_normal((3, 3, 3, 4)), np.zeros(3))
    with pytest.raises(ShapeMismatch):
        nx.conv2d_forward(x, rng.standard_normal((5, 5, 3, 1)), np.zeros(1), padding="valid")


@pytest.mark.parametrize("kind", ["avg", "max"])
def test_pool_matches_naive(rng, kind):
    x = rng.standard_normal((2, 6, 4, 3))
    out, _ = nx.pool2d_forward(x, kind=kind)
    np.testing.assert_allclose(out, naive_pool(x, kind), atol=1e-12)


def test_pool_odd_input_drops_remainder(rng):
    x = rng.standard_normal((1, 5, 5, 1))
    out, _ = nx.pool2d_forward(x, kind="avg")
    assert out.shape == (1, 2, 2, 1)


def test_global_avg_pool(rng):
    x = rng.standard_normal((3, 4, 5, 2))
    out, _ = nx.global_avg_pool_forward(x)
    np.testing.assert_allclose(out, x.mean(axis=(1, 2)))


def test_batchnorm_train_statistics(rng):
    x = rng.standard_normal((32, 4, 4, 3)) * 3.0 + 2.0
    g, b = np.ones(3), np.zeros(3)
    rm, rv = np.zeros(3), np.ones(3)
    out, _ = nx.batchnorm_forward(x, g, b, rm, rv, mode="train")
    mu = out.mean(axis=(0, 1, 2))
    var = out.var(axis=(0, 1, 2))
    batch_var = x.var(axis=(0, 1, 2))
    assert np.all(np.abs(mu) < 1e-5)
    np.testing.assert_allclose(var, batch_var / (batch_var + 1e-3), atol=1e-3)
    # running statistics: r <- 0.9 r + 0.1 batch
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * batch_var)


def test_batchnorm_infer_uses_running_stats(rng):
    x = rng.standard_normal((4, 2, 2, 2))
    g, b = np.array([2.0, 1.0]), np.array([0.5, -1.0])
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out, _ = nx.batchnorm_forward(x, g, b, rm.copy(), rv.copy(), mode="infer")
    np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + 1e-3) * g + b)


def test_batchnorm_rejects_single_sample_in_train():
    with pytest.raises(ZeroBatch):
        nx.batchnorm_forward(np.ones((1, 2, 2, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1),
                             mode="train")


def test_relu_gradient_zero_at_zero():
    x = np.array([[-1.0, 0.0, 2.0]])
    out, mask = nx.relu_forward(x)
    np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(nx.relu_backward(np.ones_like(x), mask), [[0.0, 0.0, 1.0]])


def test_mse_value_and_shape_error():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    loss, grad = nx.mse_loss(pred, np.zeros((2, 2)))
    assert loss == pytest.approx((1 + 4 + 9 + 16) / 4)
    with pytest.raises(ShapeMismatch):
        nx.mse_loss(pred, np.zeros((2, 3)))


def test_check_finite_raises_numeric_fault():
    with pytest.raises(NumericFault, match="step 7"):
        nx.check_finite(np.array([1.0, np.nan]), "grad", step=7)


# --- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("name", [n for n in gc.OP_CASES if not n.startswith("tiny")])
def test_op_gradients(name):
    for seed in range(10):
        worst, n = gc.OP_CASES[name](seed)
        assert n > 0
        assert worst < gc.TOL, f"{name} seed {seed}: relative error {worst:.3g}"


@pytest.mark.parametrize("pooling", ["avg", "max"])
def test_tiny_net_gradients(pooling):
    for seed in range(8):
        worst, n = gc.case_tiny_net(seed, pooling)
        assert n > 50
        assert worst < gc.TOL, f"seed {seed}: relative error {worst:.3g}"


def test_numeric_grad_skips_kinks():
    x = np.array([0.0004, 1.0])  # first entry sits within h of the relu kink
    f = lambda: float(nx.relu_forward(x)[0].sum())  # noqa: E731
    g = nx.numeric_grad(f, x, signature=lambda: x > 0)
    assert math.isnan(g[0]) and g[1] == pytest.approx(1.0)


# --- optimizer and schedules ---------------------------------------------------

def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = nx.Parameter(np.zeros(3))
    p.grad[...] = g
    nx.adam_step([p], lr=0.1, t=1)
    # with bias correction the first update is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.value, -0.1 * g / (np.abs(g) + 1e-7), rtol=1e-12)


def test_adam_two_steps_against_formula():
    p = nx.Parameter(np.array([1.0]))
    m = v = 0.0
    value = 1.0
    for t, g in enumerate([0.3, -0.7], start=1):
        p.grad[...] = g
        nx.adam_step([p], lr=0.01, t=t)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        value -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-7)
    assert p.value[0] == pytest.approx(value, rel=1e-12)


@pytest.mark.parametrize("step, lr", [(0, 0.016), (7999, 0.016), (8000, 0.01024),
                                      (16000, 0.0065536), (24000, 0.016 * 0.64 ** 3)])
def test_staircase_schedule(step, lr):
    assert nx.lr_at(nx.LrSchedule(), step) == pytest.approx(lr, rel=1e-12)


def test_plateau_schedule_halves_after_patience():
    s = nx.LrSchedule(kind="reduce_on_plateau", plateau_patience=2, plateau_factor=0.5)
    assert nx.lr_at(s, 0, plateau_signal=1.0) == 0.016
    assert nx.lr_at(s, 1, plateau_signal=1.5) == 0.016
    assert nx.lr_at(s, 2, plateau_signal=1.2) == 0.008
    assert nx.lr_at(s, 3) == 0.008  # no signal: no state change
    assert nx.lr_at(s, 4, plateau_signal=0.5) == 0.008


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 200_000))
def test_staircase_is_nonincreasing_and_piecewise_constant(step):
    s = nx.LrSchedule()
    a, b = nx.lr_at(s, step), nx.lr_at(s, step + 1)
    assert b <= a
    assert (a == b) == ((step + 1) % 8000 != 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_conv_is_linear_in_input(seed, alpha):
    r = np.random.default_rng(seed)
    x1, x2 = r.standard_normal((2, 1, 4, 4, 2))
    w = r.standard_normal((3, 3, 2, 2))
    z = np.zeros(2)
    lhs, _ = nx.conv2d_forward(x1 + alpha * x2, w, z)
    rhs = nx.conv2d_forward(x1, w, z)[0] + alpha * nx.conv2d_forward(x2, w, z)[0]
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_avg_pool_preserves_mean_on_even_input(seed):
    x = np.random.default_rng(seed).standard_normal((1, 4, 6, 2))
    out, _ = nx.pool2d_forward(x, kind="avg")
    np.testing.assert_allclose(out.mean(axis=(1, 2)), x.mean(axis=(1, 2)), atol=1e-12)
