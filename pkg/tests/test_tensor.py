"""Autodiff kernel tests: forward oracles plus finite-difference checks."""

import math

import numpy as np
import pytest

from elnet import tensor as T


def t64(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64))


# -- conv2d ----------------------------------------------------------------


def test_conv_zero_input():
    x = T.Tensor(np.zeros((1, 2, 5, 5), dtype=np.float32))
    w = T.Tensor(np.random.default_rng(0).normal(size=(3, 2, 3, 3)).astype(np.float32))
    y = T.conv2d(x, w, padding=1)
    assert np.all(y.data == 0.0)


def test_conv_ones_overlap_counts():
    x = T.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    w = T.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    y = T.conv2d(x, w, padding=1)
    assert y.data[0, 0, 1, 1] == 9.0
    assert y.data[0, 0, 0, 0] == 4.0
    assert y.data[0, 0, 0, 1] == 6.0


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    y = T.conv2d(T.Tensor(x), T.Tensor(w), padding=0)
    assert np.array_equal(y.data, x)


def test_conv_dilation_preserves_shape():
    x = T.Tensor(np.ones((1, 1, 8, 8), dtype=np.float32))
    w = T.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    for d in (1, 3, 5):
        y = T.conv2d(x, w, padding=d, dilation=d)
        assert y.shape == (1, 1, 8, 8)


def test_conv_channel_mismatch():
    x = T.Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    w = T.Tensor(np.zeros((1, 3, 3, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        T.conv2d(x, w, padding=1)


def test_conv_even_kernel_rejected():
    x = T.Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
    w = T.Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        T.conv2d(x, w)


def test_conv_linear_in_input():
    rng = np.random.default_rng(7)
    x1 = rng.normal(size=(1, 2, 6, 6))
    x2 = rng.normal(size=(1, 2, 6, 6))
    w = T.Tensor(rng.normal(size=(4, 2, 3, 3)))
    a, b = 1.7, -0.3
    lhs = T.conv2d(t64(a * x1 + b * x2), w, padding=1).data
    rhs = a * T.conv2d(t64(x1), w, padding=1).data + b * T.conv2d(t64(x2), w, padding=1).data
    rel = np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-12)
    assert rel < 1e-6


# -- batchnorm2d -------------------------------------------------------------


def _bn_buffers(c, mean=0.0, var=1.0):
    return T.Tensor(np.full(c, mean, dtype=np.float32)), T.Tensor(np.full(c, var, dtype=np.float32))


def test_bn_eval_identity_statistics():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    rm, rv = _bn_buffers(3)
    g = T.Tensor(np.ones(3, dtype=np.float32))
    b = T.Tensor(np.zeros(3, dtype=np.float32))
    y = T.batchnorm2d(T.Tensor(x), g, b, rm, rv, training=False, eps=0.0)
    assert np.allclose(y.data, x, atol=1e-6)


def test_bn_eval_constant_input_gives_beta():
    c = 2.5
    x = T.Tensor(np.full((1, 2, 3, 3), c, dtype=np.float32))
    rm = T.Tensor(np.full(2, c, dtype=np.float32))
    rv = T.Tensor(np.ones(2, dtype=np.float32))
    g = T.Tensor(np.ones(2, dtype=np.float32))
    b = T.Tensor(np.array([0.7, -1.2], dtype=np.float32))
    y = T.batchnorm2d(x, g, b, rm, rv, training=False)
    assert np.allclose(y.data[:, 0], 0.7, atol=1e-6)
    assert np.allclose(y.data[:, 1], -1.2, atol=1e-6)


def test_bn_train_normalizes_batch():
    rng = np.random.default_rng(3)
    x = rng.normal(loc=3.0, scale=2.0, size=(4, 3, 8, 8)).astype(np.float32)
    rm, rv = _bn_buffers(3)
    g = T.Tensor(np.ones(3, dtype=np.float32))
    b = T.Tensor(np.zeros(3, dtype=np.float32))
    y = T.batchnorm2d(T.Tensor(x), g, b, rm, rv, training=True)
    assert np.allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    assert np.allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    # running stats moved toward the batch statistics
    assert not np.allclose(rm.data, 0.0)


def test_bn_eval_is_pure():
    rng = np.random.default_rng(4)
    x = T.Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
    rm, rv = _bn_buffers(2, mean=0.3, var=1.7)
    g = T.Tensor(np.array([1.1, 0.9], dtype=np.float32))
    b = T.Tensor(np.array([0.0, 0.1], dtype=np.float32))
    y1 = T.batchnorm2d(x, g, b, rm, rv, training=False)
    rm_snap, rv_snap = rm.data.copy(), rv.data.copy()
    y2 = T.batchnorm2d(x, g, b, rm, rv, training=False)
    assert np.array_equal(y1.data, y2.data)
    assert np.array_equal(rm.data, rm_snap) and np.array_equal(rv.data, rv_snap)


def test_bn_rejects_negative_variance_and_empty_batch():
    x = T.Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
    g = T.Tensor(np.ones(1, dtype=np.float32))
    b = T.Tensor(np.zeros(1, dtype=np.float32))
    rm = T.Tensor(np.zeros(1, dtype=np.float32))
    rv = T.Tensor(np.full(1, -0.5, dtype=np.float32))
    with pytest.raises(ValueError):
        T.batchnorm2d(x, g, b, rm, rv, training=False)


# -- activations and shape ops --------------------------------------------------


def test_sigmoid_zero():
    y = T.sigmoid(T.Tensor(np.zeros(3, dtype=np.float32)))
    assert np.all(y.data == 0.5)


def test_gelu_values():
    y = T.gelu(t64([0.0, 1.0, -1.0]))
    assert y.data[0] == 0.0
    # tanh-form value at 1.0
    assert abs(y.data[1] - 0.8411919906082768) < 1e-12
    assert abs(y.data[1] - y.data[2] - 1.0) < 1e-12  # gelu(x)-gelu(-x)=x


def test_relu():
    y = T.relu(t64([-2.0, 0.0, 3.0]))
    assert np.array_equal(y.data, [0.0, 0.0, 3.0])


def test_upsample_block_replication():
    x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    y = T.upsample2x_nearest(x)
    expect = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float32)
    assert np.array_equal(y.data[0, 0], expect)


def test_avgpool_inverts_upsample():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
    y = T.avgpool2x2(T.upsample2x_nearest(x))
    assert np.allclose(y.data, x.data, atol=1e-6)


def test_linear_matches_matmul():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5, 3)).astype(np.float32)
    w = rng.normal(size=(4, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    y = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b))
    assert np.allclose(y.data, x @ w.T + b, atol=1e-6)


def test_concat_reshape_permute_roundtrip():
    rng = np.random.default_rng(8)
    a = T.Tensor(rng.normal(size=(1, 2, 3, 3)).astype(np.float32))
    b = T.Tensor(rng.normal(size=(1, 4, 3, 3)).astype(np.float32))
    c = T.concat([a, b], axis=1)
    assert c.shape == (1, 6, 3, 3)
    p = T.permute(c, (0, 2, 3, 1))
    r = T.reshape(p, (9, 6))
    assert r.shape == (9, 6)


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        T.Tensor(np.array([1.0, np.nan]))
    x = T.Tensor(np.array([0.0], dtype=np.float64))
    with pytest.raises(ValueError):
        T.log(x)  # log(0) = -inf


# -- backward -------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))


def test_backward_quadratic_gives_2x():
    arr = np.array([[1.0, -2.0], [0.5, 3.0]], dtype=np.float32)
    x = T.Tensor(arr, requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert np.allclose(x.grad, 2 * arr)


def test_backward_requires_scalar():
    x = T.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = T.mul(x, x)
    with pytest.raises(ValueError):
        T.backward(y)


def test_backward_consumed_graph_rejected():
    x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    s = T.tsum(x)
    T.backward(s)
    with pytest.raises(RuntimeError):
        T.backward(s)


def test_backward_accumulates_shared_input():
    x = T.Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    y = T.add(T.mul(x, x), x)  # x^2 + x, d/dx = 2x + 1 = 5
    T.backward(T.tsum(y))
    assert np.allclose(x.grad, [5.0])


def test_no_grad_blocks_tape():
    x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(x, x))
    assert not y.requires_grad


# -- grad_check oracle -------------------------------------------------------------


def test_grad_check_sum_of_squares():
    rep = T.grad_check(lambda x: T.tsum(T.mul(x, x)), t64(np.random.default_rng(0).normal(size=8)), tol=1e-6)
    assert rep.passed


def test_grad_check_requires_float64():
    with pytest.raises(ValueError):
        T.grad_check(lambda x: T.tsum(x), T.Tensor(np.zeros(3, dtype=np.float32)))


def test_grad_check_detects_nondeterminism():
    state = {"n": 0}

    def f(x):
        state["n"] += 1
        return T.tsum(T.mul(x, T.Tensor(np.full(x.shape, float(state["n"])))))

    with pytest.raises(RuntimeError):
        T.grad_check(f, t64(np.ones(2)))


def test_grad_check_catches_injected_fault():
    # a "square" whose backward rule is deliberately wrong by a factor
    def bad_square(a):
        out = T.Tensor(a.data * a.data)
        out.requires_grad = True
        out._parents = (a,)
        out._backward = lambda g: (3.0 * g * a.data,)  # should be 2x
        return out

    rep = T.grad_check(lambda x: T.tsum(bad_square(x)), t64([1.0, 2.0]), tol=1e-5)
    assert not rep.passed


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_composite_many_seeds(seed):
    rng = np.random.default_rng(seed)
    w = T.Tensor(rng.normal(size=(2, 1, 3, 3)))
    gam = t64(rng.uniform(0.5, 1.5, size=2))
    bet = t64(rng.normal(size=2))

    def f(x):
        c = T.conv2d(x, w, padding=1)
        rm, rv = t64(np.zeros(2)), t64(np.ones(2))
        y = T.batchnorm2d(c, gam, bet, rm, rv, training=True)
        return T.tmean(T.mul(T.sigmoid(y), T.gelu(c)))

    rep = T.grad_check(f, t64(rng.normal(size=(2, 1, 4, 4))), tol=1e-5)
    assert rep.passed, f"seed {seed}: {rep.max_rel_err}"


def test_grad_check_weight_gradients():
    rng = np.random.default_rng(11)
    x = T.Tensor(rng.normal(size=(1, 2, 4, 4)))

    def f(wt):
        y = T.conv2d(x, T.reshape(wt, (3, 2, 3, 3)), padding=1)
        return T.tsum(T.mul(y, y))

    rep = T.grad_check(f, t64(rng.normal(size=(3 * 2 * 3 * 3,))), tol=1e-5)
    assert rep.passed


def test_grad_check_pool_upsample_concat():
    rng = np.random.default_rng(12)

    def f(x):
        lo = T.avgpool2x2(x)
        hi = T.upsample2x_nearest(lo)
        cat = T.concat([x, hi], axis=1)
        return T.tmean(T.relu(cat))

    rep = T.grad_check(f, t64(rng.normal(size=(1, 2, 4, 4))), tol=1e-5)
    assert rep.passed


def test_grad_check_div_log_clip():
    rng = np.random.default_rng(13)

    def f(x):
        p = T.clip(T.sigmoid(x), 1e-6, 1 - 1e-6)
        return T.tsum(T.div(T.log(p), T.Tensor(np.full(p.shape, -2.0))))

    rep = T.grad_check(f, t64(rng.normal(size=(5,))), tol=1e-5)
    assert rep.passed


def test_grad_check_sampled_subset():
    rng = np.random.default_rng(14)
    rep = T.grad_check(lambda x: T.tsum(T.mul(x, x)), t64(rng.normal(size=200)), tol=1e-6, sample=32, seed=5)
    assert rep.passed and rep.n_checked == 32
