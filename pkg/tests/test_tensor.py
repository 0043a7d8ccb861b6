import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numerical_grad, rel_error
from wsol import tensor as T


def conv_bruteforce(x, w, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, k, ho, wo))
    for b in range(n):
        for o in range(k):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                r, s = i * stride + a - pad, j * stride + bb - pad
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[b, ci, r, s] * w[o, ci, a, bb]
                    y[b, o, i, j] = acc
    return y


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    y, _ = T.conv2d(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(y, x)


def test_conv_zero_input(rng):
    y, _ = T.conv2d(np.zeros((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), 1, 1)
    assert not y.any()


def test_conv_hand_example():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    y, _ = T.conv2d(x, np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(y[0, 0], [[12, 16], [24, 28]])


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 2), (3, 2, 3)])
def test_conv_matches_bruteforce(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    y, _ = T.conv2d(x, w, stride, pad)
    np.testing.assert_allclose(y, conv_bruteforce(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv_is_linear(rng):
    x1, x2 = rng.standard_normal((2, 2, 3, 6, 6))
    w = rng.standard_normal((5, 3, 3, 3))
    lhs, _ = T.conv2d(2.5 * x1 - 0.7 * x2, w, 1, 1)
    a, _ = T.conv2d(x1, w, 1, 1)
    b, _ = T.conv2d(x2, w, 1, 1)
    np.testing.assert_allclose(lhs, 2.5 * a - 0.7 * b, rtol=1e-5, atol=1e-10)


def test_batchnorm_eval_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y, _ = T.batch_norm(x, T.BatchNormParams.identity(3), "eval")
    np.testing.assert_allclose(y, x / np.sqrt(1 + T.BN_EPS))


def test_batchnorm_train_normalizes(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    y, _ = T.batch_norm(x, T.BatchNormParams.identity(3), "train")
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_hand_example():
    p = T.BatchNormParams(np.array([2.0]), np.array([1.0]), np.zeros(1), np.ones(1))
    y, _ = T.batch_norm(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), p, "train")
    np.testing.assert_allclose(y.ravel(), [-1, 3], atol=1e-4)


def test_batchnorm_running_stats_update():
    p = T.BatchNormParams.identity(1)
    T.batch_norm(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), p, "train")
    # EMA with decay 0.9 toward mean 2 and unbiased variance 2
    np.testing.assert_allclose(p.running_mean, [0.2])
    np.testing.assert_allclose(p.running_var, [0.9 + 0.1 * 2.0])


def test_batchnorm_degenerate_batch():
    with pytest.raises(T.DegenerateBatchError):
        T.batch_norm(np.ones((1, 2, 1, 1)), T.BatchNormParams.identity(2), "train")


def test_relu_gap_linear_examples():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0]))[0], [0, 0, 2])
    assert np.all(T.gap(np.full((2, 3, 4, 7), 5.0))[0] == 5.0)
    y, _ = T.linear(np.array([[1.0, 2.0]]), np.eye(2), np.ones(2))
    np.testing.assert_array_equal(y, [[2, 3]])
    with pytest.raises(ValueError):
        T.linear(np.ones((1, 3)), np.eye(2), np.ones(2))


def test_gap_relu_nonnegative(rng):
    x = np.abs(rng.standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(T.gap(T.relu(x)[0])[0], T.gap(x)[0])


def test_softmax_cross_entropy_examples():
    loss, probs = T.softmax_cross_entropy(np.zeros((1, 4)), [2])
    np.testing.assert_allclose(probs, 0.25)
    assert loss == pytest.approx(np.log(4))
    loss, _ = T.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
    assert np.isfinite(loss) and loss == pytest.approx(0, abs=1e-12)
    # -log(e / (e + e^2)) = ln(1 + e); the larger logit's label gives ln(1 + e) - 1
    loss, _ = T.softmax_cross_entropy(np.array([[1.0, 2.0]]), [0])
    assert loss == pytest.approx(np.log(1 + np.e), rel=1e-12)
    loss, _ = T.softmax_cross_entropy(np.array([[1.0, 2.0]]), [1])
    assert loss == pytest.approx(np.log(1 + np.e) - 1, rel=1e-12)
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(np.zeros((1, 2)), [2])


# -- backward rules against central finite differences ---------------------

SEEDS = range(5)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 1)])
def test_conv_backward(seed, stride, pad, k):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 3, 5, 5))
    w = r.standard_normal((4, 3, k, k))
    y, cache = T.conv2d(x, w, stride, pad)
    up = r.standard_normal(y.shape)
    dx, dw = T.conv2d_backward(up, cache)
    f = lambda: float((T.conv2d(x, w, stride, pad)[0] * up).sum())
    assert rel_error(dx, numerical_grad(f, x)) < 1e-3
    assert rel_error(dw, numerical_grad(f, w)) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_backward(seed, mode):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, 2, 3, 3))
    p = T.BatchNormParams(r.standard_normal(2), r.standard_normal(2), r.standard_normal(2),
                          r.random(2) + 0.5)
    up = r.standard_normal(x.shape)

    def f():
        q = T.BatchNormParams(p.gamma, p.beta, p.running_mean.copy(), p.running_var.copy())
        return float((T.batch_norm(x, q, mode)[0] * up).sum())

    q = T.BatchNormParams(p.gamma, p.beta, p.running_mean.copy(), p.running_var.copy())
    _, cache = T.batch_norm(x, q, mode)
    dx, dg, db = T.batch_norm_backward(up, cache)
    assert rel_error(dx, numerical_grad(f, x)) < 1e-3
    assert rel_error(dg, numerical_grad(f, p.gamma)) < 1e-3
    assert rel_error(db, numerical_grad(f, p.beta)) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gap_linear_backward(seed):
    r = np.random.default_rng(seed)
    # keep relu inputs away from the kink
    x = r.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 0.05] = 0.5
    up = r.standard_normal(x.shape)
    y, mask = T.relu(x)
    assert rel_error(T.relu_backward(up, mask), numerical_grad(lambda: float((T.relu(x)[0] * up).sum()), x)) < 1e-3

    upg = r.standard_normal((2, 3))
    _, shape = T.gap(x)
    g = numerical_grad(lambda: float((T.gap(x)[0] * upg).sum()), x)
    assert rel_error(T.gap_backward(upg, shape), g) < 1e-3

    a, w, b = r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)
    upl = r.standard_normal((3, 2))
    _, cache = T.linear(a, w, b)
    da, dw, db = T.linear_backward(upl, cache)
    f = lambda: float((T.linear(a, w, b)[0] * upl).sum())
    for analytic, arr in ((da, a), (dw, w), (db, b)):
        assert rel_error(analytic, numerical_grad(f, arr)) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_backward(seed):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((4, 3))
    labels = r.integers(0, 3, 4)
    _, probs = T.softmax_cross_entropy(logits, labels)
    g = numerical_grad(lambda: T.softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_error(T.softmax_cross_entropy_backward(probs, labels), g) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 7), st.integers(1, 2), st.integers(0, 1),
       st.integers(0, 2**31))
def test_conv_forward_deterministic_and_shaped(n, c, side, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, side, side))
    w = r.standard_normal((2, c, 3, 3))
    y1, _ = T.conv2d(x, w, stride, pad)
    y2, _ = T.conv2d(x, w, stride, pad)
    assert y1.shape == (n, 2, (side + 2 * pad - 3) // stride + 1, (side + 2 * pad - 3) // stride + 1)
    assert np.array_equal(y1, y2)
    assert np.all(np.isfinite(y1))
