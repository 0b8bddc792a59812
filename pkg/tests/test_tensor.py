import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecap import tensor as T
from densecap.errors import ConfigError, DimensionError, DomainError, NumericError, UsageError
from densecap.gradcheck import check_gradients
from densecap.tensor import SgdState, Tensor

TOL = 1e-5


def p(shape, rng, lo=-1.0, hi=1.0):
    return T.parameter(rng.uniform(lo, hi, shape))


def assert_grads(f, inputs):
    errs = check_gradients(f, inputs)
    assert max(errs.values()) < TOL, errs


# -- forward values ------------------------------------------------------------------------

def test_matmul_examples():
    m = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    np.testing.assert_array_equal(T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 2)))).data, np.zeros((2, 2)))
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(m))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert T.elementwise("tanh", Tensor(0.0)).item() == 0.0
    np.testing.assert_array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    with pytest.raises(UsageError):
        T.elementwise("cos", Tensor(1.0))


@pytest.mark.parametrize("value", [0.0, -1.0])
def test_log_domain(value):
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, value]))


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, 1.0])


def test_nonfinite_forward_is_an_error():
    with pytest.raises(NumericError):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NumericError):
        Tensor([np.nan])


def test_conv2d_examples():
    x = Tensor(np.arange(9.0).reshape(1, 3, 3))
    ident = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(ident.data, x.data)
    zero = T.conv2d(x, Tensor(np.zeros((2, 1, 3, 3))), pad=1)
    np.testing.assert_array_equal(zero.data, np.zeros((2, 3, 3)))
    sums = T.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(sums.data[0], [[8, 12], [20, 24]])


def test_conv2d_rejects_bad_stride():
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 1, 1))), stride=0)


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("pad", [0, 1, 2])
@pytest.mark.parametrize("k", [1, 2, 3])
def test_conv2d_output_size_formula(stride, pad, k):
    H, W = 7, 6
    out = T.conv2d(Tensor(np.ones((2, H, W))), Tensor(np.ones((3, 2, k, k))), stride=stride, pad=pad)
    assert out.shape == (3, (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1)


def test_softmax_cross_entropy_examples():
    V = 7
    assert T.softmax_cross_entropy(Tensor(np.zeros((3, V))), [0, 3, 6]).item() == pytest.approx(np.log(V))
    assert T.softmax_cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(0.40760596444438, abs=1e-12)
    assert T.softmax_cross_entropy(Tensor([[0.0, 600.0]]), [1]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_softmax_cross_entropy_grad_rows_sum_to_zero():
    rng = np.random.default_rng(0)
    logits = p((4, 5), rng, -3, 3)
    T.backward(T.softmax_cross_entropy(logits, [0, 1, 4, 2]))
    np.testing.assert_allclose(logits.grad.sum(axis=1), 0.0, atol=1e-15)


@pytest.mark.parametrize("d, expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_smooth_l1_examples(d, expected):
    assert T.smooth_l1(Tensor([[d, 0, 0, 0]]), np.zeros((1, 4))).item() == pytest.approx(expected)


def test_smooth_l1_averages_per_box():
    pred = Tensor(np.full((2, 4), 0.5))
    assert T.smooth_l1(pred, np.zeros((2, 4))).item() == pytest.approx(4 * 0.125)
    with pytest.raises(DimensionError):
        T.smooth_l1(pred, np.zeros((2, 3)))


# -- backward --------------------------------------------------------------------------------

def test_backward_examples():
    w = T.parameter([1.0, 2.0, 3.0])
    T.backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, [1, 1, 1])
    v = T.parameter(3.0)
    T.backward(v * v)
    assert v.grad == 6.0


def test_backward_accumulates_until_reset():
    w = T.parameter([1.0, -2.0])
    for _ in range(2):
        T.backward(T.tsum(w * w))
    np.testing.assert_array_equal(w.grad, [4.0, -8.0])
    T.zero_grad([w])
    T.backward(T.tsum(w * w))
    np.testing.assert_array_equal(w.grad, [2.0, -4.0])


def test_backward_needs_scalar():
    with pytest.raises(UsageError):
        T.backward(T.parameter([1.0, 2.0]) * 2.0)


def test_backward_is_deterministic():
    rng = np.random.default_rng(1)
    a, b = p((3, 4), rng), p((4, 2), rng)
    grads = []
    for _ in range(2):
        T.zero_grad([a, b])
        T.backward(T.tsum(T.tanh(T.matmul(a, b))))
        grads.append((a.grad.copy(), b.grad.copy()))
    np.testing.assert_array_equal(grads[0][0], grads[1][0])
    np.testing.assert_array_equal(grads[0][1], grads[1][1])


def test_no_grad_builds_no_graph():
    w = T.parameter([1.0])
    with T.no_grad():
        y = w * 2.0
    assert not y.requires_grad and y._parents == ()


# -- finite differences, one op at a time ----------------------------------------------------

def _ops(rng):
    a, b = p((3, 4), rng), p((3, 4), rng)
    row = p((1, 4), rng)
    m = p((4, 2), rng)
    pos = p((3, 4), rng, 0.5, 2.0)
    # keep relu inputs away from the kink
    r = T.parameter(rng.choice([-1.0, 1.0], (3, 4)) * rng.uniform(0.1, 1.0, (3, 4)))
    return {
        "add": (lambda: T.tsum(T.add(a, b) * a), [a, b]),
        "add_broadcast": (lambda: T.tsum(T.add(a, row) * a), [a, row]),
        "sub": (lambda: T.tsum(T.sub(a, row) * b), [a, row, b]),
        "mul": (lambda: T.tsum(T.mul(a, b)), [a, b]),
        "mul_broadcast": (lambda: T.tsum(T.mul(a, row)), [a, row]),
        "sigmoid": (lambda: T.tsum(T.sigmoid(a) * b), [a, b]),
        "tanh": (lambda: T.tsum(T.tanh(a) * b), [a, b]),
        "relu": (lambda: T.tsum(T.relu(r) * b), [r, b]),
        "exp": (lambda: T.tsum(T.exp(a) * b), [a, b]),
        "log": (lambda: T.tsum(T.log(pos) * b), [pos, b]),
        "matmul": (lambda: T.tsum(T.tanh(T.matmul(a, m))), [a, m]),
        "reshape": (lambda: T.tsum(T.reshape(a, (4, 3)) * T.reshape(b, (4, 3)) * T.reshape(a, (4, 3))), [a, b]),
        "transpose": (lambda: T.tsum(T.matmul(T.transpose(a), b) * T.matmul(T.transpose(a), b)), [a, b]),
        "getitem_basic": (lambda: T.tsum(T.getitem(a, (slice(0, 2), slice(1, 3))) * T.getitem(b, (slice(1, 3), slice(0, 2)))), [a, b]),
        "getitem_fancy": (lambda: T.tsum(T.getitem(a, np.array([0, 2, 0])) * T.getitem(b, np.array([1, 1, 2]))), [a, b]),
        "concat": (lambda: T.tsum(T.concat([a, b], axis=1) * T.concat([b, a], axis=1)), [a, b]),
        "stack": (lambda: T.tsum(T.stack([a, b]) * T.stack([b, b])), [a, b]),
        "tsum_axis": (lambda: T.tsum(T.tsum(a, axis=0) * T.tsum(b, axis=0)), [a, b]),
        "mean": (lambda: T.mean(a * b) + T.tsum(T.mean(a, axis=1) * T.mean(b, axis=1)), [a, b]),
        "softmax_cross_entropy": (lambda: T.softmax_cross_entropy(a, [0, 3, 1]), [a]),
        "weighted_cross_entropy": (lambda: T.softmax_cross_entropy(a, [0, 3, 1], [1.0, 0.0, 2.0]), [a]),
    }


@pytest.mark.parametrize("name", list(_ops(np.random.default_rng(0))))
def test_op_gradients(name):
    f, inputs = _ops(np.random.default_rng(zlib.crc32(name.encode())))[name]
    assert_grads(f, inputs)


def test_conv2d_gradients():
    rng = np.random.default_rng(3)
    x, k, b = p((2, 5, 4), rng), p((3, 2, 3, 3), rng), p((3,), rng)
    w = rng.normal(size=(3, 3, 2))
    assert_grads(lambda: T.tsum(T.conv2d(x, k, stride=2, pad=1, bias=b) * w), [x, k, b])


def test_max_pool_gradients():
    rng = np.random.default_rng(4)
    # distinct values so the argmax is stable under the perturbation
    x = T.parameter(rng.permutation(32).reshape(2, 4, 4) * 0.1)
    w = rng.normal(size=(2, 2, 2))
    assert_grads(lambda: T.tsum(T.max_pool2d(x) * w), [x])


def test_smooth_l1_gradients():
    rng = np.random.default_rng(5)
    d = rng.choice([-1.0, 1.0], (3, 4)) * rng.choice([0.3, 0.7, 1.6, 2.5], (3, 4))
    pred = T.parameter(d)
    assert_grads(lambda: T.smooth_l1(pred, np.zeros((3, 4))), [pred])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_composed_graph_gradients(m, n, seed):
    rng = np.random.default_rng(seed)
    a, w, bias = p((m, n), rng), p((n, n), rng), p((1, n), rng)
    f = lambda: T.tsum(T.sigmoid(T.matmul(T.tanh(a), w) + bias) * T.exp(a * 0.5))  # noqa: E731
    assert_grads(f, [a, w, bias])


# -- optimizer -------------------------------------------------------------------------------

def test_sgd_zero_grad_decays_velocity():
    w = T.parameter([1.0, 2.0])
    state = SgdState(0.1, 0.5, {"w": np.array([1.0, -1.0])})
    T.sgd_step({"w": w}, state)
    np.testing.assert_array_equal(state.velocity["w"], [0.5, -0.5])
    np.testing.assert_array_equal(w.data, [1.5, 1.5])
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_sgd_vanilla():
    w = T.parameter([1.0, 2.0])
    w.grad = np.array([0.25, -1.0])
    T.sgd_step({"w": w}, SgdState(1.0, 0.0))
    np.testing.assert_array_equal(w.data, [0.75, 3.0])


def test_sgd_two_step_momentum_recurrence():
    lr, mu = 0.1, 0.98
    w = T.parameter([0.0])
    state = SgdState(lr, mu)
    g1, g2 = 2.0, -1.0
    w.grad = np.array([g1])
    T.sgd_step({"w": w}, state)
    w.grad = np.array([g2])
    T.sgd_step({"w": w}, state)
    v1 = -lr * g1
    v2 = mu * v1 - lr * g2
    assert w.data[0] == pytest.approx(v1 + v2, abs=1e-15)


def test_sgd_state_validation():
    with pytest.raises(ConfigError):
        SgdState(0.0)
    with pytest.raises(ConfigError):
        SgdState(0.1, 1.0)


def test_clip_grad_norm():
    a, b = T.parameter([3.0]), T.parameter([4.0])
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert T.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert T.global_grad_norm([a, b]) == pytest.approx(1.0)
