import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import truncnorm

from fd import numeric_grad, rel_error
from wctnet import tensor as T
from wctnet.errors import ConfigError, DataError, NumericError, ShapeError, StateError
from wctnet.tensor import INFER, TRAIN, Parameter, Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def project(y: Tensor, r: np.ndarray) -> Tensor:
    """Scalar <y, r> as a tape node, so any op output can be differentiated."""
    return T._result("project", np.asarray(np.sum(y.data * r)), (y,), lambda g: (g * r,))


def check_op(build, inputs, seed=0, tol=1e-6):
    """Compare the tape gradient of <build(*inputs), r> against central differences."""
    out = build(*inputs)
    r = np.random.default_rng(seed).normal(size=out.shape)
    loss = project(out, r)
    T.backward(loss)
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numeric_grad(lambda: float(np.sum(build(*inputs).data * r)), t.data)
        assert rel_error(t.grad, num) < tol


# --- conv1d ---------------------------------------------------------------


@pytest.mark.parametrize("L,K,stride,n_out,left,right", [(500, 16, 1, 500, 7, 8), (500, 16, 4, 125, 6, 6), (7, 3, 2, 4, 1, 1)])
def test_same_padding(L, K, stride, n_out, left, right):
    assert T.same_padding(L, K, stride) == (n_out, left, right)


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 9, 3)))
    w = Tensor(np.eye(3)[None])
    out = T.conv1d(x, w, Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x.data)


def test_conv_against_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 11, 3))
    w = rng.normal(size=(4, 3, 5))
    b = rng.normal(size=5)
    for stride in (1, 2, 3):
        out = T.conv1d(Tensor(x), Tensor(w), Tensor(b), stride).data
        n, left, _ = T.same_padding(11, 4, stride)
        ref = np.zeros((2, n, 5))
        for t in range(n):
            for k in range(4):
                src = t * stride + k - left
                if 0 <= src < 11:
                    ref[:, t] += x[:, src] @ w[k]
        ref += b
        assert np.allclose(out, ref, atol=1e-12)


def test_conv_layer_lengths():
    x = Tensor(np.zeros((1, 500, 1)))
    h = T.conv1d(x, Tensor(np.zeros((16, 1, 32))), Tensor(np.zeros(32)), 1)
    assert h.shape == (1, 500, 32)
    h = T.conv1d(h, Tensor(np.zeros((16, 32, 32))), Tensor(np.zeros(32)), 4)
    assert h.shape == (1, 125, 32)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv1d(Tensor(np.zeros((1, 10, 2))), Tensor(np.zeros((3, 3, 1))), Tensor(np.zeros(1)))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(3, 12), st.integers(1, 3), st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 999))
def test_conv_gradient(B, L, c_in, K, c_out, stride, seed):
    rng = np.random.default_rng(seed)
    ins = [leaf(rng.normal(size=(B, L, c_in))), leaf(rng.normal(size=(K, c_in, c_out))), leaf(rng.normal(size=c_out))]
    check_op(lambda x, w, b: T.conv1d(x, w, b, stride), ins, seed)


# --- batchnorm ------------------------------------------------------------


def _bn_args(C, rng):
    return leaf(1 + 0.2 * rng.normal(size=C)), leaf(0.3 * rng.normal(size=C))


def test_bn_fixed_point():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 50, 3))
    x = (x - x.mean(axis=(0, 1))) / x.std(axis=(0, 1))
    out = T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), TRAIN)
    assert np.allclose(out.data, x / math.sqrt(1 + T.BN_EPS), atol=1e-12)


def test_bn_infer_identity():
    x = np.random.default_rng(3).normal(size=(2, 5, 3))
    out = T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), INFER)
    assert np.allclose(out.data, x / math.sqrt(1 + T.BN_EPS), atol=1e-12)


def test_bn_constant_channel_gives_beta():
    x = np.full((3, 4, 2), 7.0)
    beta = np.array([0.25, -1.5])
    out = T.batchnorm(Tensor(x), Tensor(np.array([2.0, 3.0])), Tensor(beta), np.zeros(2), np.ones(2), TRAIN)
    assert np.allclose(out.data, beta, atol=1e-12)


def test_bn_running_stats_update():
    x = np.random.default_rng(4).normal(2.0, 3.0, size=(5, 20, 2))
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, TRAIN)
    assert np.allclose(rm, 0.01 * x.mean(axis=(0, 1)))
    assert np.allclose(rv, 0.99 + 0.01 * x.var(axis=(0, 1)))
    before = rm.copy()
    T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, INFER)
    assert np.array_equal(rm, before)


def test_bn_single_value_train():
    with pytest.raises(DataError):
        T.batchnorm(Tensor(np.ones((1, 1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), TRAIN)


def test_bn_shape_error():
    with pytest.raises(ShapeError):
        T.batchnorm(Tensor(np.ones((1, 4, 2))), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), TRAIN)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(2, 8), st.integers(1, 3), st.sampled_from([TRAIN, INFER]), st.integers(0, 999))
def test_bn_gradient(B, L, C, mode, seed):
    rng = np.random.default_rng(seed)
    g, b = _bn_args(C, rng)
    x = leaf(rng.normal(size=(B, L, C)))
    rm, rv = rng.normal(size=C), rng.uniform(0.5, 2, size=C)

    def build(x, g, b):
        # fresh copies so running-stat updates do not leak between evaluations
        return T.batchnorm(x, g, b, rm.copy(), rv.copy(), mode)

    check_op(build, [x, g, b], seed)


# --- relu / dropout -------------------------------------------------------


def test_relu_examples():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert np.all(T.relu(Tensor(-np.ones(5))).data == 0)


def test_relu_gradient_mask():
    x = leaf([-2.0, -0.5, 0.3, 4.0])
    T.backward(project(T.relu(x), np.ones(4)))
    assert np.array_equal(x.grad, [0, 0, 1, 1])


def test_dropout_identity_cases():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert np.array_equal(T.dropout(x, 0.0, TRAIN, 1).data, x.data)
    assert np.array_equal(T.dropout(x, 0.2, INFER, 1).data, x.data)


def test_dropout_statistics():
    x = Tensor(np.random.default_rng(0).uniform(1, 2, size=(400, 500)))
    out = T.dropout(x, 0.2, TRAIN, rng_seed=17).data
    survive = np.mean(out != 0)
    assert abs(survive - 0.8) < 0.02
    assert abs(out.mean() / x.data.mean() - 1) < 0.02
    kept = out != 0
    assert np.allclose(out[kept], x.data[kept] / 0.8)


def test_dropout_determinism_and_gradient():
    x = leaf(np.random.default_rng(0).normal(size=(5, 6)))
    a = T.dropout(x, 0.5, TRAIN, (3, 1, 2)).data
    b = T.dropout(x, 0.5, TRAIN, (3, 1, 2)).data
    assert np.array_equal(a, b)
    check_op(lambda x: T.dropout(x, 0.5, TRAIN, (3, 1, 2)), [x])


def test_dropout_rate_error():
    with pytest.raises(ConfigError):
        T.dropout(Tensor(np.ones(3)), 1.0, TRAIN, 0)


# --- slicing and concatenation --------------------------------------------


def test_concat_leads_roundtrip():
    rng = np.random.default_rng(5)
    parts = [Tensor(rng.normal(size=(2, 125, 32))) for _ in range(12)]
    out = T.concat_leads(parts)
    assert out.shape == (2, 125, 384)
    for k in range(12):
        assert np.array_equal(out.data[..., 32 * k:32 * (k + 1)], parts[k].data)


def test_concat_leads_arity_and_mismatch():
    parts = [Tensor(np.zeros((1, 5, 2))) for _ in range(11)]
    with pytest.raises(ShapeError):
        T.concat_leads(parts)
    with pytest.raises(ShapeError):
        T.concat_leads(parts + [Tensor(np.zeros((1, 4, 2)))])


def test_concat_take_time_step_gradients():
    rng = np.random.default_rng(6)
    parts = [leaf(rng.normal(size=(2, 3, 2))) for _ in range(3)]
    check_op(lambda *p: T.concat_leads(list(p), n_leads=3), parts)
    x = leaf(rng.normal(size=(2, 4, 3)))
    check_op(lambda x: T.take_channel(x, 1), [x])
    check_op(lambda x: T.time_step(x, -1), [x])


# --- LSTM ------------------------------------------------------------------


def test_lstm_zero_weights():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 7, 3)))
    out = T.lstm_layer(x, Tensor(np.zeros((3 + 4, 16))), Tensor(np.zeros(16)), 4)
    assert out.shape == (2, 7, 4)
    assert np.all(out.data == 0)


def test_lstm_hand_example():
    out = T.lstm_layer(Tensor([[[1.0]]]), Tensor(np.ones((2, 4))), Tensor(np.zeros(4)), 1, return_sequences=False)
    s = 1 / (1 + math.exp(-1))
    c = s * math.tanh(1)
    assert out.shape == (1, 1)
    assert out.data[0, 0] == pytest.approx(s * math.tanh(c), abs=1e-12)
    assert s == pytest.approx(0.7311, abs=1e-4)
    assert c == pytest.approx(0.5568, abs=1e-4)
    assert out.data[0, 0] == pytest.approx(0.3696, abs=1e-4)


def _lstm_reference(x, w, b, U):
    B, L, D = x.shape
    h = np.zeros((B, U))
    c = np.zeros((B, U))
    seq = []
    sig = lambda z: 1 / (1 + np.exp(-z))
    for t in range(L):
        z = np.concatenate([x[:, t], h], axis=1) @ w + b
        i, f, g, o = sig(z[:, :U]), sig(z[:, U:2 * U]), np.tanh(z[:, 2 * U:3 * U]), sig(z[:, 3 * U:])
        c = f * c + i * g
        h = o * np.tanh(c)
        seq.append(h)
    return np.stack(seq, axis=1)


def test_lstm_matches_reference_loop():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 9, 4))
    w = rng.normal(0, 0.5, size=(4 + 5, 20))
    b = rng.normal(0, 0.5, size=20)
    out = T.lstm_layer(Tensor(x), Tensor(w), Tensor(b), 5).data
    assert np.allclose(out, _lstm_reference(x, w, b, 5), atol=1e-13)
    last = T.lstm_layer(Tensor(x), Tensor(w), Tensor(b), 5, return_sequences=False).data
    assert np.array_equal(last, out[:, -1])


def test_lstm_shape_errors():
    with pytest.raises(ShapeError):
        T.lstm_layer(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((3 + 2, 4))), Tensor(np.zeros(4)), 2)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 6), st.integers(1, 3), st.integers(1, 3), st.booleans(), st.integers(0, 999))
def test_lstm_gradient(B, L, D, U, seqs, seed):
    rng = np.random.default_rng(seed)
    ins = [leaf(rng.normal(size=(B, L, D))), leaf(rng.normal(0, 0.7, size=(D + U, 4 * U))), leaf(rng.normal(0, 0.5, size=4 * U))]
    check_op(lambda x, w, b: T.lstm_layer(x, w, b, U, return_sequences=seqs), ins, seed)


# --- dense / softmax / cross-entropy --------------------------------------


def test_dense_examples():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(T.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = np.array([1.0, -2.0])
    assert np.array_equal(T.dense(Tensor(x), Tensor(np.zeros((4, 2))), Tensor(b)).data, np.tile(b, (3, 1)))
    assert T.dense(Tensor(np.zeros((2, 64))), Tensor(np.zeros((64, 128))), Tensor(np.zeros(128))).shape == (2, 128)
    with pytest.raises(ShapeError):
        T.dense(Tensor(x), Tensor(np.zeros((3, 2))), Tensor(b))


def test_dense_gradient():
    rng = np.random.default_rng(8)
    ins = [leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=2))]
    check_op(T.dense, ins)


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    assert np.allclose(T.softmax(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=2, max_size=6), st.floats(-50, 50))
def test_softmax_properties(row, shift):
    x = np.array([row])
    p = T.softmax(Tensor(x)).data
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1) < 1e-12
    assert np.allclose(T.softmax(Tensor(x + shift)).data, p, atol=1e-12)


def test_softmax_gradient():
    check_op(T.softmax, [leaf(np.random.default_rng(9).normal(size=(3, 4)))])


def test_cross_entropy_examples():
    assert T.cross_entropy(Tensor([[1.0, 0.0]]), [[1, 0]]).item() == pytest.approx(0.0, abs=1e-15)
    assert T.cross_entropy(Tensor([[0.5, 0.5]]), [[1, 0]]).item() == pytest.approx(0.693147, abs=1e-6)
    assert T.cross_entropy(Tensor([[0.25, 0.75]]), [[0, 1]]).item() == pytest.approx(0.287682, abs=1e-6)
    # zero probability on the true class is clipped, not infinite
    assert T.cross_entropy(Tensor([[0.0, 1.0]]), [[1, 0]]).item() == pytest.approx(-math.log(1e-12))


def test_cross_entropy_invalid_targets():
    with pytest.raises(DataError):
        T.cross_entropy(Tensor([[0.5, 0.5]]), [[1, 1]])
    with pytest.raises(DataError):
        T.cross_entropy(Tensor([[0.5, 0.5]]), [[0.5, 0.5]])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(10)
    z = leaf(rng.normal(size=(4, 2)))
    y = np.eye(2)[[0, 1, 1, 0]]
    T.backward(T.cross_entropy(T.softmax(z), y))
    p = T.softmax(Tensor(z.data)).data
    assert np.allclose(z.grad, (p - y) / 4, atol=1e-12)


# --- backward ---------------------------------------------------------------


def test_backward_chain_example():
    # loss = (w x)^2 with x = 3, w = 2, computed as y @ y with y = x w
    w = leaf([[2.0]])
    y = T.dense(Tensor([[3.0]]), w)
    loss = T.dense(y, T._result("reshape", y.data.reshape(1, 1), (y,), lambda g: (g,)))
    assert loss.data.item() == 36.0
    T.backward(T._result("sum", loss.data.reshape(()), (loss,), lambda g: (np.full((1, 1), g),)))
    assert w.grad.item() == pytest.approx(36.0)


def test_backward_without_forward():
    with pytest.raises(StateError):
        T.backward(Tensor(1.0))


def test_backward_zeroes_unused_param():
    used = Parameter("a", Tensor(np.ones((2, 1))))
    unused = Parameter("b", Tensor(np.ones(3)))
    frozen = Parameter("c", Tensor(np.ones(3)), trainable=False)
    out = T.dense(Tensor([[1.0, 2.0]]), used.value)
    T.backward(project(out, np.ones((1, 1))), [used, unused, frozen])
    assert np.array_equal(used.value.grad, [[1.0], [2.0]])
    assert np.array_equal(unused.value.grad, np.zeros(3))
    assert frozen.value.grad is None


def test_non_finite_is_numeric_error():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        T.dense(Tensor([[1e308]]), Tensor([[1e308]]))


# --- init -------------------------------------------------------------------


def test_he_normal_moments():
    t = T.he_normal_init((100_000,), 16, rng_seed=3).data
    sigma = math.sqrt(2 / 16)
    assert sigma == pytest.approx(0.35355, abs=1e-5)
    expected = truncnorm.std(-2, 2) * sigma
    assert expected == pytest.approx(0.3112, abs=1e-3)
    assert abs(t.std() / expected - 1) < 0.05
    assert np.abs(t).max() <= 2 * sigma
    assert abs(t.mean()) < 0.01


def test_he_normal_determinism():
    a = T.he_normal_init((4, 5), 7, rng_seed=(1, 2)).data
    assert np.array_equal(a, T.he_normal_init((4, 5), 7, rng_seed=(1, 2)).data)
    assert not np.array_equal(a, T.he_normal_init((4, 5), 7, rng_seed=(1, 3)).data)
    with pytest.raises(ConfigError):
        T.he_normal_init((2,), 0)
