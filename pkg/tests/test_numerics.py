import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import check_grads, rel_err
from matrrec import numerics as nx
from matrrec.errors import ConfigError, ContractError, DimensionError
from matrrec.numerics import Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def T(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = nx.matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert nx.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11]]


def test_matmul_gradient_of_sum():
    a, b = T([[1, 0], [0, 1]]), T([[2, 3], [4, 5]])
    tape = nx.Tape()
    with tape:
        loss = nx.sum_(nx.matmul(a, b))
    nx.backward(tape, loss)
    np.testing.assert_allclose(a.grad, [[5, 9], [5, 9]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_broadcast_batch_gradients():
    rng = np.random.default_rng(0)
    a, b = T(rng.normal(size=(3, 2, 4))), T(rng.normal(size=(4, 5)))
    assert check_grads(lambda: nx.sum_(nx.mul(nx.matmul(a, b), nx.matmul(a, b))), [a, b]) < 1e-6


# --- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_closed_form():
    np.testing.assert_allclose(nx.softmax(T([0.0, math.log(3)])).data, [0.25, 0.75], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariant_and_normalised(x, c):
    p = nx.softmax(T(x), axis=-1).data
    np.testing.assert_allclose(p, nx.softmax(T(x + c), axis=-1).data, atol=1e-12)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(p >= 0)


def test_softmax_large_inputs_stay_finite():
    p = nx.softmax(T([1000.0, 1001.0, -1000.0])).data
    assert np.all(np.isfinite(p))


def test_masked_softmax_all_masked_row_is_zero():
    mask = np.array([[True, False], [False, False]])
    p = nx.softmax(T(np.ones((2, 2))), axis=-1, mask=mask).data
    np.testing.assert_array_equal(p, [[1.0, 0.0], [0.0, 0.0]])


# --- layer norm --------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(T([[5.0, 5.0, 5.0]]), T(np.ones(3)), T(np.zeros(3)), 1e-12)
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layer_norm_two_values():
    out = nx.layer_norm(T([1.0, 3.0]), T(np.ones(2)), T(np.zeros(2)), 1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], rtol=1e-10)


def test_layer_norm_zero_gamma_gives_beta():
    rng = np.random.default_rng(1)
    beta = rng.normal(size=4)
    out = nx.layer_norm(T(rng.normal(size=(3, 4))), T(np.zeros(4)), T(beta), 1e-12)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 4)))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=finite))
def test_layer_norm_moments(x):
    if np.any(x.std(axis=-1) < 1e-3):
        return
    out = nx.layer_norm(T(x), T(np.ones(6)), T(np.zeros(6))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        nx.layer_norm(T([1.0, 2.0]), T(np.ones(2)), T(np.zeros(2)), 0.0)


# --- pointwise ---------------------------------------------------------------


def test_activation_values():
    assert nx.gelu(T([0.0])).data[0] == 0.0
    assert nx.silu(T([0.0])).data[0] == 0.0
    assert nx.softplus(T([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-12)
    # 3 * Phi(3) with Phi from the reference erf
    assert nx.gelu(T([3.0])).data[0] == pytest.approx(3 * 0.5 * (1 + math.erf(3 / math.sqrt(2))), rel=1e-12)
    assert round(float(nx.gelu(T([3.0])).data[0]), 4) == 2.9960


def test_elementwise_dispatch():
    x, y = T([1.0, 2.0]), T([3.0, 4.0])
    np.testing.assert_array_equal(nx.elementwise("add", x, y).data, [4, 6])
    np.testing.assert_array_equal(nx.elementwise("mul", x, y).data, [3, 8])
    np.testing.assert_allclose(nx.elementwise("exp", x).data, np.exp([1, 2]))
    with pytest.raises(ConfigError):
        nx.elementwise("relu6", x)


# --- causal conv -------------------------------------------------------------


def test_conv_identity_kernel():
    x = T(np.arange(6.0).reshape(1, 3, 2))
    out = nx.causal_conv1d(x, T(np.ones((1, 2))), T(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_hand_example():
    x = T(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
    out = nx.causal_conv1d(x, T(np.ones((2, 1))), T(np.zeros(1)))
    np.testing.assert_array_equal(out.data.reshape(-1), [1, 3, 5])


@pytest.mark.parametrize("t", [0, 2, 5])
def test_conv_is_causal(t):
    rng = np.random.default_rng(t)
    x = rng.normal(size=(2, 7, 3))
    k, b = T(rng.normal(size=(4, 3))), T(rng.normal(size=3))
    base = nx.causal_conv1d(T(x), k, b).data
    x2 = x.copy()
    x2[:, t + 1:] += rng.normal(size=x2[:, t + 1:].shape) * 10
    out = nx.causal_conv1d(T(x2), k, b).data
    assert np.array_equal(out[:, : t + 1], base[:, : t + 1])


# --- dropout -----------------------------------------------------------------


def test_dropout_identities():
    x = T(np.ones(10))
    assert nx.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert nx.dropout(x, 0.9, False, None) is x


def test_dropout_mean_preserved():
    x = T(np.ones(100_000))
    out = nx.dropout(x, 0.4, True, np.random.default_rng(1234)).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out).round(6)) == {0.0, round(1 / 0.6, 6)}


def test_dropout_rejects_p_one():
    with pytest.raises(ConfigError):
        nx.dropout(T([1.0]), 1.0, True, np.random.default_rng(0))


# --- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = T(np.zeros((2, 3)))
    tape = nx.Tape()
    with tape:
        loss = nx.sum_(x)
    nx.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = T([1.0, 2.0])
    tape = nx.Tape()
    with tape:
        loss = nx.sum_(nx.mul(x, x))
    nx.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = T([1.0, 2.0])
    tape = nx.Tape()
    with tape:
        y = nx.mul(x, x)
    with pytest.raises(ContractError):
        nx.backward(tape, y)


def test_backward_accumulates_fan_out():
    x = T([3.0])
    tape = nx.Tape()
    with tape:
        loss = nx.sum_(nx.add(nx.mul(x, x), x))
    nx.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [7.0])
    nx.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [14.0])


def test_no_tape_no_nodes():
    x = T([1.0])
    tape = nx.Tape()
    y = nx.mul(x, x)
    assert len(tape) == 0 and y.requires_grad


def test_layer_norm_gelu_composite_gradient():
    rng = np.random.default_rng(7)
    x, g, b = T(rng.normal(size=(3, 5))), T(rng.normal(size=5)), T(rng.normal(size=5))
    w = rng.normal(size=(3, 5))
    err = check_grads(lambda: nx.sum_(nx.mul(nx.gelu(nx.layer_norm(x, g, b)), w)), [x, g, b])
    assert err < 1e-6


PRIMITIVES = {
    "matmul": lambda r, ts: nx.matmul(ts[0], ts[1]),
    "add": lambda r, ts: nx.add(ts[0], ts[2]),
    "mul": lambda r, ts: nx.mul(ts[0], ts[2]),
    "softmax": lambda r, ts: nx.softmax(ts[0], axis=-1),
    "masked_softmax": lambda r, ts: nx.softmax(ts[0], axis=-1, mask=np.tril(np.ones((3, 4), bool))),
    "layer_norm": lambda r, ts: nx.layer_norm(ts[0], ts[3], ts[4]),
    "gelu": lambda r, ts: nx.gelu(ts[0]),
    "silu": lambda r, ts: nx.silu(ts[0]),
    "softplus": lambda r, ts: nx.softplus(ts[0]),
    "exp": lambda r, ts: nx.exp(ts[0]),
    "conv": lambda r, ts: nx.causal_conv1d(nx.reshape(ts[0], (1, 3, 4)), ts[5], ts[4]),
    "dropout": lambda r, ts: nx.dropout(ts[0], 0.3, True, np.random.default_rng(r)),
    "transpose_index": lambda r, ts: nx.index(nx.transpose(ts[0], (1, 0)), (slice(1, 3), [0, 2, 2])),
    "embedding": lambda r, ts: nx.embedding(ts[1], np.array([[0, 2], [3, 3]]), padding_idx=None),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_100_seeds(name):
    op = PRIMITIVES[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ts = [T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 5))), T(rng.normal(size=(1, 4))),
              T(rng.normal(size=4)), T(rng.normal(size=4)), T(rng.normal(size=(2, 4)))]
        w = rng.normal(size=op(seed, ts).shape)
        worst = max(worst, check_grads(lambda: nx.sum_(nx.mul(op(seed, ts), w)), ts))
    assert worst < 1e-4, worst


def test_tensor_invariants():
    t = Tensor(np.ones((2, 3)), dtype=np.float32)
    assert t.dtype == np.float32 and t.size == 6
    with pytest.raises(ConfigError):
        Tensor([1], dtype=np.int32)


def test_relative_error_helper():
    assert rel_err([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_embedding_padding_row_gets_no_gradient():
    table = T(np.ones((4, 2)))
    tape = nx.Tape()
    with tape:
        loss = nx.sum_(nx.embedding(table, np.array([[0, 1], [0, 3]])))
    nx.backward(tape, loss)
    np.testing.assert_array_equal(table.grad, [[0, 0], [1, 1], [0, 0], [1, 1]])
