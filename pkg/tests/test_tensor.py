import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.special import erf

from cdt4rec import tensor as T

from conftest import assert_grads_match, tape_grads


def weighted(out, seed=0):
    """sum(out * R) for a fixed random R, so every output element matters."""
    R = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum_(T.mul(out, R))


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    X = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(T.matmul(np.eye(2), X).data, X)


def test_matmul_hand_sum():
    out = T.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[1.0], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_gradient_of_sum(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert_grads_match(lambda x, y: T.sum_(T.matmul(x, y)), a, b, tol=1e-6)


def test_matmul_batched_gradients(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
    assert_grads_match(lambda x, y: weighted(T.matmul(x, y)), a, b)
    c = rng.standard_normal((2, 4, 3))
    assert_grads_match(lambda x, y: weighted(T.matmul(x, y)), a, c)


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# -- elementwise family ---------------------------------------------------------

@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, lambda x, y: T.div(x, T.add(T.square(y), 1.0))])
def test_binary_gradients_with_broadcast(op, rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
    assert_grads_match(lambda x, y: weighted(op(x, y)), a, b)


@pytest.mark.parametrize("op", [T.neg, T.square, T.gelu, T.softmax, T.log_softmax,
                                lambda x: T.sum_(x, axis=1), lambda x: T.mean(x, axis=0),
                                lambda x: T.reshape(x, (4, 3)), lambda x: T.transpose(x, (1, 0)),
                                T.swap_last, lambda x: T.gather_last(x, np.array([0, 3, 2]))])
def test_unary_gradients(op, rng):
    assert_grads_match(lambda x: weighted(op(x)), rng.standard_normal((3, 4)))


def test_concat_gradient(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
    assert_grads_match(lambda x, y: weighted(T.concat([x, y], axis=1)), a, b)


def test_embedding_gradient_accumulates_repeated_rows(rng):
    table = rng.standard_normal((4, 3))
    idx = np.array([[0, 2], [2, 2]])
    assert_grads_match(lambda w: weighted(T.embedding(w, idx)), table)
    with pytest.raises(IndexError):
        T.embedding(table, np.array([4]))


def test_linear_and_layer_norm_gradients(rng):
    x, W, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    assert_grads_match(lambda x_, W_, b_: weighted(T.linear(x_, W_, b_)), x, W, b)
    g, beta = rng.standard_normal(4), rng.standard_normal(4)
    assert_grads_match(lambda x_, g_, b_: weighted(T.layer_norm(x_, g_, b_, 1e-5)), x, g, beta)


def test_masked_softmax_gradient(rng):
    x = rng.standard_normal((3, 4))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    assert_grads_match(lambda a: weighted(T.softmax_masked(a, mask)), x)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
def test_gelu_gradient_property(x):
    assert_grads_match(lambda a: weighted(T.gelu(a)), x)


# -- softmax_masked -------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_masked(np.zeros(2), np.ones(2, bool)).data, [0.5, 0.5])
    out = T.softmax_masked(np.array([5.0, 9.0]), np.array([True, False])).data
    np.testing.assert_array_equal(out, [1.0, 0.0])
    e = np.exp([1.0, 2.0, 3.0])
    ref = e / e.sum()
    out = T.softmax_masked(np.array([1.0, 2.0, 3.0]), np.ones(3, bool)).data
    np.testing.assert_allclose(out, ref, atol=1e-15)
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_softmax_is_stable_for_large_logits():
    out = T.softmax_masked(np.array([1000.0, 1001.0]), np.ones(2, bool)).data
    np.testing.assert_allclose(out, [1 / (1 + np.e), np.e / (1 + np.e)])


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(ValueError, match="masked"):
        T.softmax_masked(np.zeros((2, 2)), np.array([[True, False], [False, False]]))
    out = T.softmax_masked(np.zeros((2, 2)), np.array([[True, False], [False, False]]), allow_empty=True)
    np.testing.assert_array_equal(out.data, [[1, 0], [0, 0]])


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.integers(0, 2 ** 32 - 1))
def test_softmax_rows_are_probability_vectors(x, seed):
    mask = np.random.default_rng(seed).random(x.shape) < 0.6
    mask[:, 0] = True
    leaf = T.Tensor(x, requires_grad=True)
    with T.GradTape() as tape:
        p = T.softmax_masked(leaf, mask)
        loss = weighted(p, seed)
    tape.backward(loss)
    assert np.all(p.data[~mask] == 0.0)
    assert np.all(leaf.grad[~mask] == 0.0)
    np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-12)


# -- layer_norm -----------------------------------------------------------------

def test_layer_norm_examples(rng):
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_array_equal(T.layer_norm(np.full(3, 2.5), one, zero).data, zero)
    np.testing.assert_allclose(T.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2)).data,
                               [1, -1], atol=1e-5)
    out = T.layer_norm(rng.standard_normal(4), np.ones(4), np.zeros(4), 1e-5).data
    assert abs(out.mean()) < 1e-10
    assert 1 - 1e-3 <= out.var() <= 1 + 1e-3


@given(hnp.arrays(np.float64, st.integers(2, 8), elements=finite), st.floats(-100, 100))
def test_layer_norm_shift_invariance(x, c):
    d = len(x)
    a = T.layer_norm(x, np.ones(d), np.zeros(d)).data
    b = T.layer_norm(x + c, np.ones(d), np.zeros(d)).data
    np.testing.assert_allclose(a, b, atol=1e-10 * max(1.0, abs(c)) / max(np.std(x), 1e-3))


# -- gelu -----------------------------------------------------------------------

def test_gelu_examples():
    assert T.gelu(np.array(0.0)).item() == 0.0
    assert abs(T.gelu(np.array(10.0)).item() - 10.0) < 1e-6
    phi1 = 0.5 * (1 + erf(1 / np.sqrt(2)))
    assert abs(T.gelu(np.array(1.0)).item() - phi1) < 1e-15
    assert abs(T.gelu(np.array(1.0)).item() - 0.841345) < 1e-6


# -- dropout --------------------------------------------------------------------

def test_dropout_identity_cases(rng):
    x = rng.standard_normal(10)
    np.testing.assert_array_equal(T.dropout(x, 0.0, True, rng).data, x)
    np.testing.assert_array_equal(T.dropout(x, 0.5, False, None).data, x)


def test_dropout_monte_carlo_mean():
    out = T.dropout(np.ones(10 ** 5), 0.5, True, np.random.default_rng(7)).data
    assert 0.98 <= out.mean() <= 1.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_rate_validation(rng):
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(ValueError):
            T.dropout(np.ones(3), bad, True, rng)


def test_dropout_deterministic_under_seed():
    a = T.dropout(np.ones(100), 0.3, True, np.random.default_rng(5)).data
    b = T.dropout(np.ones(100), 0.3, True, np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)


def test_dropout_gradient_uses_same_mask():
    x = np.ones(50)
    _, (g,) = tape_grads(lambda a: T.sum_(T.dropout(a, 0.4, True, np.random.default_rng(3))), x)
    out = T.dropout(x, 0.4, True, np.random.default_rng(3)).data
    np.testing.assert_array_equal(g, out)


# -- backward -------------------------------------------------------------------

def test_backward_outer_product(rng):
    W, x = rng.standard_normal((3, 4)), rng.standard_normal((4, 1))
    _, (g,) = tape_grads(lambda w: T.sum_(T.matmul(w, x)), W)
    np.testing.assert_allclose(g, np.outer(np.ones(3), x[:, 0]), rtol=1e-12)
    assert_grads_match(lambda w: T.sum_(T.matmul(w, x)), W, tol=1e-6)


def test_backward_zero_loss_gives_zero_grads(rng):
    _, grads = tape_grads(lambda a, b: T.mul(T.sum_(T.matmul(a, b)), 0.0),
                          rng.standard_normal((2, 3)), rng.standard_normal((3, 2)))
    for g in grads:
        np.testing.assert_array_equal(g, 0.0)


def test_backward_errors(rng):
    w = T.Tensor(rng.standard_normal(3), requires_grad=True)
    with T.GradTape() as tape:
        vec = T.mul(w, 2.0)
        loss = T.sum_(vec)
    with pytest.raises(T.ShapeError):
        tape.backward(vec)
    tape.backward(loss)
    with pytest.raises(T.TapeError, match="stale"):
        tape.backward(loss)
    other = T.GradTape()
    with pytest.raises(T.TapeError):
        other.backward(loss)


def test_tape_reset_allows_reuse(rng):
    w = T.Tensor(np.ones(2), requires_grad=True)
    tape = T.GradTape()
    for _ in range(2):
        tape.reset()
        w.zero_grad()
        with tape:
            loss = T.sum_(T.square(w))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_non_finite_forward_is_an_error():
    with pytest.raises(T.NonFiniteError):
        T.div(np.ones(2), np.zeros(2))


def test_nothing_recorded_outside_tape():
    w = T.Tensor(np.ones(2), requires_grad=True)
    out = T.mul(w, 3.0)
    assert out.is_leaf and not out.requires_grad


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3)), elements=finite))
def test_ops_deterministic(x):
    a = T.layer_norm(T.gelu(x), np.ones(x.shape[-1]), np.zeros(x.shape[-1])).data
    b = T.layer_norm(T.gelu(x), np.ones(x.shape[-1]), np.zeros(x.shape[-1])).data
    assert a.tobytes() == b.tobytes()
