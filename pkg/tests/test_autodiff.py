import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sfa_parser import autodiff as ad
from sfa_parser.autodiff import DimensionError, Tape
from sfa_parser.gradcheck import grad_check, grad_check_many

from conftest import weighted_sum

RNG = np.random.default_rng(1234)
SHAPES = [(2, 3), (4, 1), (3, 5)]


def rand(*shape, scale=1.0):
    return ad.parameter(RNG.normal(scale=scale, size=shape))


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    out = ad.matmul(ad.tensor(np.eye(2)), ad.tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_orthogonal_rows():
    out = ad.matmul(ad.tensor([[1.0, 0.0]]), ad.tensor([[0.0], [5.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


def test_matmul_gradient():
    a, b = rand(3, 4), rand(4, 2)
    errs = grad_check_many(lambda: weighted_sum(ad.matmul(a, b)), [a, b])
    assert max(errs.values()) < 1e-6


# ----------------------------------------------------------------- softmax


def test_softmax_uniform_column():
    out = ad.softmax_over_positions(ad.tensor(np.zeros((3, 1))))
    np.testing.assert_allclose(out.data[:, 0], [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_stabilised():
    out = ad.softmax_over_positions(ad.tensor([[1000.0], [0.0]]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] == pytest.approx(1.0)
    assert out.data[1, 0] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_direct_formula():
    col = np.array([1.0, 2.0, 3.0])
    oracle = np.exp(col) / np.exp(col).sum()
    out = ad.softmax_over_positions(ad.tensor(col[:, None]))
    assert np.max(np.abs(out.data[:, 0] - oracle)) <= 1e-12


def test_softmax_normalises_positions_not_heads():
    e = RNG.normal(size=(5, 3))
    out = ad.softmax_over_positions(ad.tensor(e)).data
    np.testing.assert_allclose(out.sum(axis=0), np.ones(3), atol=1e-12)
    assert not np.allclose(out.sum(axis=1), 1.0)


@pytest.mark.parametrize("shape", SHAPES)
def test_softmax_gradient(shape):
    e = rand(*shape)
    assert grad_check(lambda x: weighted_sum(ad.softmax_over_positions(x)), e) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 4)), elements=st.floats(-30, 30)))
def test_softmax_columns_sum_to_one(e):
    out = ad.softmax_over_positions(ad.tensor(e)).data
    assert np.all(np.abs(out.sum(axis=0) - 1.0) <= 1e-9)
    assert np.all(out >= 0) and np.all(out <= 1)


# ------------------------------------------------------------ max over heads


def test_max_over_heads_single():
    np.testing.assert_array_equal(ad.max_over_heads(ad.tensor([[0.4]])).data, [0.4])


def test_max_over_heads_rows():
    out = ad.max_over_heads(ad.tensor([[0.1, 0.7], [0.5, 0.2]]))
    np.testing.assert_array_equal(out.data, [0.7, 0.5])


def test_max_over_heads_gradient():
    a = rand(4, 3)
    assert grad_check(lambda x: weighted_sum(ad.max_over_heads(x)), a) < 1e-6


def test_max_over_heads_tie_goes_to_lowest_index():
    a = ad.parameter(np.array([[0.3, 0.3, 0.1]]))
    with Tape() as tape:
        out = ad.max_over_heads(a).sum()
        tape.backward(out)
    np.testing.assert_array_equal(a.grad, [[1.0, 0.0, 0.0]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 4)), elements=st.floats(-10, 10)))
def test_max_over_heads_equals_rowwise_max(a):
    out = ad.max_over_heads(ad.tensor(a)).data
    np.testing.assert_array_equal(out, a.max(axis=1))


# ---------------------------------------------------------------- window mean


def naive_window(a, t):
    n = len(a)
    return np.array([sum(a[j + k] if j + k < n else 0.0 for k in range(t)) / t for j in range(n)])


def test_window_mean_identity():
    x = RNG.normal(size=6)
    np.testing.assert_array_equal(ad.window_mean(ad.tensor(x), 1).data, x)


def test_window_mean_zero_padding():
    x = np.array([0.9, 0.0, 0.0, 0.3])
    expected = naive_window(x, 3)
    np.testing.assert_allclose(expected, [0.3, 0.1, 0.1, 0.1], atol=1e-15)
    np.testing.assert_allclose(ad.window_mean(ad.tensor(x), 3).data, expected, atol=1e-15)


@pytest.mark.parametrize("t", [0, -1, 1.5])
def test_window_mean_rejects_bad_window(t):
    with pytest.raises(ValueError):
        ad.window_mean(ad.tensor(np.ones(3)), t)


@pytest.mark.parametrize("n,t", [(6, 3), (2, 3), (5, 2), (1, 1)])
def test_window_mean_gradient(n, t):
    x = rand(n)
    assert grad_check(lambda v: weighted_sum(ad.window_mean(v, t)), x) < 1e-6


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 10), elements=st.floats(-5, 5)),
    st.integers(1, 5),
)
def test_window_mean_matches_loop(x, t):
    np.testing.assert_allclose(ad.window_mean(ad.tensor(x), t).data, naive_window(x, t), atol=1e-12)


def test_window_mean_along_axis():
    x = RNG.normal(size=(2, 5, 3))
    out = ad.window_mean(ad.tensor(x), 2, axis=1).data
    for b in range(2):
        for c in range(3):
            np.testing.assert_allclose(out[b, :, c], naive_window(x[b, :, c], 2), atol=1e-14)


# --------------------------------------------------------- elementwise & misc


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: ad.add(a, b),
        lambda a, b: ad.sub(a, b),
        lambda a, b: ad.mul(a, b),
        lambda a, b: ad.concat([a, b], axis=0),
        lambda a, b: ad.concat([a, b], axis=1),
        lambda a, b: ad.stack([a, b], axis=1),
    ],
    ids=["add", "sub", "ewmul", "concat0", "concat1", "stack"],
)
def test_binary_op_gradients(op, shape):
    a, b = rand(*shape), rand(*shape)
    errs = grad_check_many(lambda: weighted_sum(op(a, b)), [a, b])
    assert max(errs.values()) < 1e-6


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize(
    "op",
    [ad.sigmoid, ad.tanh, ad.exp, ad.log_sigmoid, lambda x: x.T, lambda x: x.reshape(-1), lambda x: x[1:, ::-1]],
    ids=["sigmoid", "tanh", "exp", "log_sigmoid", "transpose", "reshape", "slice"],
)
def test_unary_op_gradients(op, shape):
    x = rand(*shape)
    assert grad_check(lambda v: weighted_sum(op(v)), x) < 1e-6


def test_broadcast_add_gradient():
    a, b = rand(3, 4), rand(4)
    errs = grad_check_many(lambda: weighted_sum(a + b), [a, b])
    assert max(errs.values()) < 1e-6


@pytest.mark.parametrize("shape", [(2, 3, 4), (5, 2), (1, 6)])
def test_affine_gradient(shape):
    x = rand(*shape)
    w, b = rand(shape[-1], 3), rand(3)
    errs = grad_check_many(lambda: weighted_sum(ad.affine(x, w, b)), [x, w, b])
    assert max(errs.values()) < 1e-6


def test_embedding_gather_gradient_accumulates_repeats():
    table = rand(5, 3)
    idx = np.array([1, 3, 1, 0])
    assert grad_check(lambda t: weighted_sum(t[idx]), table) < 1e-6
    assert grad_check(lambda t: weighted_sum(t[idx[:2], idx[2:]]), rand(5, 5)) < 1e-6


@pytest.mark.parametrize(
    "subscripts,shapes",
    [
        ("ij,jk->ik", [(3, 4), (4, 2)]),
        ("ik,ijk->ij", [(4, 4), (4, 4, 4)]),
        ("kj,ijk->ij", [(3, 3), (3, 3, 3)]),
        ("iq,jq,kq->ijk", [(3, 2), (3, 2), (3, 2)]),
        ("ia,acb,jb->ijc", [(3, 4), (4, 2, 4), (3, 4)]),
        ("ij->i", [(3, 5)]),
        ("i,j->ij", [(3,), (4,)]),
    ],
)
def test_einsum_gradients(subscripts, shapes):
    ops = [rand(*s) for s in shapes]
    out = ad.einsum(subscripts, *ops)
    np.testing.assert_allclose(out.data, np.einsum(subscripts, *[o.data for o in ops]), atol=1e-12)
    errs = grad_check_many(lambda: weighted_sum(ad.einsum(subscripts, *ops)), ops)
    assert max(errs.values()) < 1e-6


def test_einsum_size_mismatch():
    with pytest.raises(DimensionError):
        ad.einsum("ij,jk->ik", ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((4, 2))))


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.mul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((3, 2))))


# ------------------------------------------------------------------- dropout


def test_dropout_zero_rate_is_identity():
    x = ad.tensor(RNG.normal(size=(4, 5)))
    assert ad.dropout(x, 0.0, np.random.default_rng(0), train=True) is x


def test_dropout_eval_mode_is_identity():
    x = ad.tensor(RNG.normal(size=(4, 5)))
    assert ad.dropout(x, 0.33, np.random.default_rng(0), train=False) is x


def test_dropout_preserves_mean_and_resamples():
    rng = np.random.default_rng(7)
    x = ad.tensor(np.ones((20, 10)))
    outs = [ad.dropout(x, 0.33, rng, train=True).data for _ in range(1000)]
    ratio = np.mean(outs)
    assert abs(ratio - 1.0) < 0.05
    assert not np.array_equal(outs[0], outs[1])


def test_dropout_gradient_uses_same_mask():
    x = rand(3, 4)
    rng = np.random.default_rng(5)
    with Tape() as tape:
        y = ad.dropout(x, 0.5, rng, train=True)
        tape.backward(y.sum())
    np.testing.assert_array_equal(x.grad, y.data / x.data)


# -------------------------------------------------------------------- losses


def test_cross_entropy_uniform():
    loss = ad.cross_entropy(ad.tensor([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_gradient():
    z = rand(4, 6)
    target = np.array([0, 5, 2, 2])
    assert grad_check(lambda v: ad.cross_entropy(v, target), z) < 1e-6


def test_binary_cross_entropy_matches_formula():
    z = RNG.normal(size=(3, 3))
    y = (RNG.random((3, 3)) > 0.5).astype(float)
    p = 1 / (1 + np.exp(-z))
    oracle = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert ad.binary_cross_entropy(ad.tensor(z), y).item() == pytest.approx(oracle, abs=1e-12)


def test_binary_cross_entropy_gradient():
    z = rand(4, 4, scale=3.0)
    y = (RNG.random((4, 4)) > 0.7).astype(float)
    assert grad_check(lambda v: ad.binary_cross_entropy(v, y), z) < 1e-6


def test_binary_cross_entropy_saturated_is_finite():
    loss = ad.binary_cross_entropy(ad.tensor([[800.0, -800.0]]), [[1.0, 0.0]])
    assert loss.item() == pytest.approx(0.0, abs=1e-300)


# ---------------------------------------------------------------------- LSTM


def naive_lstm(x, w_ih, w_hh, b, mask, reverse):
    """Per-sequence loop without any masking tricks: run only the valid steps."""
    batch, steps, _ = x.shape
    hidden = w_hh.shape[0]
    out = np.zeros((batch, steps, hidden))
    sig = lambda v: 1 / (1 + np.exp(-v))
    for s in range(batch):
        length = int(mask[s].sum())
        h = np.zeros(hidden)
        c = np.zeros(hidden)
        order = range(length - 1, -1, -1) if reverse else range(length)
        for t in order:
            z = x[s, t] @ w_ih + h @ w_hh + b
            i, f, g, o = sig(z[:hidden]), sig(z[hidden:2 * hidden]), np.tanh(z[2 * hidden:3 * hidden]), sig(z[3 * hidden:])
            c = f * c + i * g
            h = o * np.tanh(c)
            out[s, t] = h
        if not reverse:
            out[s, length:] = h
    return out


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_matches_loop_with_padding(reverse):
    x, w_ih, w_hh, b = RNG.normal(size=(3, 5, 4)), RNG.normal(size=(4, 8)), RNG.normal(size=(2, 8)), RNG.normal(size=8)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0], [1, 0, 0, 0, 0]], dtype=float)
    out = ad.lstm(ad.tensor(x), ad.tensor(w_ih), ad.tensor(w_hh), ad.tensor(b), mask=mask, reverse=reverse).data
    oracle = naive_lstm(x, w_ih, w_hh, b, mask, reverse)
    valid = mask.astype(bool)
    np.testing.assert_allclose(out[valid], oracle[valid], atol=1e-12)
    if not reverse:
        np.testing.assert_allclose(out[:, -1], oracle[:, -1], atol=1e-12)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_gradient(reverse):
    x, w_ih, w_hh, b = rand(2, 4, 3), rand(3, 8), rand(2, 8), rand(8)
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=float)
    errs = grad_check_many(lambda: weighted_sum(ad.lstm(x, w_ih, w_hh, b, mask=mask, reverse=reverse)), [x, w_ih, w_hh, b])
    assert max(errs.values()) < 1e-6


# -------------------------------------------------------------- grad_check


def test_grad_check_linear_function():
    x = rand(3, 2)
    assert grad_check(lambda v: v.sum(), x) == pytest.approx(0.0, abs=1e-9)


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ValueError):
        grad_check(lambda v: v * 2.0, rand(2, 2))


def test_dead_parameters_report_zero():
    x, dead = rand(3), rand(3)
    errs = grad_check_many(lambda: weighted_sum(ad.tanh(x)), [x, dead])
    assert errs["1"] == 0.0
    np.testing.assert_array_equal(dead.grad, np.zeros(3))


def test_unreachable_leaf_grad_stays_zero():
    x, y = rand(2, 2), rand(2, 2)
    with Tape() as tape:
        used = (x * 2.0).sum()
        _ = (y * 3.0).sum()
        tape.backward(used)
    np.testing.assert_array_equal(y.grad, np.zeros((2, 2)))
    assert y.grad.shape == y.shape


def test_backward_is_deterministic():
    e = RNG.normal(size=(6, 4))
    grads = []
    for _ in range(2):
        x = ad.parameter(e.copy())
        with Tape() as tape:
            out = weighted_sum(ad.window_mean(ad.max_over_heads(ad.softmax_over_positions(x)), 3))
            tape.backward(out)
        grads.append(x.grad.tobytes())
    assert grads[0] == grads[1]


def test_tape_is_topological_and_visits_once():
    x = rand(2, 2)
    calls = []
    with Tape() as tape:
        y = ad.tanh(x)
        z = y * y
        out = z.sum()
        for node in tape.nodes:
            assert all(p._node_id < node._node_id for p in node._parents if p._tape is tape)
            original = node._backward
            node._backward = (lambda f, nid: (lambda g: (calls.append(nid), f(g))))(original, node._node_id)
        tape.backward(out)
    assert sorted(calls) == sorted(set(calls)) == list(range(len(tape.nodes)))


def test_no_recording_outside_tape():
    x = rand(2)
    y = ad.tanh(x)
    assert y._tape is None and not y.requires_grad


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.longdouble])
def test_reductions_keep_dtype(dtype):
    x = ad.tensor(np.ones((3, 2)), dtype)
    assert x.sum().dtype == dtype
    assert x.mean().dtype == dtype
    assert ad.binary_cross_entropy(x, np.ones((3, 2))).dtype == dtype
