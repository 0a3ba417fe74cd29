import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from derog.checks import _primitive_cases, check_primitive
from derog.errors import ConfigError, DimensionError, NumericError, UsageError
from derog.tensor import (
    PRIMITIVES,
    Tape,
    Tensor,
    active_tape,
    apply_primitive,
    backward,
    elementwise_mul,
    finite_difference_gradcheck,
    grad_reverse,
    index_rows,
    matmul,
    mean_all,
    no_tape,
    relu,
    row_softmax,
    scalar_mul,
    scatter_sum_rows,
    sigmoid,
    sum_all,
)

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def leaf(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


# --- forward examples ---------------------------------------------------------


def test_matmul_hand_checked():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_sigmoid_at_zero():
    assert sigmoid(Tensor([[0.0]])).data.tolist() == [[0.5]]


def test_row_softmax_symmetric_row():
    np.testing.assert_allclose(row_softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_row_softmax_is_stable_for_large_logits():
    out = row_softmax(Tensor([[1000.0, 0.0], [-1000.0, -1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0], [0.5, 0.5]])


def test_log_clamps_small_inputs():
    out = apply_primitive("log", [Tensor([[0.0, 1e-20, 1.0]])])
    np.testing.assert_allclose(out.data, [[math.log(1e-12), math.log(1e-12), 0.0]])


def test_row_broadcast_add():
    out = apply_primitive("add", [Tensor(np.zeros((3, 2))), Tensor([[1.0, 2.0]])])
    assert out.data.tolist() == [[1.0, 2.0]] * 3


def test_unknown_kind_is_config_error():
    with pytest.raises(ConfigError):
        apply_primitive("conv2d", [Tensor([[1.0]])])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\[2, 3\].*\[2, 3\]"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_index_out_of_range():
    with pytest.raises(DimensionError):
        index_rows(Tensor(np.ones((2, 2))), [0, 2])


def test_closed_primitive_set():
    assert set(PRIMITIVES) == {
        "matmul", "add", "sub", "elementwise_mul", "scalar_mul", "rowwise_concat", "relu", "sigmoid",
        "row_softmax", "log", "exp", "sum_all", "mean_all", "sum_rows", "l1_norm_rows", "index_rows",
        "scatter_sum_rows", "grad_reverse",
    }


# --- recording and backward ---------------------------------------------------


def test_backward_square():
    x = leaf([[1.0, 2.0]])
    with Tape() as tape:
        g = tape.backward(sum_all(elementwise_mul(x, x)))
    assert g[x].tolist() == [[2.0, 4.0]]
    assert x.grad.shape == x.data.shape


def test_backward_grad_reverse_identity():
    x = leaf([[5.0, 7.0]])
    with Tape() as tape:
        g = tape.backward(sum_all(grad_reverse(x, 1.0)))
    assert g[x].tolist() == [[-1.0, -1.0]]


def test_backward_sigmoid_mean_matches_finite_difference():
    x = leaf([[0.0]])
    with Tape() as tape:
        g = tape.backward(mean_all(sigmoid(x)))
    assert g[x][0, 0] == pytest.approx(0.25, abs=1e-15)
    eps = 1e-6
    numeric = (1 / (1 + math.exp(-eps)) - 1 / (1 + math.exp(eps))) / (2 * eps)
    assert g[x][0, 0] == pytest.approx(numeric, rel=1e-9)


def test_gradients_accumulate_over_reuse():
    x = leaf([[3.0]])
    with Tape() as tape:
        y = apply_primitive("add", [x, x])
        g = tape.backward(sum_all(elementwise_mul(y, x)))  # 2x^2
    assert g[x].tolist() == [[12.0]]


def test_leaf_grad_accumulates_across_tapes():
    x = leaf([[1.0, 1.0]])
    for _ in range(2):
        with Tape() as tape:
            tape.backward(sum_all(x))
    assert x.grad.tolist() == [[2.0, 2.0]]


def test_backward_twice_is_usage_error():
    x = leaf([[1.0]])
    with Tape() as tape:
        loss = sum_all(x)
        tape.backward(loss)
        with pytest.raises(UsageError):
            tape.backward(loss)


def test_non_scalar_loss_is_shape_error():
    x = leaf([[1.0, 2.0]])
    with Tape() as tape:
        with pytest.raises(DimensionError):
            tape.backward(relu(x))


def test_module_level_backward_without_tape():
    x = leaf([[1.0]])
    with pytest.raises(UsageError):
        backward(sum_all(x))


def test_nothing_recorded_without_requires_grad_or_tape():
    with Tape() as tape:
        sum_all(Tensor([[1.0]]))
        assert len(tape) == 0
    x = leaf([[1.0]])
    assert sum_all(x).tape_node is None
    with Tape() as tape:
        with no_tape():
            assert active_tape() is None
            sum_all(x)
        assert len(tape) == 0


def test_tape_topological_order():
    x = leaf(np.ones((2, 3)))
    w = leaf(np.ones((3, 2)))
    with Tape() as tape:
        h = relu(matmul(x, w))
        sum_all(scalar_mul(row_softmax(h), 2.0))
        for i, node in enumerate(tape.nodes):
            for t in node.inputs:
                if t.tape_node is not None:
                    assert t.tape_node[1] < i


def test_backward_visits_nodes_in_reverse_order():
    x = leaf([[1.0, -2.0]])
    with Tape() as tape:
        sum_all(sigmoid(relu(x)))
        order = []
        for node in tape.nodes:
            inner = node.vjp
            node.vjp = (lambda f, k: lambda g: (order.append(k), f(g))[1])(inner, node.kind)
        kinds = [n.kind for n in tape.nodes]
        tape.backward(tape.nodes[-1].output)
    assert order == kinds[::-1]


# --- grad_reverse -------------------------------------------------------------


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_grad_reverse_bitwise(lam):
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(4, 3)))
    upstream = rng.normal(size=(4, 3))
    with Tape() as tape:
        out = grad_reverse(x, lam)
        assert np.array_equal(out.data, x.data)
        g = tape.backward(sum_all(elementwise_mul(out, Tensor(upstream))))
    assert np.array_equal(g[x], -lam * upstream)


def test_grad_reverse_examples():
    assert grad_reverse(Tensor([[1.0, 2.0]])).data.tolist() == [[1.0, 2.0]]
    for lam, upstream, want in ((1.0, [[1.0, -2.0]], [[-1.0, 2.0]]), (0.5, [[4.0]], [[-2.0]])):
        x = leaf(np.zeros_like(upstream))
        with Tape() as tape:
            g = tape.backward(sum_all(elementwise_mul(grad_reverse(x, lam), Tensor(upstream))))
        assert g[x].tolist() == want


def test_grad_reverse_rejects_non_finite_lambda():
    with pytest.raises(ConfigError):
        grad_reverse(Tensor([[1.0]]), float("nan"))


# --- gradcheck ----------------------------------------------------------------


@pytest.mark.parametrize("kind", sorted(_primitive_cases(np.random.default_rng(0))))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_primitive_passes_gradcheck(kind, seed):
    row = check_primitive(kind, np.random.default_rng(seed))
    assert row.max_rel_err < 1e-6


def test_gradcheck_square():
    x = leaf([[3.0]])
    err = finite_difference_gradcheck(lambda: sum_all(elementwise_mul(x, x)), [x], 1e-6)
    assert err < 1e-8


def test_gradcheck_constant_function():
    x = leaf([[3.0]])
    assert finite_difference_gradcheck(lambda: sum_all(Tensor([[2.0]])), [x], 1e-6) == 0.0


def test_gradcheck_errors():
    x = leaf([[1.0, 2.0]])
    with pytest.raises(DimensionError):
        finite_difference_gradcheck(lambda: relu(x), [x])
    with pytest.raises(NumericError):
        finite_difference_gradcheck(lambda: sum_all(scalar_mul(x, float("inf"))), [x])


# --- properties ---------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(a):
    out = row_softmax(Tensor(a)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
def test_sigmoid_in_unit_interval(a):
    out = sigmoid(Tensor(a)).data
    assert np.all((out >= 0) & (out <= 1))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_scatter_mean_matches_naive(data):
    n = data.draw(st.integers(1, 12))
    segments = data.draw(st.integers(1, 4))
    index = np.sort(np.array(data.draw(st.lists(st.integers(0, segments - 1), min_size=n, max_size=n))))
    x = data.draw(arrays(np.float64, (n, 3), elements=finite))
    summed = scatter_sum_rows(Tensor(x), index, segments).data
    counts = np.bincount(index, minlength=segments)
    for s in range(segments):
        if counts[s]:
            np.testing.assert_allclose(summed[s] / counts[s], x[index == s].mean(axis=0), atol=1e-12)
        else:
            assert np.all(summed[s] == 0)
