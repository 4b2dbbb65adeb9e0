import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgru import tensor as T
from sgru.gradcheck import numerical_grad, random_graph, random_graph_errors, relative_error
from sgru.tensor import DimensionError, GradTape, Tensor


def leaf(x):
    return Tensor(x, requires_grad=True)


# ----------------------------------------------------------- forward values

def test_matmul_identity_and_annihilator():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_row_times_column():
    out = T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    assert T.elementwise("sigmoid", 0.0).item() == 0.5
    assert T.elementwise("relu", -1.5).item() == 0.0
    assert T.elementwise("relu", 2.0).item() == 2.0
    assert T.elementwise("hadamard", [1, 2, 3], [4, 5, 6]).data.tolist() == [4, 10, 18]
    with pytest.raises(ValueError):
        T.elementwise("add", [1.0])


def test_broadcast_mismatch_raises():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_softmax_rows_examples():
    assert np.allclose(T.softmax_rows(Tensor([[0, 0, 0]])).data, 1 / 3, atol=0, rtol=1e-15)
    e = math.e
    got = T.softmax_rows(Tensor([[1.0, 0.0]])).data[0]
    assert got == pytest.approx([e / (e + 1), 1 / (e + 1)], abs=1e-12)
    assert got == pytest.approx([0.73106, 0.26894], abs=1e-5)
    row = np.array([[0.3, -1.2, 2.5]])
    assert np.allclose(T.softmax_rows(Tensor(row)).data, T.softmax_rows(Tensor(row + 7.0)).data,
                       atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(T.NumericError):
        T.softmax_rows(Tensor([[np.inf, 0.0]]))


def test_concat_last_contract():
    a, b = leaf(np.ones((4, 3))), leaf(np.ones((4, 3)))
    assert T.concat_last(a, b).shape == (4, 6)
    assert T.concat_last(Tensor([[1]]), Tensor([[2]])).data.tolist() == [[1, 2]]
    T.backward(T.total(T.concat_last(a, b)))
    assert np.array_equal(a.grad, np.ones((4, 3)))
    assert np.array_equal(b.grad, np.ones((4, 3)))
    with pytest.raises(DimensionError):
        T.concat_last(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


# ----------------------------------------------------------------- backward

def test_backward_square():
    w = leaf([3.0])
    T.backward(T.total(w * w))
    assert w.grad.tolist() == [6.0]


def test_backward_sigmoid_at_zero():
    x = leaf(0.0)
    T.backward(T.sigmoid(x) * 1.0)
    assert x.grad == 0.25


def test_backward_accumulates_without_reset():
    w = leaf([3.0])
    T.backward(T.total(w * w))
    T.backward(T.total(w * w))
    assert w.grad.tolist() == [12.0]


def test_backward_requires_scalar_root():
    with pytest.raises(ValueError, match="scalar"):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_broadcast_backward_keeps_parameter_shape():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 4, 3)))
    bias = leaf(np.zeros(3))
    row = leaf(np.zeros((4, 1)))
    T.backward(T.total(x + bias + row))
    assert bias.grad.shape == (3,) and np.all(bias.grad == 20)
    assert row.grad.shape == (4, 1) and np.all(row.grad == 15)


def test_batched_matmul_backward_shapes():
    rng = np.random.default_rng(1)
    a = leaf(rng.normal(size=(3, 3)))
    x = leaf(rng.normal(size=(2, 3, 4)))
    w = leaf(rng.normal(size=(4, 5)))
    T.backward(T.total(T.matmul(T.matmul(a, x), w)))
    assert a.grad.shape == (3, 3) and x.grad.shape == (2, 3, 4) and w.grad.shape == (4, 5)


def test_tape_is_topological_and_visits_each_op_once():
    x = leaf([1.0, 2.0])
    y = T.tanh(x)
    z = y * y + y
    root = T.total(z)
    tape = GradTape(root)
    seqs = [n._seq for n in tape.records]
    assert seqs == sorted(seqs)
    assert len({id(n) for n in tape.records}) == len(tape.records) == 4
    for n in tape.records:
        for p in n._parents:
            assert p._seq < n._seq


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.tanh(x)
    assert not y.requires_grad and y._parents == ()


def test_single_random_graph_fd():
    rng = np.random.default_rng(5)
    params = [leaf(rng.normal(size=())) for _ in range(5)]

    def f():
        a, b, c, d, e = params
        return T.total(T.tanh(a * b + c) * T.sigmoid(d - e) + a * e)

    root = f()
    T.backward(root)
    for p in params:
        num = numerical_grad(lambda: f().item(), p, 1e-5)
        assert relative_error(p.grad, num).max() < 1e-6


# --------------------------------------------------------------- properties

@pytest.mark.parametrize("seed", range(100))
def test_random_graph_gradients(seed):
    assert random_graph_errors(np.random.default_rng(seed)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_softmax_rows_are_distributions(m, n, seed, scale):
    x = np.random.default_rng(seed).normal(size=(m, n)) * scale
    s = T.softmax_rows(Tensor(x)).data
    assert np.all(s >= 0) and np.all(s <= 1)
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-9)


def test_determinism_bitwise():
    def run():
        params, f = random_graph(np.random.default_rng(11))
        out = f()
        T.backward(out)
        return out.data.tobytes(), [p.grad.tobytes() for p in params]
    assert run() == run()
