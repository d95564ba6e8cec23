import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, naive_matmul, rel_err
from palora import tensor as T
from palora.tensor import ContractError, DimensionError


def grad_of(build, *inputs):
    tape = T.Tape()
    leaves = [tape.leaf(x) for x in inputs]
    loss = build(*leaves)
    T.backward(tape, loss)
    return [tape.grad(v) for v in leaves]


def value_of(build, *inputs):
    return float(T.value(build(*inputs))[0, 0])


def test_matmul_identity():
    M = np.array([[1.5, -2.0], [0.25, 7.0]])
    assert np.array_equal(T.matmul(np.eye(2), M), M)


def test_matmul_annihilator():
    assert np.array_equal(T.matmul([[1, 2], [3, 4]], [[0], [0]]), np.zeros((2, 1)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert np.max(np.abs(T.matmul(a, b) - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_registers_on_tape(rng):
    tape = T.Tape()
    a = tape.leaf(rng.standard_normal((2, 2)))
    out = T.matmul(a, np.eye(2))
    assert isinstance(out, T.Var)
    assert tape.nodes[out.id].op == "matmul"
    assert isinstance(T.matmul(np.eye(2), np.eye(2)), np.ndarray)


def test_backward_linear_closed_form(rng):
    x = rng.standard_normal((4, 1))
    (gW,) = grad_of(lambda W: T.sum_all(T.matmul(W, x)), rng.standard_normal((3, 4)))
    assert np.allclose(gW, np.repeat(x.T, 3, axis=0), rtol=0, atol=0)


def test_backward_mlp_loss_matches_finite_differences(rng):
    x, y = rng.standard_normal((4, 5)), rng.standard_normal((3, 5))
    W0, b0 = rng.standard_normal((3, 4)), rng.standard_normal((3, 1))

    def build(W, b):
        return T.sum_squares(T.sub(T.relu(T.add_bias(T.matmul(W, x), b)), y))

    gW, gb = grad_of(build, W0, b0)
    fdW = central_difference(lambda W: value_of(build, W, b0), W0)
    fdb = central_difference(lambda b: value_of(build, W0, b), b0)
    assert rel_err(gW, fdW) < 1e-5
    assert rel_err(gb, fdb) < 1e-5


def test_constant_leaf_gets_zero_gradient(rng):
    tape = T.Tape()
    W = tape.leaf(rng.standard_normal((2, 2)))
    c = tape.leaf(rng.standard_normal((2, 2)))
    loss = T.sum_all(W)
    T.backward(tape, loss)
    assert np.array_equal(tape.grad(c), np.zeros((2, 2)))


def test_backward_non_scalar_loss():
    tape = T.Tape()
    W = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ContractError):
        T.backward(tape, T.scale(W, 2.0))


def test_gradient_shapes_match_values(rng):
    tape = T.Tape()
    W = tape.leaf(rng.standard_normal((3, 2)))
    h = T.gelu(T.matmul(W, rng.standard_normal((2, 4))))
    T.backward(tape, T.softmax_cross_entropy(h, [0, 1, 2, 0]))
    for nid, node in enumerate(tape.nodes):
        assert tape.grads[nid].shape == node.value.shape
        assert all(i < nid for i in node.inputs)


def test_relu_values():
    assert np.array_equal(T.relu(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])


@pytest.mark.parametrize("C", [2, 3, 10])
def test_cross_entropy_uniform_logits(C):
    loss = T.softmax_cross_entropy(np.zeros((C, 5)), [0, 1, 0, 1, 1])
    assert loss[0, 0] == pytest.approx(np.log(C), rel=1e-15)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractError):
        T.softmax_cross_entropy(np.zeros((3, 2)), [0, 3])
    with pytest.raises(ContractError):
        T.softmax_cross_entropy(np.zeros((3, 2)), [-1, 0])


def test_elementwise_shape_mismatch():
    for op in (T.add, T.hadamard, T.sub):
        with pytest.raises(DimensionError):
            op(np.ones((2, 2)), np.ones((2, 3)))


def test_gelu_adjoint(rng):
    x0 = rng.uniform(-3, 3, size=(3, 4))
    (g,) = grad_of(lambda x: T.sum_all(T.gelu(x)), x0)
    fd = central_difference(lambda x: value_of(lambda v: T.sum_all(T.gelu(v)), x), x0)
    assert rel_err(g, fd) < 1e-5


def test_non_finite_output_raises():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        T.scale(np.array([[1e308]]), 10.0)


def test_tape_replay_is_deterministic(rng):
    x = rng.standard_normal((4, 6))
    W0 = rng.standard_normal((3, 4))

    def run():
        (g,) = grad_of(lambda W: T.softmax_cross_entropy(T.gelu(T.matmul(W, x)), [0, 1, 2, 0, 1, 2]), W0)
        return g

    assert np.array_equal(run(), run())


small_ints = arrays(np.float64, (3, 3), elements=st.integers(-8, 8).map(float))


@settings(max_examples=50, deadline=None)
@given(small_ints, small_ints)
def test_identity_associativity_exact(A, B):
    I = np.eye(3)
    assert np.array_equal(T.matmul(T.matmul(A, I), B), T.matmul(A, T.matmul(I, B)))
