import zlib

import numpy as np
import pytest

from netforecast import diffcore as dc
from netforecast.diffcore import (
    ContractError,
    DegenerateRowError,
    DimensionError,
    EmptyInputError,
    Tape,
    Tensor,
    backward,
    numerical_gradient,
)


def test_matmul_examples():
    assert np.array_equal(dc.matmul([[1, 2], [3, 4]], [[1, 0], [0, 1]]).data, [[1, 2], [3, 4]])
    assert dc.matmul([[1, 2]], [[3], [4]]).item() == 11.0


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, size=(3, 2))
    b = rng.uniform(-1, 1, size=(2, 4))
    tape = Tape()
    ta, tb = tape.watch(a), tape.watch(b)
    backward(tape, dc.sum_all(dc.matmul(ta, tb)))
    numeric = numerical_gradient(lambda v: dc.sum_all(dc.matmul(v, b)).item(), a)
    rel = np.abs(tape.grad(ta) - numeric).max() / np.abs(numeric).max()
    assert rel < 1e-5
    # dB = A^T G with G = ones
    assert np.allclose(tape.grad(tb), a.T @ np.ones((3, 4)))


def test_elementwise_examples():
    assert np.array_equal(dc.hadamard([[2, 3]], [[4, 5]]).data, [[8, 15]])
    assert np.array_equal(dc.one_minus(np.zeros((2, 2))).data, np.ones((2, 2)))
    x = np.array([[1.5, -2.0]])
    assert np.array_equal(dc.add(x, np.zeros((1, 2))).data, x)
    assert np.array_equal(dc.sub([[3.0]], [[1.0]]).data, [[2.0]])
    assert np.array_equal(dc.scale([[1.0, 2.0]], 3.0).data, [[3.0, 6.0]])


@pytest.mark.parametrize("op", [dc.add, dc.sub, dc.hadamard])
def test_elementwise_shape_mismatch(op):
    with pytest.raises(DimensionError):
        op(np.ones((2, 2)), np.ones((2, 3)))


def test_activation_values():
    assert dc.sigmoid([[0.0]]).item() == 0.5
    assert dc.tanh([[0.0]]).item() == 0.0
    assert dc.relu([[-1.0]]).item() == 0.0
    tape = Tape()
    x = tape.watch([[0.0]])
    backward(tape, dc.sum_all(dc.sigmoid(x)))
    assert tape.grad(x)[0, 0] == 0.25


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    x = tape.watch([[0.0, 1.0, -1.0]])
    backward(tape, dc.sum_all(dc.relu(x)))
    assert np.array_equal(tape.grad(x), [[0.0, 1.0, 0.0]])


def test_sigmoid_is_finite_for_large_inputs():
    out = dc.sigmoid([[-1000.0, 1000.0]]).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0


def test_row_softmax_examples():
    assert np.allclose(dc.row_softmax_masked([[0.0, 0.0]], np.ones((1, 2), bool)).data, [[0.5, 0.5]])
    out = dc.row_softmax_masked([[4.0, 100.0]], np.array([[True, False]])).data
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0
    row = np.array([1.0, 2.0, 3.0])
    expected = np.exp(row) / np.exp(row).sum()
    assert np.allclose(dc.row_softmax_masked([row], np.ones((1, 3), bool)).data[0], expected, rtol=0, atol=1e-15)


def test_row_softmax_rows_are_stochastic_and_zero_where_masked():
    rng = np.random.default_rng(3)
    x = rng.normal(scale=5.0, size=(6, 6))
    mask = rng.random((6, 6)) < 0.5
    mask[np.arange(6), np.arange(6)] = True
    out = dc.row_softmax_masked(x, mask).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(out[~mask] == 0.0)


def test_row_softmax_fully_masked_row_names_row():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(DegenerateRowError) as exc:
        dc.row_softmax_masked(np.zeros((2, 2)), mask)
    assert exc.value.row == 1


def test_reductions():
    assert dc.mean_all([[1.0, 3.0]]).item() == 2.0
    assert dc.sum_all(np.zeros((2, 3))).item() == 0.0
    tape = Tape()
    x = tape.watch(np.arange(6.0).reshape(2, 3))
    backward(tape, dc.mean_all(x))
    assert np.allclose(tape.grad(x), 1.0 / 6.0)


@pytest.mark.parametrize("op", [dc.mean_all, dc.sum_all])
def test_reductions_reject_empty(op):
    with pytest.raises(EmptyInputError):
        op(np.zeros((0, 3)))


def test_backward_single_node_and_composite():
    tape = Tape()
    x = tape.watch([[3.0]])
    backward(tape, x)
    assert np.array_equal(tape.grad(x), [[1.0]])

    tape = Tape()
    values = np.array([[1.0, -2.0], [0.5, 4.0]])
    x = tape.watch(values)
    backward(tape, dc.mean_all(dc.square(x)))
    assert np.allclose(tape.grad(x), 2.0 * values / values.size)


def test_backward_requires_scalar_root():
    tape = Tape()
    x = tape.watch(np.ones((2, 2)))
    with pytest.raises(ContractError):
        backward(tape, dc.square(x))


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))

    def run():
        tape = Tape()
        ta, tb = tape.watch(a), tape.watch(b)
        loss = dc.mean_all(dc.square(dc.tanh(dc.matmul(ta, tb))))
        backward(tape, loss)
        return loss.item(), tape.grad(ta), tape.grad(tb)

    first, second = run(), run()
    assert first[0] == second[0]
    assert np.array_equal(first[1], second[1]) and np.array_equal(first[2], second[2])


def test_tape_records_inputs_before_outputs():
    tape = Tape()
    x = tape.watch(np.ones((2, 2)))
    y = dc.tanh(dc.matmul(x, np.eye(2)))
    backward(tape, dc.sum_all(y))
    for node_id, node in enumerate(tape.nodes):
        assert all(i < node_id for i in node.inputs)
    assert tape.grad(x).shape == (2, 2)


def test_shared_subexpression_accumulates():
    tape = Tape()
    x = tape.watch([[2.0]])
    backward(tape, dc.sum_all(dc.hadamard(x, x)))
    assert tape.grad(x)[0, 0] == 4.0


def test_operands_on_different_tapes_are_rejected():
    a = Tape().watch([[1.0]])
    b = Tape().watch([[1.0]])
    with pytest.raises(ContractError):
        dc.add(a, b)


def test_tensor_values_are_immutable_copies():
    source = np.array([[1.0, 2.0]])
    t = Tensor(source)
    source[0, 0] = 99.0
    assert t.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0


def test_operator_sugar():
    a = Tensor([[1.0, 2.0]])
    assert np.array_equal((a + a).data, [[2.0, 4.0]])
    assert np.array_equal((a * 2.0).data, [[2.0, 4.0]])
    assert (a @ Tensor([[1.0], [1.0]])).item() == 3.0


RNG = np.random.default_rng(11)
MASK = RNG.random((4, 4)) < 0.6
MASK[np.arange(4), np.arange(4)] = True


@pytest.mark.parametrize(
    "name,op,shape",
    [
        ("sigmoid", dc.sigmoid, (2, 3)),
        ("tanh", dc.tanh, (2, 3)),
        ("relu", dc.relu, (3, 3)),
        ("leaky_relu", lambda x: dc.leaky_relu(x, 0.2), (3, 3)),
        ("square", dc.square, (2, 2)),
        ("transpose", dc.transpose, (2, 3)),
        ("one_minus", dc.one_minus, (2, 2)),
        ("scale", lambda x: dc.scale(x, -1.5), (2, 2)),
        ("row_softmax", lambda x: dc.row_softmax_masked(x, MASK), (4, 4)),
        ("row_sum", dc.row_sum, (3, 4)),
        ("slice_rows", lambda x: dc.slice_rows(x, 1, 3), (4, 2)),
        ("add_row_left", lambda x: dc.add_row(x, [[0.5, -0.5]]), (3, 2)),
        ("add_row_bias", lambda b: dc.add_row(np.ones((3, 2)), b), (1, 2)),
        ("scale_rows_left", lambda x: dc.scale_rows(x, [[2.0], [-1.0]]), (2, 3)),
        ("scale_rows_factors", lambda f: dc.scale_rows(np.arange(6.0).reshape(2, 3), f), (2, 1)),
        ("block_matmul_blocks", lambda a: dc.block_matmul(a, np.arange(24.0).reshape(12, 2) / 10), (6, 3)),
        ("block_matmul_rows", lambda x: dc.block_matmul(np.arange(18.0).reshape(6, 3) / 10, x), (12, 2)),
        ("pairwise_u", lambda u: dc.block_pairwise_sum(u, np.arange(6.0).reshape(6, 1), 3), (6, 1)),
        ("pairwise_v", lambda v: dc.block_pairwise_sum(np.arange(6.0).reshape(6, 1), v, 3), (6, 1)),
    ],
)
def test_op_gradients_match_finite_differences(check_gradient, name, op, shape):
    x = np.random.default_rng(zlib.crc32(name.encode())).uniform(-1.0, 1.0, size=shape)
    check_gradient(op, x)


def test_power_gradient(check_gradient):
    x = np.random.default_rng(2).uniform(0.5, 1.5, size=(3, 1))
    check_gradient(lambda v: dc.power(v, -0.5), x)


def test_power_rejects_nonpositive():
    with pytest.raises(ContractError):
        dc.power([[0.0]], 0.5)


def test_block_matmul_matches_dense_block_diagonal():
    rng = np.random.default_rng(4)
    blocks = rng.normal(size=(2, 3, 3))
    x = rng.normal(size=(12, 2))  # 4 row blocks cycling over 2 graph blocks
    out = dc.block_matmul(blocks.reshape(6, 3), x).data
    for r in range(4):
        expected = blocks[r % 2] @ x[3 * r : 3 * r + 3]
        assert np.allclose(out[3 * r : 3 * r + 3], expected, rtol=0, atol=1e-14)


def test_block_matmul_rejects_untiled_rows():
    with pytest.raises(DimensionError):
        dc.block_matmul(np.ones((6, 3)), np.ones((9, 1)))


def test_block_pairwise_sum_values():
    u = np.array([[1.0], [2.0], [10.0], [20.0]])
    v = np.array([[0.1], [0.2], [0.3], [0.4]])
    out = dc.block_pairwise_sum(u, v, 2).data
    assert np.allclose(out, [[1.1, 1.2], [2.1, 2.2], [10.3, 10.4], [20.3, 20.4]])
