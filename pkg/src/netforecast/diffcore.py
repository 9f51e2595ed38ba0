"""Minimal reverse-mode automatic differentiation over dense 2-D tensors.

Every model equation in :mod:`netforecast.model` is built from the ops in this
module, so gradients are produced by one generic ``backward`` pass instead of
being derived by hand for each layer.

A :class:`Tape` records ops in execution order (define-by-run). A
:class:`Tensor` is a 64-bit 2-D value; when it is attached to a tape it also
carries the id of the node that produced it.

Example:
    >>> tape = Tape()
    >>> x = tape.watch([[1.0, 2.0]])
    >>> loss = mean_all(square(x))
    >>> grads = backward(tape, loss)
    >>> tape.grad(x)
    array([[1., 2.]])
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "DegenerateRowError",
    "EmptyInputError",
    "ContractError",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "one_minus",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "identity",
    "row_softmax_masked",
    "mean_all",
    "sum_all",
    "square",
    "transpose",
    "add_row",
    "slice_rows",
    "row_sum",
    "power",
    "scale_rows",
    "block_matmul",
    "block_pairwise_sum",
    "backward",
    "numerical_gradient",
]


class DimensionError(ValueError):
    """Raised when operand shapes do not agree."""

    pass


class DegenerateRowError(ValueError):
    """Raised when a masked softmax row has no admissible entries."""

    def __init__(self, row: int):
        super().__init__(f"Row {row} of the softmax mask has no true entries")
        self.row = row


class EmptyInputError(ValueError):
    """Raised when a reduction receives a tensor with no elements."""

    pass


class ContractError(ValueError):
    """Raised when an engine-level precondition is violated."""

    pass


ArrayLike = Union["Tensor", np.ndarray, Sequence[Sequence[float]], float]
VJP = Callable[[np.ndarray], Tuple[np.ndarray, ...]]


def _as_matrix(value: object) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"Tensors are 2-D; got an array with shape {arr.shape}")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _is_frozen_matrix(value: object) -> bool:
    return (
        isinstance(value, np.ndarray)
        and value.dtype == np.float64
        and value.ndim == 2
        and not value.flags.writeable
    )


class Tensor:
    """Immutable 2-D float64 value, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: object, tape: Optional["Tape"] = None, node_id: Optional[int] = None) -> None:
        if _is_frozen_matrix(data):
            arr = data  # type: ignore[assignment]
        else:
            arr = _freeze(_as_matrix(data))
        self.data: np.ndarray = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.data.shape[0]), int(self.data.shape[1]))

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the underlying values."""
        return np.array(self.data, copy=True)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)


@dataclass
class _Node:
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    vjp: Optional[VJP]


class Tape:
    """Append-only record of ops; single-owner, rebuilt for every training step."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self.grads: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op: str, inputs: Tuple[int, ...], value: np.ndarray, vjp: Optional[VJP]) -> Tensor:
        node_id = len(self.nodes)
        # op results are fresh arrays owned by the tape
        out = Tensor(_freeze(value) if value.flags.writeable else value, tape=self, node_id=node_id)
        self.nodes.append(_Node(op, inputs, out.data, vjp))
        return out

    def watch(self, value: ArrayLike) -> Tensor:
        """Record a leaf whose gradient is wanted (a parameter or input)."""
        data = value.data if isinstance(value, Tensor) else _as_matrix(value)
        return self._append("leaf", (), data, None)

    def constant(self, value: ArrayLike) -> Tensor:
        """Record a leaf that is treated as data."""
        data = value.data if isinstance(value, Tensor) else _as_matrix(value)
        return self._append("const", (), data, None)

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        ids = []
        for t in inputs:
            if t.tape is not self or t.node_id is None:
                raise ContractError(f"Operand of '{op}' belongs to a different tape")
            ids.append(t.node_id)
        return self._append(op, tuple(ids), value, vjp)

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient accumulated for ``tensor`` by the last :func:`backward` call."""
        if tensor.tape is not self or tensor.node_id is None:
            raise ContractError("Tensor is not attached to this tape")
        if tensor.node_id not in self.grads:
            return np.zeros(tensor.shape)
        return self.grads[tensor.node_id]


def _operands(*values: ArrayLike) -> Tuple[Optional[Tape], List[Tensor]]:
    """Bring operands onto a common tape; untaped values become constants."""
    tape: Optional[Tape] = None
    for v in values:
        if isinstance(v, Tensor) and v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise ContractError("Operands are attached to different tapes")
            tape = v.tape
    out: List[Tensor] = []
    for v in values:
        if isinstance(v, Tensor) and (v.tape is not None or tape is None):
            out.append(v)
        elif tape is not None:
            out.append(tape.constant(v))
        else:
            out.append(Tensor(v))
    return tape, out


def _emit(op: str, tape: Optional[Tape], inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
    if tape is None:
        return Tensor(_freeze(value) if value.flags.writeable else value)
    return tape.record(op, inputs, value, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product ``a @ b`` for ``a`` m×k and ``b`` k×n."""
    tape, (ta, tb) = _operands(a, b)
    if ta.cols != tb.rows:
        raise DimensionError(f"matmul: inner dimensions differ, {ta.shape} @ {tb.shape}")
    av, bv = ta.data, tb.data
    return _emit("matmul", tape, (ta, tb), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    tape, (ta, tb) = _operands(a, b)
    _same_shape("add", ta, tb)
    return _emit("add", tape, (ta, tb), ta.data + tb.data, lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    tape, (ta, tb) = _operands(a, b)
    _same_shape("sub", ta, tb)
    return _emit("sub", tape, (ta, tb), ta.data - tb.data, lambda g: (g, -g))


def hadamard(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Entrywise product."""
    tape, (ta, tb) = _operands(a, b)
    _same_shape("hadamard", ta, tb)
    av, bv = ta.data, tb.data
    return _emit("hadamard", tape, (ta, tb), av * bv, lambda g: (g * bv, g * av))


def scale(x: ArrayLike, factor: float) -> Tensor:
    tape, (tx,) = _operands(x)
    c = float(factor)
    return _emit("scale", tape, (tx,), tx.data * c, lambda g: (g * c,))


def one_minus(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    return _emit("one_minus", tape, (tx,), 1.0 - tx.data, lambda g: (-g,))


def sigmoid(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    # tanh form is overflow-free and gives exactly 0.5 at 0
    s = 0.5 * (1.0 + np.tanh(0.5 * tx.data))
    return _emit("sigmoid", tape, (tx,), s, lambda g: (g * s * (1.0 - s),))


def tanh(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    t = np.tanh(tx.data)
    return _emit("tanh", tape, (tx,), t, lambda g: (g * (1.0 - t * t),))


def relu(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    # relu'(0) = 0
    on = tx.data > 0.0
    return _emit("relu", tape, (tx,), np.where(on, tx.data, 0.0), lambda g: (g * on,))


def leaky_relu(x: ArrayLike, slope: float = 0.2) -> Tensor:
    tape, (tx,) = _operands(x)
    factor = np.where(tx.data > 0.0, 1.0, float(slope))
    return _emit("leaky_relu", tape, (tx,), tx.data * factor, lambda g: (g * factor,))


def identity(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    return _emit("identity", tape, (tx,), tx.data.copy(), lambda g: (g,))


def row_softmax_masked(x: ArrayLike, mask: np.ndarray) -> Tensor:
    """Softmax over the ``True`` entries of each row; masked entries are exactly 0."""
    tape, (tx,) = _operands(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != tx.shape:
        raise DimensionError(f"row_softmax_masked: mask shape {m.shape} does not match {tx.shape}")
    empty = np.flatnonzero(~m.any(axis=1))
    if empty.size:
        raise DegenerateRowError(int(empty[0]))
    z = np.where(m, tx.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(z), 0.0)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit("row_softmax_masked", tape, (tx,), s, vjp)


def _nonempty(op: str, t: Tensor) -> None:
    if t.data.size == 0:
        raise EmptyInputError(f"{op}: input tensor {t.shape} is empty")


def mean_all(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    _nonempty("mean_all", tx)
    shape, n = tx.shape, tx.data.size
    return _emit(
        "mean_all", tape, (tx,), np.array([[tx.data.mean()]]), lambda g: (np.full(shape, g[0, 0] / n),)
    )


def sum_all(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    _nonempty("sum_all", tx)
    shape = tx.shape
    return _emit("sum_all", tape, (tx,), np.array([[tx.data.sum()]]), lambda g: (np.full(shape, g[0, 0]),))


def square(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    xv = tx.data
    return _emit("square", tape, (tx,), xv * xv, lambda g: (2.0 * g * xv,))


def transpose(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    return _emit("transpose", tape, (tx,), tx.data.T.copy(), lambda g: (g.T,))


def add_row(x: ArrayLike, bias: ArrayLike) -> Tensor:
    """Add a 1×n row vector to every row of an m×n tensor."""
    tape, (tx, tb) = _operands(x, bias)
    if tb.rows != 1 or tb.cols != tx.cols:
        raise DimensionError(f"add_row: bias {tb.shape} does not fit {tx.shape}")
    return _emit("add_row", tape, (tx, tb), tx.data + tb.data, lambda g: (g, g.sum(axis=0, keepdims=True)))


def slice_rows(x: ArrayLike, start: int, stop: int) -> Tensor:
    tape, (tx,) = _operands(x)
    if not 0 <= start < stop <= tx.rows:
        raise DimensionError(f"slice_rows: [{start}, {stop}) outside {tx.rows} rows")
    shape = tx.shape

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit("slice_rows", tape, (tx,), tx.data[start:stop].copy(), vjp)


def row_sum(x: ArrayLike) -> Tensor:
    tape, (tx,) = _operands(x)
    cols = tx.cols
    return _emit("row_sum", tape, (tx,), tx.data.sum(axis=1, keepdims=True), lambda g: (np.repeat(g, cols, axis=1),))


def power(x: ArrayLike, exponent: float) -> Tensor:
    """Entrywise power for strictly positive inputs."""
    tape, (tx,) = _operands(x)
    if np.any(tx.data <= 0.0):
        raise ContractError("power: inputs must be strictly positive")
    p = float(exponent)
    xv = tx.data
    return _emit("power", tape, (tx,), xv**p, lambda g: (g * p * xv ** (p - 1.0),))


def scale_rows(x: ArrayLike, factors: ArrayLike) -> Tensor:
    """Multiply row ``i`` of ``x`` by ``factors[i]`` (an m×1 column)."""
    tape, (tx, tf) = _operands(x, factors)
    if tf.shape != (tx.rows, 1):
        raise DimensionError(f"scale_rows: factors {tf.shape} do not fit {tx.shape}")
    xv, fv = tx.data, tf.data
    return _emit("scale_rows", tape, (tx, tf), xv * fv, lambda g: (g * fv, (g * xv).sum(axis=1, keepdims=True)))


def block_matmul(a: ArrayLike, x: ArrayLike) -> Tensor:
    """Multiply row blocks of ``x`` by square blocks stacked in ``a``.

    ``a`` stacks K blocks of n×n row-wise, shape (K·n)×n. ``x`` has R·n rows
    with R a multiple of K; row block ``r`` of the output is
    ``A[r mod K] @ X[r]``. With K = R = 1 this is a plain matmul.
    """
    tape, (ta, tx) = _operands(a, x)
    n = ta.cols
    if n == 0 or ta.rows % n:
        raise DimensionError(f"block_matmul: {ta.shape} is not a stack of square blocks")
    k = ta.rows // n
    if tx.rows % (k * n):
        raise DimensionError(f"block_matmul: {tx.shape} rows do not tile {k} blocks of {n}")
    q = tx.rows // (k * n)
    f = tx.cols
    av = ta.data.reshape(k, n, n)
    xv = tx.data.reshape(q, k, n, f)
    out = np.einsum("kij,qkjf->qkif", av, xv).reshape(tx.rows, f)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        gv = g.reshape(q, k, n, f)
        da = np.einsum("qkif,qkjf->kij", gv, xv).reshape(k * n, n)
        dx = np.einsum("kji,qkjf->qkif", av, gv).reshape(tx.rows, f)
        return da, dx

    return _emit("block_matmul", tape, (ta, tx), out, vjp)


def block_pairwise_sum(u: ArrayLike, v: ArrayLike, block: int) -> Tensor:
    """Within each block of ``block`` rows, ``out[r*n + i, j] = u[r*n + i] + v[r*n + j]``.

    ``u`` and ``v`` are (R·n)×1 columns; the result stacks R blocks of n×n.
    """
    tape, (tu, tv) = _operands(u, v)
    n = int(block)
    if tu.cols != 1 or tv.cols != 1 or tu.rows != tv.rows:
        raise DimensionError(f"block_pairwise_sum: expected equal columns, got {tu.shape} and {tv.shape}")
    if n < 1 or tu.rows % n:
        raise DimensionError(f"block_pairwise_sum: {tu.rows} rows do not split into blocks of {n}")
    r = tu.rows // n
    out = (tu.data.reshape(r, n, 1) + tv.data.reshape(r, 1, n)).reshape(r * n, n)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        gv = g.reshape(r, n, n)
        return g.sum(axis=1, keepdims=True), gv.sum(axis=1).reshape(-1, 1)

    return _emit("block_pairwise_sum", tape, (tu, tv), out, vjp)


def backward(tape: Tape, root: Tensor) -> Dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) for every node that ``root`` depends on.

    Args:
        tape: The tape that recorded ``root``.
        root: A 1×1 tensor on ``tape``.

    Returns:
        Mapping of node id to gradient; also stored on ``tape.grads``.

    Raises:
        ContractError: If ``root`` is not scalar or not on ``tape``.
    """
    if root.tape is not tape or root.node_id is None:
        raise ContractError("backward: root is not attached to this tape")
    if root.shape != (1, 1):
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")

    grads: Dict[int, np.ndarray] = {root.node_id: np.ones((1, 1))}
    for node_id in range(root.node_id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.vjp is None:
            continue
        for input_id, part in zip(node.inputs, node.vjp(g)):
            if input_id in grads:
                grads[input_id] = grads[input_id] + part
            else:
                grads[input_id] = part
    tape.grads = grads
    logger.debug(f"backward: {len(grads)} of {len(tape.nodes)} nodes reached from node {root.node_id}")
    return grads


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` at ``x``."""
    base = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + step
        plus = fn(base.copy())
        base[idx] = orig - step
        minus = fn(base.copy())
        base[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * step)
    return grad
