"""
Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records every operation applied to tracked tensors. Tensors that do
not belong to a tape are constants: operations on them are evaluated eagerly
and nothing is recorded, which is how the inference paths run.

Negative infinity is stored as NEG_INF, the most negative finite float64,
so that exp() gives exactly zero without NaN propagation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from .errors import ContractError, DegenerateDistributionError, ShapeError

NEG_INF: float = float(np.finfo(np.float64).min)

Array = npt.NDArray[np.float64]
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]
Scalar = Union[int, float]


def _as_float_array(data: object) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if np.isneginf(arr).any():
        arr = np.where(np.isneginf(arr), NEG_INF, arr)
    return arr


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    backward: Optional[BackwardFn]  # None for leaves


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data: object, tape: Optional[Tape] = None, node_id: Optional[int] = None) -> None:
        self.data: Array = _as_float_array(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def __add__(self, other: Union[Tensor, Scalar]) -> Tensor:
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other: Union[Tensor, Scalar]) -> Tensor:
        if isinstance(other, Tensor):
            return subtract(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other: Union[Tensor, Scalar]) -> Tensor:
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        tracked = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"


class Tape:
    """Append-only record of operations; node inputs always precede the node."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.grads: dict[int, Array] = {}
        self._watched: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, array: Array) -> Tensor:
        """Leaf tensor sharing storage with a parameter array; one leaf per array."""
        leaf = self._watched.get(id(array))
        if leaf is None or leaf.data is not array:
            if array.dtype != np.float64:
                raise ContractError("parameters must be float64 arrays")
            node_id = self._append(Node("leaf", (), tuple(array.shape), None))
            leaf = Tensor.__new__(Tensor)
            leaf.data = array
            leaf.tape = self
            leaf.node_id = node_id
            self._watched[id(array)] = leaf
        return leaf

    def record(self, op: str, value: Array, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        ids = tuple(t.node_id if (t.tape is self and t.node_id is not None) else -1 for t in inputs)
        node_id = self._append(Node(op, ids, tuple(value.shape), backward))
        return Tensor(value, self, node_id)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, loss: Tensor) -> dict[int, Array]:
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, Array] = {loss.node_id: np.ones_like(loss.data)}
        for idx in range(loss.node_id, -1, -1):
            g = grads.get(idx)
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if inp < 0 or ig is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = ig if prev is None else prev + ig
        self.grads = grads
        return grads

    def gradient(self, of: Union[Tensor, Array]) -> Array:
        """Gradient buffer of a tracked tensor or watched parameter; zeros if unreachable."""
        if isinstance(of, Tensor):
            tensor: Optional[Tensor] = of
            shape = of.shape
        else:
            tensor = self._watched.get(id(of))
            shape = tuple(of.shape)
        if tensor is None or tensor.node_id is None or tensor.tape is not self:
            return np.zeros(shape)
        g = self.grads.get(tensor.node_id)
        return np.zeros(shape) if g is None else g


def backward(tape: Tape, loss: Tensor) -> dict[int, Array]:
    return tape.backward(loss)


def constant(data: object) -> Tensor:
    return Tensor(data)


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape: Optional[Tape] = None
    for t in inputs:
        if t.tape is not None and t.node_id is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors from different tapes cannot be combined")
            tape = t.tape
    return tape


def _result(op: str, value: Array, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(op, value, inputs, backward_fn)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data

    def grad(g: Array) -> Sequence[Optional[Array]]:
        return g @ bv.T, av.T @ g

    return _result("matmul", av @ bv, (a, b), grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a row vector added to every row of a matrix."""
    if a.shape == b.shape:
        return _result("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _result("add_row", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("subtract", a, b)
    return _result("subtract", a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)
    av, bv = a.data, b.data
    return _result("multiply", av * bv, (a, b), lambda g: (g * bv, g * av))


def divide(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("divide", a, b)
    av, bv = a.data, b.data
    return _result("divide", av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def scale(x: Tensor, factor: float) -> Tensor:
    return _result("scale", x.data * factor, (x,), lambda g: (g * factor,))


def add_scalar(x: Tensor, value: float) -> Tensor:
    return _result("add_scalar", x.data + value, (x,), lambda g: (g,))


def reciprocal(x: Tensor) -> Tensor:
    value = 1.0 / x.data
    return _result("reciprocal", value, (x,), lambda g: (-g * value * value,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _result("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        value = np.exp(x.data)
    return _result("exp", value, (x,), lambda g: (g * value,))


def log(x: Tensor) -> Tensor:
    xv = x.data
    with np.errstate(divide="ignore"):
        value = np.maximum(np.log(xv), NEG_INF)

    def grad(g: Array) -> Sequence[Optional[Array]]:
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(xv > 0, g / np.where(xv > 0, xv, 1.0), 0.0),)

    return _result("log", value, (x,), grad)


def sqrt(x: Tensor) -> Tensor:
    value = np.sqrt(x.data)

    def grad(g: Array) -> Sequence[Optional[Array]]:
        # subgradient 0 at the origin
        safe = np.where(value > 0, value, 1.0)
        return (np.where(value > 0, g / (2.0 * safe), 0.0),)

    return _result("sqrt", value, (x,), grad)


def maximum(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """Elementwise max. Ties route the gradient to `a` for two tensors and to
    the constant when `b` is a number."""
    if not isinstance(b, Tensor):
        bound = float(b)
        wins = a.data > bound
        return _result("maximum_const", np.where(wins, a.data, bound), (a,), lambda g: (g * wins,))
    _same_shape("maximum", a, b)
    a_wins = a.data >= b.data
    return _result(
        "maximum", np.where(a_wins, a.data, b.data), (a, b),
        lambda g: (g * a_wins, g * ~a_wins),
    )


def masked_fill(x: Tensor, mask: Union[Tensor, npt.ArrayLike], value: float) -> Tensor:
    mask_arr = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if mask_arr.shape != x.shape:
        raise ShapeError(f"masked_fill: mask shape {mask_arr.shape} differs from {x.shape}")
    fill = NEG_INF if value == -np.inf else float(value)
    keep = ~mask_arr
    return _result("masked_fill", np.where(mask_arr, fill, x.data), (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------
# Indexing, reshaping, reductions
# ----------------------------------------------------------------------

def gather(x: Tensor, index: npt.ArrayLike) -> Tensor:
    """Picks x[r, index[r]] for every row r of a matrix."""
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather: index shape {idx.shape} does not fit {x.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def grad(g: Array) -> Sequence[Optional[Array]]:
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _result("gather", x.data[rows, idx], (x,), grad)


def index_select(x: Tensor, indices: npt.ArrayLike) -> Tensor:
    """Selects entries along the last axis (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def grad(g: Array) -> Sequence[Optional[Array]]:
        out = np.zeros((shape[-1],) + shape[:-1])
        np.add.at(out, idx, np.moveaxis(g, -1, 0))
        return (np.moveaxis(out, 0, -1),)

    return _result("index_select", x.data[..., idx], (x,), grad)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def grad(g: Array) -> Sequence[Optional[Array]]:
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _result("slice", x.data[..., start:stop], (x,), grad)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {original} as {shape}") from exc
    return _result("reshape", value, (x,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g: Array) -> Sequence[Optional[Array]]:
        return np.split(g, bounds, axis=axis)

    return _result("concat", value, tuple(tensors), grad)


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _result("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    ax = axis % len(shape)

    def grad(g: Array) -> Sequence[Optional[Array]]:
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result("sum", x.data.sum(axis=ax), (x,), grad)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / count)


# ----------------------------------------------------------------------
# Categorical distributions
# ----------------------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xv = x.data
    if xv.shape[axis] < 1:
        raise ShapeError("log_softmax: empty axis")
    peak = xv.max(axis=axis, keepdims=True)
    if (peak <= NEG_INF).any():
        raise DegenerateDistributionError("log_softmax: a row has every entry masked")
    shifted = xv - peak
    with np.errstate(under="ignore"):
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = np.maximum(shifted - lse, NEG_INF)
    probs = np.exp(value)

    def grad(g: Array) -> Sequence[Optional[Array]]:
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", value, (x,), grad)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))
