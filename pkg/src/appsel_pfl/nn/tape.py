"""Reverse-mode differentiation over a small, fixed operation set.

Tensors are thin wrappers around float64 numpy arrays. An operation whose
inputs live on a :class:`Tape` records itself there; tensors that are not on
any tape are constants. ``Tape.backward`` walks the recorded nodes in reverse
and returns gradients for every watched leaf.

    with Tape() as tape:
        w = tape.watch(np.array([[3.0]]), "w")
        loss = mse_loss(matmul(w, w), np.zeros((1, 1)))
    grads = tape.backward(loss)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: Tape | None = None, index: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        where = f" @node{self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    value: np.ndarray
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    name: str | None = None


@dataclass(eq=False)
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[str, int] = field(default_factory=dict)

    def __enter__(self) -> Tape:
        return self

    def __exit__(self, *exc: Any) -> None:
        return None

    def watch(self, value, name: str) -> Tensor:
        """Register ``value`` as a differentiable leaf called ``name``."""
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already watched")
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), arr, None, name))
        self.leaves[name] = len(self.nodes) - 1
        return Tensor(arr, self, len(self.nodes) - 1)

    def record(self, op, inputs, value, backward) -> Tensor:
        self.nodes.append(_Node(op, inputs, value, backward))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to every watched leaf.

    Leaves the loss does not depend on get zero arrays.
    """
    if loss.tape is not tape or loss.index is None:
        raise ContractError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.data)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.backward is None:
            continue
        for src, gi in zip(node.inputs, node.backward(g)):
            if src is None or gi is None:
                continue
            grads[src] = gi if grads[src] is None else grads[src] + gi

    out = {}
    for name, idx in tape.leaves.items():
        g = grads[idx] if idx < len(grads) else None
        out[name] = np.zeros_like(tape.nodes[idx].value) if g is None else g
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, args: tuple[Tensor, ...], value: np.ndarray, bwd) -> Tensor:
    tapes = {a.tape for a in args if a.tape is not None}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise ContractError(f"{op}: inputs recorded on different tapes")
    (tape,) = tapes
    inputs = tuple(a.index if a.tape is tape else None for a in args)
    return tape.record(op, inputs, value, bwd)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return value


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    out = _check_finite("matmul", A @ B)
    return _emit("matmul", (a, b), out, lambda g: (g @ B.T, A.T @ g))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {x.shape}")
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.size == 0:
        raise DimensionError(f"softmax_rows: need a non-empty matrix, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("softmax", (x,), p, bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0.0  # gradient at exactly 0 is 0
    return _emit("relu", (x,), np.where(on, x.data, 0.0), lambda g: (g * on,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _emit("add", (a, b), _check_finite("add", a.data + b.data), lambda g: (g, g))


def add_bias(x, bias) -> Tensor:
    """Add a row vector ``bias`` of shape (n,) to every row of ``x`` (m, n)."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    out = _check_finite("add_bias", x.data + bias.data)
    return _emit("add_bias", (x, bias), out, lambda g: (g, g.sum(axis=0)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), _check_finite("mul", A * B), lambda g: (g * B, g * A))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", (x,), _check_finite("scale", x.data * c), lambda g: (g * c,))


def concat(parts, axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]}") from exc
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", tuple(parts), out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice", (x,), x.data[:, start:stop].copy(), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_same("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = np.array((diff * diff).sum() / n)

    def bwd(g):
        d = (2.0 / n) * g * diff
        return (d, -d)

    return _emit("mse", (pred, target), _check_finite("mse_loss", out), bwd)


def elementwise(kind: str, x, y=None) -> Tensor:
    """Dispatch by name: relu, sigmoid, add, mul, or scale (``y`` is the factor)."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "add":
        return add(x, y)
    if kind == "mul":
        return mul(x, y)
    if kind == "scale":
        return scale(x, y)
    raise ValueError(f"unknown elementwise kind {kind!r}")
