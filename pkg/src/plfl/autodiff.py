"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The op set is closed: ``matmul``, ``affine``, ``add``, ``sub``, ``hadamard``,
``sigmoid``, ``tanh``, ``prelu``, ``square``, ``concat`` and ``mean``.  There is
no implicit broadcasting; the only row-broadcast the forecaster needs (adding a
bias vector to every sample of a batch) lives inside ``affine``.

Usage::

    tape = Tape()
    w = tape.leaf("w", np.array([3.0]))
    loss = mean(square(w))
    grads = backward(tape, loss)      # {"w": Tensor([6.0])}
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """Dense row-major float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, node_id: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tracked = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tracked})"


class Tape:
    """Append-only record of operations; node ids are positions in ``nodes``.

    Each node is ``(op, input_ids, vjp)`` where ``vjp`` maps the upstream
    gradient to a tuple of gradients, one per input (``None`` for inputs that
    are not tracked).  Nodes are appended after their inputs, so the list is
    already in topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int | None, ...], Callable | None]] = []
        self.leaves: dict[str, int] = {}
        self.leaf_shapes: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already recorded")
        node_id = len(self.nodes)
        self.nodes.append(("leaf", (), None))
        self.leaves[name] = node_id
        data = np.array(value, dtype=np.float64)
        self.leaf_shapes[name] = data.shape
        # copy so later in-place edits of the caller's array cannot alter the tape
        return Tensor(data, node_id, self)

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append((op, tuple(t.node_id for t in inputs), vjp))
        return Tensor(out, node_id, self)


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
            tape = t.tape
    return tape


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(op, out, inputs, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (m x k) and b (k x n)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def affine(pairs: Sequence[tuple[Tensor, Tensor]], biases: Sequence[Tensor] = ()) -> Tensor:
    """Batched affine map ``sum_j x_j @ W_j.T + sum_k b_k``.

    Each ``x_j`` is (batch x in_j), each ``W_j`` is (out x in_j) and each bias
    has length ``out``; biases are added to every row.
    """
    if not pairs:
        raise ValueError("affine: at least one (input, weight) pair is required")
    batch = pairs[0][0].shape[0] if pairs[0][0].data.ndim == 2 else None
    out_dim = pairs[0][1].shape[0] if pairs[0][1].data.ndim == 2 else None
    for x, W in pairs:
        if (x.data.ndim != 2 or W.data.ndim != 2 or x.shape[0] != batch
                or W.shape[0] != out_dim or x.shape[1] != W.shape[1]):
            raise DimensionError(f"affine: input {x.shape} incompatible with weight {W.shape}")
    for b in biases:
        if b.shape != (out_dim,):
            raise DimensionError(f"affine: bias {b.shape} does not match output size {out_dim}")

    xs = [x.data for x, _ in pairs]
    Ws = [W.data for _, W in pairs]
    out = xs[0] @ Ws[0].T
    for x, W in zip(xs[1:], Ws[1:]):
        out = out + x @ W.T
    for b in biases:
        out = out + b.data
    n_bias = len(biases)

    def vjp(g):
        grads = []
        for x, W in zip(xs, Ws):
            grads.append(g @ W)
            grads.append(g.T @ x)
        if n_bias:
            gb = g.sum(axis=0)
            grads.extend([gb] * n_bias)
        return tuple(grads)

    inputs = [t for pair in pairs for t in pair] + list(biases)
    return _emit("affine", out, inputs, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    A, B = a.data, b.data
    return _emit("hadamard", A * B, (a, b), lambda g: (g * B, g * A))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learnable slope per channel (last axis of x)."""
    if slope.data.ndim != 1 or x.data.ndim == 0 or x.shape[-1] != slope.shape[0]:
        raise DimensionError(f"prelu: slope {slope.shape} does not match channels of {x.shape}")
    X, a = x.data, slope.data
    positive = X > 0
    out = np.where(positive, X, a * X)

    def vjp(g):
        gx = np.where(positive, g, a * g)
        ga = np.where(positive, 0.0, X * g)
        ga = ga.reshape(-1, a.shape[0]).sum(axis=0)
        return gx, ga

    return _emit("prelu", out, (x, slope), vjp)


def square(a: Tensor) -> Tensor:
    A = a.data
    return _emit("square", A * A, (a,), lambda g: (2.0 * A * g,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat: empty part list")
    ndim = parts[0].data.ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} out of range for {ndim}-d parts")
    axis %= ndim
    for p in parts:
        if p.data.ndim != ndim or any(
            p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise DimensionError(
                f"concat: extents {[q.shape for q in parts]} disagree off axis {axis}"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def mean(a: Tensor) -> Tensor:
    """Mean over every element; returns a 0-d tensor."""
    n = a.size
    shape = a.shape
    return _emit("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to every named leaf of ``tape``.

    Leaves the loss does not depend on receive zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("backward: loss was not recorded on this tape")

    grads: list[np.ndarray | None] = [None] * (loss.node_id + 1)
    grads[loss.node_id] = np.ones_like(loss.data)
    for node_id in range(loss.node_id, -1, -1):
        g = grads[node_id]
        _, input_ids, vjp = tape.nodes[node_id]
        if g is None or vjp is None:
            continue
        for input_id, gi in zip(input_ids, vjp(g)):
            if input_id is None:
                continue
            if grads[input_id] is None:
                grads[input_id] = gi
            else:
                grads[input_id] = grads[input_id] + gi

    out = {}
    for name, node_id in tape.leaves.items():
        g = grads[node_id] if node_id < len(grads) else None
        out[name] = Tensor(np.zeros(tape.leaf_shapes[name]) if g is None else g)
    return out
