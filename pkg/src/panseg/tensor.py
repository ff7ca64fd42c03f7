"""Dense float64 tensors and the reverse-mode autodiff tape.

Everything downstream (convolutions, attention blocks, the training loop)
runs on these two types. Tensors are treated as immutable values once
created; a Tape records op applications in execution order and replays
them in reverse to populate gradients on the leaves.
"""
from __future__ import annotations

import numpy as np


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operand shapes violate an op's contract."""


class NumericsError(TensorError):
    """An op produced NaN/Inf; never propagated silently."""


class GraphError(TensorError):
    """Invalid tape construction or backward call."""


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient slot.

    ``data`` is kept C-contiguous, i.e. a flat row-major buffer viewed
    through ``shape``. 64-bit floats are used throughout so central
    finite-difference gradient checks are meaningful.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: inputs, produced output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of op applications; topological order == execution order.

    A tape is single-owner: one forward pass writes it, one backward pass
    consumes it. Concurrent tapes over disjoint tensors are fine.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()

    def record(self, op: str, inputs, output: Tensor, backward_fn) -> None:
        """Append a node. ``backward_fn(grad_out)`` must return one gradient
        array (or None) per input, in input order."""
        out_id = id(output)
        if out_id in self._produced:
            raise GraphError(f"tape: output of '{op}' was already produced by an earlier node")
        self.nodes.append(TapeNode(op, inputs, output, backward_fn))
        self._produced.add(out_id)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self.nodes)


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    """Forward ops call this on their result; NaN/Inf is an error state."""
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op}: non-finite values in output")
    return arr


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep: populate ``grad`` on every requires_grad leaf.

    ``loss`` must be a scalar produced on ``tape``. Grad of the loss w.r.t.
    itself is 1. Gradients accumulate (+=) into pre-existing ``grad``
    buffers, so callers zero grads between steps.
    """
    if loss.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise GraphError("backward: loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue  # output never contributed to the loss
        in_grads = node.backward_fn(g_out)
        if len(in_grads) != len(node.inputs):
            raise GraphError(f"backward: '{node.op}' returned {len(in_grads)} grads "
                             f"for {len(node.inputs)} inputs")
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t

    for key, g in grads.items():
        t = holders[key]
        if not t.requires_grad or tape.produced(t):
            continue  # only leaves keep gradients
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise ops. Broadcasting is restricted to the one case the attention
# blocks need: second operand shaped [N, C, 1, 1] over the spatial dims of a
# [N, C, H, W] first operand. Anything else is a hard error so every backward
# rule stays simple and testable.
# ---------------------------------------------------------------------------

def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "equal"
    if (a.ndim == 4 and b.ndim == 4 and b.shape[0] == a.shape[0]
            and b.shape[1] == a.shape[1] and b.shape[2] == 1 and b.shape[3] == 1):
        return "nc11"
    raise ShapeError(f"elementwise: shapes {a.shape} and {b.shape} are neither equal "
                     f"nor [N,C,H,W] with [N,C,1,1]")


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    kind = _broadcast_kind(a, b)
    out = Tensor(check_finite(a.data + b.data, "add"),
                 requires_grad=a.requires_grad or b.requires_grad)
    if tape is not None and out.requires_grad:
        def bwd(g):
            gb = g if kind == "equal" else g.sum(axis=(2, 3), keepdims=True)
            return g, gb
        tape.record("add", (a, b), out, bwd)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    kind = _broadcast_kind(a, b)
    out = Tensor(check_finite(a.data * b.data, "mul"),
                 requires_grad=a.requires_grad or b.requires_grad)
    if tape is not None and out.requires_grad:
        a_data, b_data = a.data, b.data
        def bwd(g):
            ga = g * b_data
            gb = g * a_data
            if kind == "nc11":
                gb = gb.sum(axis=(2, 3), keepdims=True)
            return ga, gb
        tape.record("mul", (a, b), out, bwd)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    if tape is not None and out.requires_grad:
        mask = x.data > 0  # gradient at exactly 0 is 0
        tape.record("relu", (x,), out, lambda g: (g * mask,))
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    # Split by sign to avoid overflow in exp.
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(check_finite(s, "sigmoid"), requires_grad=x.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record("sigmoid", (x,), out, lambda g: (g * s * (1.0 - s),))
    return out


def tensor_sum(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(check_finite(x.data.sum(), "sum"), requires_grad=x.requires_grad)
    if tape is not None and out.requires_grad:
        shape = x.shape
        tape.record("sum", (x,), out, lambda g: (np.broadcast_to(g, shape).copy(),))
    return out
