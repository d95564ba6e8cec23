"""Float64 matrices and a small reverse-mode autodiff tape.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Anything
that needs gradients goes through a :class:`Tape`: leaves are registered with
:meth:`Tape.leaf` and every op below records itself when one of its inputs is
a :class:`Var`. Ops on plain arrays just compute values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "Tape",
    "Var",
    "as_matrix",
    "value",
    "matmul",
    "add",
    "sub",
    "add_bias",
    "hadamard",
    "scale",
    "relu",
    "gelu",
    "identity",
    "sum_all",
    "sum_squares",
    "softmax_cross_entropy",
    "backward",
    "ACTIVATIONS",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


def as_matrix(a) -> np.ndarray:
    """Coerce to a 2-D float64 array (vectors become column vectors)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {arr.shape}")
    return arr


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    # maps upstream gradient -> one gradient per input
    vjp: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None


@dataclass(frozen=True)
class Var:
    """Handle to a node on a tape."""

    tape: "Tape"
    id: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def leaf(self, a) -> Var:
        v = np.array(as_matrix(a), dtype=np.float64, copy=True)
        v.flags.writeable = False
        self.nodes.append(_Node("leaf", (), v))
        return Var(self, len(self.nodes) - 1)

    def _record(self, op: str, inputs: Sequence[int], out: np.ndarray, vjp) -> Var:
        for i in inputs:
            if i >= len(self.nodes):
                raise ContractError("input node does not precede its consumer")
        out.flags.writeable = False
        self.nodes.append(_Node(op, tuple(inputs), out, vjp))
        return Var(self, len(self.nodes) - 1)

    def grad(self, var: Var) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. ``var``."""
        g = self.grads.get(var.id)
        if g is None:
            return np.zeros_like(var.value)
        return g


def value(a) -> np.ndarray:
    return a.value if isinstance(a, Var) else as_matrix(a)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise ContractError("operands live on different tapes")
            tape = a.tape
    return tape


def _lift(tape: Tape, a) -> int:
    # constants are recorded as leaves so every node input is a node id
    if isinstance(a, Var):
        return a.id
    return tape.leaf(a).id


def _apply(op: str, args: tuple, out: np.ndarray, vjp):
    tape = _tape_of(*args)
    if tape is None:
        return out
    ids = [_lift(tape, a) for a in args]
    return tape._record(op, ids, out, vjp)


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return out


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: {av.shape} x {bv.shape}")
    out = _check_finite(av @ bv, "matmul")
    return _apply("matmul", (a, b), out, lambda g: (g @ bv.T, av.T @ g))


def _same_shape(op, av, bv):
    if av.shape != bv.shape:
        raise DimensionError(f"{op}: {av.shape} vs {bv.shape}")


def add(a, b):
    av, bv = value(a), value(b)
    _same_shape("add", av, bv)
    out = _check_finite(av + bv, "add")
    return _apply("add", (a, b), out, lambda g: (g, g))


def sub(a, b):
    av, bv = value(a), value(b)
    _same_shape("sub", av, bv)
    out = _check_finite(av - bv, "sub")
    return _apply("sub", (a, b), out, lambda g: (g, -g))


def add_bias(a, bias):
    """``a`` (m x N) plus a column vector ``bias`` (m x 1) on every column."""
    av, bv = value(a), value(bias)
    if bv.shape != (av.shape[0], 1):
        raise DimensionError(f"add_bias: {av.shape} with bias {bv.shape}")
    out = _check_finite(av + bv, "add_bias")
    return _apply("add_bias", (a, bias), out, lambda g: (g, g.sum(axis=1, keepdims=True)))


def hadamard(a, b):
    av, bv = value(a), value(b)
    _same_shape("hadamard", av, bv)
    out = _check_finite(av * bv, "hadamard")
    return _apply("hadamard", (a, b), out, lambda g: (g * bv, g * av))


def scale(a, c: float):
    av = value(a)
    c = float(c)
    out = _check_finite(av * c, "scale")
    return _apply("scale", (a,), out, lambda g: (g * c,))


def identity(a):
    return a


def relu(a):
    av = value(a)
    gate = (av > 0).astype(np.float64)
    out = np.where(av > 0, av, 0.0)
    return _apply("relu", (a,), out, lambda g: (g * gate,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximate GELU; the adjoint differentiates the approximation."""
    av = value(a)
    inner = _GELU_C * (av + 0.044715 * av**3)
    t = np.tanh(inner)
    out = 0.5 * av * (1.0 + t)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * av**2)
    deriv = 0.5 * (1.0 + t) + 0.5 * av * (1.0 - t**2) * dinner
    return _apply("gelu", (a,), out, lambda g: (g * deriv,))


def sum_all(a):
    av = value(a)
    out = np.array([[av.sum()]])
    return _apply("sum", (a,), _check_finite(out, "sum"), lambda g: (np.full_like(av, g[0, 0]),))


def sum_squares(a):
    av = value(a)
    out = np.array([[np.sum(av * av)]])
    return _apply("sum_squares", (a,), _check_finite(out, "sum_squares"), lambda g: (2.0 * g[0, 0] * av,))


def softmax_cross_entropy(logits, labels, reduction: str = "mean"):
    """Cross-entropy of column-wise softmax(logits) (C x N) against integer labels.

    ``reduction`` is "mean" or "sum" over the N samples.
    """
    z = value(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_classes, n = z.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{n} logit columns but {labels.shape[0]} labels")
    if n == 0:
        raise ContractError("empty batch")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"labels must lie in [0, {n_classes})")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    shifted = z - z.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_p = shifted - log_norm
    cols = np.arange(n)
    per_sample = -log_p[labels, cols]
    div = n if reduction == "mean" else 1
    out = np.array([[per_sample.sum() / div]])

    def vjp(g):
        grad = np.exp(log_p)
        grad[labels, cols] -= 1.0
        return (grad * (g[0, 0] / div),)

    return _apply("softmax_cross_entropy", (logits,), _check_finite(out, "cross_entropy"), vjp)


ACTIVATIONS = {"relu": relu, "gelu": gelu, "identity": identity}


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; fills and returns ``tape.grads``.

    Every node gets an entry; nodes with no path to the loss get zeros.
    """
    if loss.tape is not tape:
        raise ContractError("loss is not on this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got {loss.value.shape}")
    grads: dict[int, np.ndarray] = {}
    grads[loss.id] = np.ones((1, 1))
    for nid in range(loss.id, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    for nid, node in enumerate(tape.nodes):
        if nid not in grads:
            grads[nid] = np.zeros_like(node.value)
    tape.grads = grads
    return grads
