"""Define-by-run reverse-mode differentiation over dense 2-D float64 arrays.

A :class:`Tape` is created per forward pass. Leaves are either constants
(inputs, labels) or named parameters; every operator appends one record
holding the closure that maps the upstream gradient to input gradients.
:func:`backward` walks the records once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_CLAMP = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


def as_tensor(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("tape", "index", "value", "name")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, name: str | None = None):
        self.tape = tape
        self.index = index
        self.value = value
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.index}{label} shape={self.value.shape}"


@dataclass
class Record:
    kind: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    records: list[Record] = field(default_factory=list)
    params: dict[str, Node] = field(default_factory=dict)
    backward_visits: int = 0

    def _new(self, value: np.ndarray, name: str | None = None) -> Node:
        node = Node(self, len(self.nodes), value, name)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._new(as_tensor(value))

    def param(self, name: str, value: np.ndarray) -> Node:
        """Leaf for a named parameter; repeated names return the same node."""
        node = self.params.get(name)
        if node is None:
            if value.ndim != 2:
                raise ShapeError(f"parameter {name!r} must be 2-D, got {value.shape}")
            node = self._new(value, name)
            self.params[name] = node
        elif node.value is not value:
            raise ContractError(f"parameter name {name!r} bound to two different arrays")
        return node

    def record(self, kind: str, inputs: Sequence[Node], value: np.ndarray, vjp) -> Node:
        for node in inputs:
            if node.tape is not self:
                raise ContractError(f"{kind}: operand {node!r} belongs to another tape")
        out = self._new(value)
        self.records.append(Record(kind, tuple(n.index for n in inputs), out.index, vjp))
        return out


Gradients = dict[str, np.ndarray]


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ContractError("operands recorded on different tapes")
    return tape


def _column(weights, n: int, what: str) -> np.ndarray:
    w = weights.value if isinstance(weights, Node) else as_tensor(weights)
    if w.shape != (n, 1):
        raise ShapeError(f"{what} must have shape ({n}, 1), got {w.shape}")
    return w


# --------------------------------------------------------------------------
# operators


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _tape_of(a, b).record("matmul", (a, b), av @ bv, vjp)


def add_bias(x: Node, b: Node) -> Node:
    """Add a (1, cols) row vector to every row of ``x``."""
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")

    def vjp(g):
        return g, g.sum(axis=0, keepdims=True)

    return _tape_of(x, b).record("add_bias", (x, b), x.value + b.value, vjp)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _tape_of(a, b).record("add", (a, b), a.value + b.value, lambda g: (g, g))


def mul_scalar(x: Node, c: float) -> Node:
    c = float(c)
    return x.tape.record("mul_scalar", (x,), x.value * c, lambda g: (g * c,))


def sum_all(x: Node) -> Node:
    shape = x.shape

    def vjp(g):
        return (np.full(shape, g[0, 0]),)

    return x.tape.record("sum_all", (x,), np.array([[x.value.sum()]]), vjp)


def relu(x: Node) -> Node:
    mask = x.value > 0.0  # subgradient at exactly 0 is 0

    def vjp(g):
        return (g * mask,)

    return x.tape.record("relu", (x,), np.where(mask, x.value, 0.0), vjp)


def stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def stable_softmax(v: np.ndarray) -> np.ndarray:
    z = np.exp(v - v.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def sigmoid(x: Node) -> Node:
    y = stable_sigmoid(x.value)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return x.tape.record("sigmoid", (x,), y, vjp)


def softmax_rows(x: Node) -> Node:
    if x.shape[1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    y = stable_softmax(x.value)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return x.tape.record("softmax_rows", (x,), y, vjp)


def take_rows(x: Node, rows: Sequence[int]) -> Node:
    idx = np.asarray(rows, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return x.tape.record("take_rows", (x,), x.value[idx], vjp)


def take_col(x: Node, col: int) -> Node:
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, col : col + 1] = g
        return (full,)

    return x.tape.record("take_col", (x,), x.value[:, col : col + 1].copy(), vjp)


def cross_entropy(probs: Node, labels: Sequence[int]) -> Node:
    """Mean of ``-ln p[row, label]`` with probabilities clamped at 1e-12."""
    lab = np.asarray(labels, dtype=np.intp)
    n, k = probs.shape
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {lab.shape[0] if lab.ndim else 0} labels")
    if n == 0:
        raise ContractError("cross_entropy over zero rows")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise IndexError(f"cross_entropy: labels must lie in [0, {k})")
    rows = np.arange(n)
    picked = probs.value[rows, lab]
    clamped = np.maximum(picked, PROB_CLAMP)
    loss = -np.log(clamped).mean()

    def vjp(g):
        grad = np.zeros((n, k))
        live = picked > PROB_CLAMP
        grad[rows[live], lab[live]] = -g[0, 0] / (n * picked[live])
        return (grad,)

    return probs.tape.record("cross_entropy", (probs,), np.array([[loss]]), vjp)


def binary_cross_entropy(pred: Node, targets, sample_weight) -> Node:
    """Weighted mean of the binary log loss; zero total weight gives 0.

    ``targets`` and ``sample_weight`` are constants; only ``pred`` is
    differentiated.
    """
    n = pred.shape[0]
    if pred.shape != (n, 1):
        raise ShapeError(f"binary_cross_entropy: pred must be (n, 1), got {pred.shape}")
    t = _column(targets, n, "targets")
    w = _column(sample_weight, n, "sample_weight")
    p = pred.value
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    total = w.sum()
    if total == 0.0:
        loss = 0.0
    else:
        loss = float((w * -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))).sum() / total)

    def vjp(g):
        if total == 0.0:
            return (np.zeros_like(p),)
        live = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
        d = (-t / pc + (1.0 - t) / (1.0 - pc)) * w / total
        return (np.where(live, d, 0.0) * g[0, 0],)

    return pred.tape.record("binary_cross_entropy", (pred,), np.array([[loss]]), vjp)


def grad_reverse(x: Node, lam: float) -> Node:
    """Identity forward; multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ContractError(f"grad_reverse needs lambda >= 0, got {lam}")
    factor = -float(lam)
    return x.tape.record("grad_reverse", (x,), x.value, lambda g: (g * factor,))


def scale_rows(x: Node, weights, detach: bool = True) -> Node:
    """Multiply row ``i`` of ``x`` by ``weights[i]``.

    With ``detach`` the weights are constants for the backward pass. Passing
    ``detach=False`` requires ``weights`` to be a node and lets gradient flow
    into it.
    """
    n = x.shape[0]
    w = _column(weights, n, "scale_rows weights")
    xv = x.value
    if detach or not isinstance(weights, Node):
        return x.tape.record("scale_rows", (x,), xv * w, lambda g: (g * w,))

    def vjp(g):
        return g * w, (g * xv).sum(axis=1, keepdims=True)

    return _tape_of(x, weights).record("scale_rows", (x, weights), xv * w, vjp)


# --------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Node) -> Gradients:
    """One reverse sweep; returns a gradient for every named parameter.

    Parameters the loss does not reach get zero gradients.
    """
    if loss.tape is not tape:
        raise ContractError("loss node belongs to another tape")
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones((1, 1))
    visits = 0
    for rec in reversed(tape.records):
        visits += 1
        g = grads[rec.output]
        if g is None:
            continue
        for idx, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            grads[idx] = gi if grads[idx] is None else grads[idx] + gi
    tape.backward_visits = visits
    out: Gradients = {}
    for name, node in tape.params.items():
        g = grads[node.index]
        out[name] = np.zeros_like(node.value) if g is None else g
    return out


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: Gradients,
    h: float = 1e-5,
) -> float:
    """Largest relative error between ``analytic`` and central differences.

    ``loss_fn`` is re-evaluated after each in-place perturbation of an entry
    of ``params``; every entry is restored afterwards. The relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    return max((e for e in group_errors(loss_fn, params, analytic, h).values()), default=0.0)


def group_errors(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: Gradients,
    h: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter maximum relative error; see :func:`finite_diff_check`."""
    errors = {}
    for name, theta in params.items():
        ga = analytic[name]
        worst = 0.0
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            plus = loss_fn()
            theta[idx] = orig - h
            minus = loss_fn()
            theta[idx] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = ga[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    return errors
