"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever one of their operands requires a gradient.  Outside a
tape, the same functions simply compute values, which is how evaluation and
detached forward passes work.

    with Tape() as tape:
        loss = bce_with_logits(matmul(x, w), y)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, LabelError, StateError

DTYPE = np.float64

_local = threading.local()


class Tensor:
    """2-D real array with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(value, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"Tensor needs rows >= 1 and cols >= 1, got {arr.shape}")
        self.value = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def detach(self) -> "Tensor":
        """Same values, cut from any tape. Shares no gradient slot."""
        out = Tensor.__new__(Tensor)
        out.value = self.value
        out.grad = None
        out.requires_grad = False
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


@dataclass
class Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    # maps upstream gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of operations for one forward pass.

    ``backward`` may run once; a second call without re-recording raises
    :class:`StateError` so gradients are never silently accumulated twice.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, node: Node) -> None:
        if self.consumed:
            raise StateError("cannot record onto a tape that has already been replayed")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise StateError("tape backward already ran; record a fresh forward pass")
        if loss.shape != (1, 1):
            raise DimensionError(f"backward needs a 1x1 loss, got {loss.shape}")
        self.consumed = True
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=DTYPE)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever remains belongs to leaves (parameters and raw inputs)
        leaves = {id(t): t for node in self.nodes for t in node.inputs if t.requires_grad}
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _current_tape()
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(Node(out, inputs, backward))
    return out


# -- operations ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.rows != 1 or b.cols != x.cols:
        raise DimensionError(f"bias shape {b.shape} does not broadcast over {x.shape}")

    def backward(g):
        return g, g.sum(axis=0, keepdims=True)

    return _emit(x.value + b.value, (x, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def backward(g):
        return (g * mask,)

    return _emit(np.where(mask, x.value, 0.0), (x,), backward)


def add(*terms: Tensor) -> Tensor:
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise DimensionError(f"add shape mismatch: {shape} vs {t.shape}")
    total = terms[0].value.copy()
    for t in terms[1:]:
        total = total + t.value

    def backward(g):
        return tuple(g for _ in terms)

    return _emit(total, tuple(terms), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit(x.value * c, (x,), backward)


def total_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.array([[x.value.sum()]]), (x,), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no tape)."""
    return np.exp(_log_softmax(np.asarray(logits, dtype=DTYPE)))


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    for i, y in enumerate(labels):
        if not (0 <= y < k) or int(y) != y:
            raise LabelError(f"label {y!r} at row {i} outside [0, {k})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross entropy of row softmax against integer labels.

    Returns the 1x1 loss and the row probabilities (a plain array, off-tape).
    """
    n, k = logits.shape
    y = _check_labels(labels, n, k)
    logp = _log_softmax(logits.value)
    probs = np.exp(logp)
    loss = -logp[np.arange(n), y].sum() / n

    def backward(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (g[0, 0] / n),)

    return _emit(np.array([[loss]]), (logits,), backward), probs


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross entropy on logits, in softplus form."""
    if logits.cols != 1:
        raise DimensionError(f"bce_with_logits expects n x 1 logits, got {logits.shape}")
    n = logits.rows
    y = np.asarray(labels, dtype=DTYPE).reshape(-1)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} domain labels, got {y.shape}")
    bad = np.flatnonzero((y != 0.0) & (y != 1.0))
    if bad.size:
        raise LabelError(f"domain label {y[bad[0]]!r} at row {bad[0]} is not 0 or 1")
    y = y.reshape(n, 1)
    z = logits.value
    # -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
    loss = (_softplus(z) - y * z).sum() / n

    def backward(g):
        return ((sigmoid(z) - y) * (g[0, 0] / n),)

    return _emit(np.array([[loss]]), (logits,), backward)


def squared_distance_sum(x: Tensor, targets: np.ndarray, rows=None) -> Tensor:
    """Sum over the chosen rows of ||x_i - targets_i||^2.

    ``targets`` is constant data (one row per selected row). Only ``x``
    receives a gradient.
    """
    idx = np.arange(x.rows) if rows is None else np.asarray(rows, dtype=np.int64)
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != (idx.size, x.cols):
        raise DimensionError(f"targets shape {t.shape} does not match {idx.size} rows of width {x.cols}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise IndexError(f"row index out of range for {x.rows} rows")
    diff = x.value[idx] - t
    loss = float((diff * diff).sum())

    def backward(g):
        d = np.zeros_like(x.value)
        np.add.at(d, idx, 2.0 * diff * g[0, 0])
        return (d,)

    return _emit(np.array([[loss]]), (x,), backward)


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    """RMSProp or SGD-with-momentum state plus a step learning-rate decay.

    ``lr_at(epoch) = base_lr * decay ** (epoch // period)``.
    """

    kind: str = "rmsprop"
    base_lr: float = 1e-3
    decay: float = 0.5
    period: int = 60
    rho: float = 0.9
    eps: float = 1e-8
    momentum: float = 0.9
    steps: int = 0
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("rmsprop", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.period < 1:
            raise ConfigError("decay period must be >= 1 epoch")

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.decay ** (epoch // self.period)


def optimizer_step(params: dict[str, Tensor], state: OptimizerState, epoch: int) -> None:
    """Apply one update in place to every parameter, then clear gradients."""
    for name, p in params.items():
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    lr = state.lr_at(epoch)
    for name, p in params.items():
        g = p.grad
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.zeros_like(p.value)
        if state.kind == "rmsprop":
            acc = state.rho * acc + (1.0 - state.rho) * g * g
            p.value = p.value - lr * g / np.sqrt(acc + state.eps)
        else:
            acc = state.momentum * acc + g
            p.value = p.value - lr * acc
        state.accumulators[name] = acc
        p.grad = None
    state.steps += 1
