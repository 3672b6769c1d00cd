"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` is created per forward call. Parameters are registered with
:meth:`Tape.watch`; every op whose inputs live on a recording tape appends
one entry holding its parents and vector-Jacobian products. With recording
disabled nothing is appended, which is how the grad-free probe forwards stay
cheap.

Only what small MLPs and the quadratic test losses need is implemented.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import Layout, ParamVector


class DimensionError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class _Entry:
    __slots__ = ("parents", "vjps")

    def __init__(self, parents, vjps):
        self.parents = parents
        self.vjps = vjps


class Tape:
    """Single-use record of a forward pass."""

    def __init__(self, recording: bool = True):
        self.recording_enabled = recording
        self.entries: list[_Entry] = []
        self.consumed = False
        self._layout: Layout | None = None
        self._param_nodes: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def _append(self, parents, vjps) -> int:
        self.entries.append(_Entry(tuple(parents), tuple(vjps)))
        return len(self.entries) - 1

    def watch(self, w: ParamVector) -> dict[str, "Tensor"]:
        """Expose the segments of ``w`` as leaf tensors on this tape."""
        if self._layout is not None:
            raise BackwardError("tape already watches a parameter vector")
        self._layout = w.layout
        leaves = {}
        for seg in w.layout.segments:
            value = w[seg.name]
            if self.recording_enabled:
                node = self._append((), ())
                self._param_nodes[node] = seg.name
                leaves[seg.name] = Tensor(value, self, node)
            else:
                leaves[seg.name] = Tensor(value)
        return leaves


class Tensor:
    """Dense float64 array, optionally attached to a recording tape."""

    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None  # ndarray (op) Tensor defers to Tensor

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def recorded(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", recorded" if self.recorded else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, inputs: tuple[Tensor, ...],
            vjps: tuple[Callable[[np.ndarray], np.ndarray], ...]) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise BackwardError("operands belong to different tapes")
            tape = t.tape
    if tape is None or not tape.recording_enabled:
        return Tensor(value)
    parents, fns = [], []
    for t, fn in zip(inputs, vjps):
        if t.tape is tape:
            parents.append(t.node)
            fns.append(fn)
    return Tensor(value, tape, tape._append(parents, fns))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   (lambda g: _unbroadcast(g, a.shape), lambda g: -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   (lambda g: _unbroadcast(g * b.data, a.shape),
                    lambda g: _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul expects (n,k)@(k,) or (n,k)@(k,m), got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if b.data.ndim == 1:
        return _result(a.data @ b.data, (a, b),
                       (lambda g: np.outer(g, b.data), lambda g: a.data.T @ g))
    return _result(a.data @ b.data, (a, b),
                   (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    value = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _result(value, (a,), (vjp,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), (lambda g: g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), (lambda g: g * y * (1.0 - y),))


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy ``logsumexp(z) - z[label]``, shape ``(N,)``."""
    z = as_tensor(logits)
    if z.data.ndim != 2:
        raise DimensionError(f"logits must be (N, C), got {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"class label outside [0, {c})")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    value = lse - shifted[rows, labels]

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return g[:, None] * p

    return _result(value, (z,), (vjp,))


def backward(tape: Tape, root: Tensor) -> ParamVector:
    """Gradient of scalar ``root`` with respect to the parameters watched by ``tape``.

    The tape is consumed; a second call raises.
    """
    if tape.consumed:
        raise BackwardError("tape already consumed by a previous backward")
    if not tape.recording_enabled or root.tape is not tape or root.node is None:
        raise BackwardError("backward requires a root recorded on this tape")
    if root.data.size != 1:
        raise BackwardError(f"backward root must be scalar, got shape {root.shape}")
    if tape._layout is None:
        raise BackwardError("tape watches no parameters")

    adjoint: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    grads: dict[str, np.ndarray] = {}
    for idx in range(root.node, -1, -1):
        g = adjoint.pop(idx, None)
        if g is None:
            continue
        if idx in tape._param_nodes:
            grads[tape._param_nodes[idx]] = g
            continue
        entry = tape.entries[idx]
        for parent, vjp in zip(entry.parents, entry.vjps):
            contrib = vjp(g)
            if parent in adjoint:
                adjoint[parent] = adjoint[parent] + contrib
            else:
                adjoint[parent] = contrib

    layout = tape._layout
    tape.consumed = True
    tape.entries = []
    return ParamVector.from_arrays(
        layout, {s.name: grads.get(s.name, np.zeros(s.shape)) for s in layout.segments}
    )
