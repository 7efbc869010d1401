"""Define-by-run reverse-mode differentiation over dense 2-D float64 matrices.

A :class:`Tape` records every operation applied to its :class:`Var` handles.
Calling :meth:`Tape.backward` on a 1x1 node walks the record in reverse and
returns the gradient of that node with respect to each leaf.

Every value is a 2-D ``numpy.ndarray`` of dtype float64. Row and column
vectors are ``(n, 1)`` and ``(1, k)`` matrices; binary elementwise operations
broadcast them the way numpy does and fold the gradient back to the operand
shape.

>>> tape = Tape()
>>> x = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
>>> loss = total_sum(x * x)
>>> tape.backward(loss)[x]
array([[2., 4.],
       [6., 8.]])
"""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Real
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ShapeError

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]], float]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def as_matrix(value: ArrayLike) -> np.ndarray:
    """Coerce ``value`` to a 2-D float64 array, copying only when needed."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


@dataclass
class _Node:
    value: np.ndarray
    parents: tuple[int, ...]
    backward: Optional[Backward]


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.id].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a 1x1 node, got shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Var":
        return transpose(self)


class Tape:
    """Ordered record of operations. Single owner; rebuild per forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[Var] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value: ArrayLike) -> Var:
        """Register a parameter matrix whose gradient :meth:`backward` reports."""
        v = self._push(as_matrix(value).copy(), (), None)
        self._leaves.append(v)
        return v

    def constant(self, value: ArrayLike) -> Var:
        return self._push(as_matrix(value), (), None)

    @property
    def leaves(self) -> list[Var]:
        return list(self._leaves)

    def _push(self, value: np.ndarray, parents: tuple[int, ...], backward: Optional[Backward]) -> Var:
        self._nodes.append(_Node(value, parents, backward))
        return Var(self, len(self._nodes) - 1)

    def record(self, value: np.ndarray, parents: Sequence[Var], backward: Backward) -> Var:
        """Append a custom node. ``backward`` maps the output adjoint to one
        adjoint per parent (``None`` for no contribution)."""
        for p in parents:
            if p.tape is not self:
                raise ContractError("operands belong to different tapes")
        return self._push(value, tuple(p.id for p in parents), backward)

    def backward(self, loss: Var) -> dict[Var, np.ndarray]:
        """Gradient of the scalar ``loss`` with respect to every leaf."""
        if loss.tape is not self:
            raise ContractError("loss node belongs to another tape")
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
        adjoints: list[Optional[np.ndarray]] = [None] * (loss.id + 1)
        adjoints[loss.id] = np.ones((1, 1))
        for i in range(loss.id, -1, -1):
            g = adjoints[i]
            node = self._nodes[i]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                if adjoints[pid] is None:
                    adjoints[pid] = pg
                else:
                    adjoints[pid] = adjoints[pid] + pg
        grads = {}
        for leaf in self._leaves:
            g = adjoints[leaf.id] if leaf.id <= loss.id else None
            grads[leaf] = np.zeros_like(leaf.value) if g is None else g
        return grads


def backward(tape: Tape, loss: Var) -> dict[Var, np.ndarray]:
    return tape.backward(loss)


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ContractError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _pair(a, b) -> tuple[Var, Var]:
    tape = a.tape if isinstance(a, Var) else b.tape
    return _lift(a, tape), _lift(b, tape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a: Var, b: Var) -> tuple[int, int]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Var:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record(a.value + b.value, (a, b),
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record(a.value - b.value, (a, b),
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    if isinstance(a, Real) and isinstance(b, Var):
        return scale(b, float(a))
    if isinstance(b, Real) and isinstance(a, Var):
        return scale(a, float(b))
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b),
                         lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    if isinstance(b, Real) and isinstance(a, Var):
        return scale(a, 1.0 / float(b))
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return a.tape.record(out, (a, b),
                         lambda g: (_unbroadcast(g / bv, av.shape),
                                    _unbroadcast(-g * out / bv, bv.shape)))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


# -- elementwise unary -------------------------------------------------------

def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    if np.any(av <= 0):
        raise ContractError("log of a non-positive entry")
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def relu(a: Var) -> Var:
    mask = a.value > 0  # subgradient 0 at exactly 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


# -- structural --------------------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    a, b = _pair(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    return a.tape.record(a.value.T.copy(), (a,), lambda g: (g.T,))


def row_sum(a: Var) -> Var:
    """Sum across columns: ``(n, k) -> (n, 1)``."""
    k = a.shape[1]
    return a.tape.record(a.value.sum(axis=1, keepdims=True), (a,),
                         lambda g: (np.repeat(g, k, axis=1),))


def col_sum(a: Var) -> Var:
    """Sum down rows: ``(n, k) -> (1, k)``."""
    n = a.shape[0]
    return a.tape.record(a.value.sum(axis=0, keepdims=True), (a,),
                         lambda g: (np.repeat(g, n, axis=0),))


def total_sum(a: Var) -> Var:
    shape = a.shape
    return a.tape.record(np.array([[a.value.sum()]]), (a,),
                         lambda g: (np.full(shape, g[0, 0]),))


def broadcast_to(a: Var, shape: tuple[int, int]) -> Var:
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    sa = a.shape
    return a.tape.record(out, (a,), lambda g: (_unbroadcast(g, sa),))


def logsumexp(a: Var, axis: int) -> Var:
    """Max-shifted log-sum-exp along ``axis``, keeping the reduced dim."""
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    shifted = np.exp(av - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    weights = shifted / s
    return a.tape.record(out, (a,), lambda g: (g * weights,))


# -- geometry ----------------------------------------------------------------

def _sqdist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ikj,ikj->ik", diff, diff)


def pairwise_sqdist(points, centers):
    """Squared euclidean distances between rows: ``(n, p), (K, p) -> (n, K)``.

    Works on plain arrays or on tape variables; mixing is allowed as long as
    one operand is a :class:`Var`.
    """
    if not isinstance(points, Var) and not isinstance(centers, Var):
        x, mu = as_matrix(points), as_matrix(centers)
        if x.shape[1] != mu.shape[1]:
            raise ShapeError(f"feature dims differ: {x.shape[1]} vs {mu.shape[1]}")
        return _sqdist(x, mu)
    x, mu = _pair(points, centers)
    if x.shape[1] != mu.shape[1]:
        raise ShapeError(f"feature dims differ: {x.shape[1]} vs {mu.shape[1]}")
    xv, mv = x.value, mu.value

    def back(g):
        gx = 2.0 * (g.sum(axis=1, keepdims=True) * xv - g @ mv)
        gm = 2.0 * (g.sum(axis=0)[:, None] * mv - g.T @ xv)
        return gx, gm

    return x.tape.record(_sqdist(xv, mv), (x, mu), back)
