"""Tape-based reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records every operation applied to a :class:`Var` eagerly,
so forward values are always available.  :meth:`Tape.gradient` walks the
record once in reverse and returns adjoints for the requested leaves.

The module-level functions (``matmul``, ``sum``, ``exp`` ...) dispatch on
their operands: when none of them is a :class:`Var` they simply return the
numpy result.  The same model code therefore runs on the tape (for
gradients) and on plain, possibly batched, arrays (for black-box search).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tape",
    "Var",
    "record",
    "value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum",
    "row_sum",
    "col_sum",
    "exp",
    "log",
    "relu",
    "clip_through",
    "gather",
    "scatter",
    "reshape",
    "power_iterate",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class TapeError(ValueError):
    """Invalid gradient request (non-scalar output, foreign variable...)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _matmul_vjp(g, out, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = np.reshape(g, np.matmul(a2, b2).shape)
    ga = _unbroadcast(g2 @ _swap(b2), a2.shape).reshape(a.shape)
    gb = _unbroadcast(_swap(a2) @ g2, b2.shape).reshape(b.shape)
    return ga, gb


def _sum_vjp(g, out, x, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _gather_vjp(g, out, x, index):
    gx = np.zeros(x.shape)
    np.add.at(gx, index, g)
    return (gx,)


def _scatter_fwd(x, index, shape):
    out = np.zeros(shape)
    np.add.at(out, index, x)
    return out


def _power_iterates(trans, start, shift, scale, iters):
    xs = [np.broadcast_to(start, trans.shape[:-2] + start.shape[-2:])]
    for _ in range(iters):
        xs.append(shift + scale * (xs[-1] @ trans))
    return xs


def _power_fwd(trans, start, shift, scale, iters):
    return _power_iterates(trans, start, shift, scale, iters)[-1]


def _power_vjp(g, out, trans, start, shift, scale, iters):
    # adjoint of the unrolled loop: x_{k+1} = shift + scale * x_k @ T
    xs = _power_iterates(trans, start, shift, scale, iters)
    t_bar = np.zeros(np.broadcast_shapes(trans.shape, xs[0].shape[:-2] + trans.shape[-2:]))
    t_swap = _swap(trans)
    for k in range(iters - 1, -1, -1):
        g = scale * g
        t_bar += _swap(xs[k]) @ g
        g = g @ t_swap
    return (_unbroadcast(t_bar, trans.shape),)


def _clip_check(lo, hi):
    if lo > hi:
        raise ValueError(f"clip_through: lo={lo} exceeds hi={hi}")


@dataclass(frozen=True)
class _Op:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]
    kink: Callable[..., float] | None = None


# vjp(g, out, *operand_values, **params) -> one adjoint per operand
_OPS: dict[str, _Op] = {
    "add": _Op(np.add, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": _Op(np.subtract, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": _Op(
        np.multiply,
        lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    ),
    "div": _Op(
        np.divide,
        lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * o / b, b.shape)),
    ),
    "neg": _Op(np.negative, lambda g, o, a: (-g,)),
    "matmul": _Op(np.matmul, _matmul_vjp),
    "sum": _Op(lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims), _sum_vjp),
    "exp": _Op(np.exp, lambda g, o, x: (g * o,)),
    "log": _Op(np.log, lambda g, o, x: (g / x,)),
    "relu": _Op(
        lambda x: np.maximum(x, 0.0),
        lambda g, o, x: (g * (x > 0.0),),
        kink=lambda x: float(np.min(np.abs(x))) if x.size else np.inf,
    ),
    "clip": _Op(
        lambda x, lo, hi: np.clip(x, lo, hi),
        lambda g, o, x, lo, hi: (g * ((x > lo) & (x < hi)),),
        kink=lambda x, lo, hi: float(np.min(np.minimum(np.abs(x - lo), np.abs(x - hi))))
        if x.size
        else np.inf,
    ),
    "gather": _Op(lambda x, index: np.asarray(x[index], dtype=float), _gather_vjp),
    "scatter": _Op(_scatter_fwd, lambda g, o, x, index, shape: (np.asarray(g[index]).reshape(x.shape),)),
    "reshape": _Op(lambda x, shape: np.reshape(x, shape), lambda g, o, x, shape: (g.reshape(x.shape),)),
    "power_iterate": _Op(_power_fwd, _power_vjp),
}


@dataclass
class _Node:
    kind: str
    parents: tuple[int | None, ...]
    inputs: tuple[np.ndarray, ...]
    params: dict[str, Any]
    value: np.ndarray


class Tape:
    """Append-only record of operations.

    Node ids are list positions, so operands always precede their results
    and a reversed scan is a valid topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.last_sweep_visits = 0
        self.kink_margin = np.inf

    def __len__(self) -> int:
        return len(self.nodes)

    def var(self, x) -> "Var":
        """Register ``x`` as a differentiable leaf."""
        arr = np.array(x, dtype=float)
        self.nodes.append(_Node("input", (), (), {}, arr))
        return Var(arr, self, len(self.nodes) - 1)

    def _append(self, kind, parents, inputs, params, out) -> "Var":
        self.nodes.append(_Node(kind, parents, inputs, params, out))
        return Var(out, self, len(self.nodes) - 1)

    def gradient(self, output: "Var", *wrt: "Var") -> list[np.ndarray]:
        """Adjoints of the scalar ``output`` with respect to each of ``wrt``.

        One reverse sweep from ``output`` down to the first node; every node
        is visited at most once.
        """
        if not isinstance(output, Var) or output.tape is not self:
            raise TapeError("output was not recorded on this tape")
        if output.value.size != 1:
            raise TapeError(f"output must be scalar, got shape {output.value.shape}")
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not self:
                raise TapeError("gradient requested for a value that is not on this tape")

        adj: list[np.ndarray | None] = [None] * (output.node_id + 1)
        adj[output.node_id] = np.ones_like(output.value)
        visits = 0
        for i in range(output.node_id, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            visits += 1
            if g is None or not node.parents:
                continue
            grads = _OPS[node.kind].vjp(g, node.value, *node.inputs, **node.params)
            for pid, pg in zip(node.parents, grads):
                if pid is None:
                    continue
                adj[pid] = pg if adj[pid] is None else adj[pid] + pg
        self.last_sweep_visits = visits

        out = []
        for w in wrt:
            g = adj[w.node_id] if w.node_id < len(adj) else None
            out.append(np.zeros_like(w.value) if g is None else g)
        return out


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "node_id")
    # make numpy hand mixed expressions (ndarray * Var) back to Var
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: Tape, node_id: int) -> None:
        self.value = value
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(node={self.node_id}, value={self.value!r})"

    def __float__(self) -> float:
        return float(self.value)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return gather(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def value(x) -> np.ndarray:
    """Forward value of ``x`` whether or not it lives on a tape."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def record(kind: str, *operands, **params):
    """Apply op ``kind`` to ``operands``, recording it if any operand is a Var.

    Raises :class:`ShapeError` if numpy rejects the operand shapes.
    """
    op = _OPS[kind]
    tape = None
    for x in operands:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise TapeError(f"{kind}: operands belong to different tapes")
            tape = x.tape
    inputs = tuple(value(x) for x in operands)
    try:
        out = np.asarray(op.forward(*inputs, **params), dtype=float)
    except (ValueError, IndexError) as exc:
        shapes = ", ".join(str(v.shape) for v in inputs)
        raise ShapeError(f"{kind}: incompatible operand shapes {shapes}") from exc
    if tape is None:
        return out
    if op.kink is not None:
        tape.kink_margin = min(tape.kink_margin, op.kink(*inputs, **params))
    parents = tuple(x.node_id if isinstance(x, Var) else None for x in operands)
    return tape._append(kind, parents, inputs, params, out)


def add(a, b):
    return record("add", a, b)


def sub(a, b):
    return record("sub", a, b)


def mul(a, b):
    return record("mul", a, b)


def div(a, b):
    return record("div", a, b)


def neg(a):
    return record("neg", a)


def matmul(a, b):
    return record("matmul", a, b)


def sum(x, axis=None, keepdims=False):
    return record("sum", x, axis=axis, keepdims=keepdims)


def row_sum(x):
    """Sum over the last axis (one value per row)."""
    return record("sum", x, axis=-1, keepdims=False)


def col_sum(x):
    """Sum over the second-to-last axis (one value per column)."""
    return record("sum", x, axis=-2, keepdims=False)


def exp(x):
    return record("exp", x)


def log(x):
    return record("log", x)


def relu(x):
    """max(0, x); the subgradient at 0 is taken as 0."""
    return record("relu", x)


def clip_through(x, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the box."""
    _clip_check(lo, hi)
    return record("clip", x, lo=lo, hi=hi)


def gather(x, index):
    return record("gather", x, index=index)


def scatter(x, index, shape):
    """Zeros of ``shape`` with ``x`` added at ``index``."""
    return record("scatter", x, index=index, shape=tuple(shape))


def reshape(x, shape):
    return record("reshape", x, shape=tuple(shape))



def power_iterate(trans, start, shift: float, scale: float, iters: int):
    """``iters`` steps of ``x <- shift + scale * (x @ trans)`` from ``start``.

    Recorded as one node; the adjoint replays the same unrolled loop, so the
    gradient is exact for the truncated iteration.  ``start`` is a constant
    row block of shape ``(..., 1, n)``.
    """
    return record("power_iterate", trans, start=np.asarray(start, dtype=float), shift=float(shift), scale=float(scale), iters=int(iters))
