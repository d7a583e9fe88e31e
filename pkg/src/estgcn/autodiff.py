"""A small reverse-mode automatic differentiation engine on numpy arrays.

Every forward operation appends a node to a :class:`Tape`; :meth:`Tape.backward`
walks the nodes in reverse creation order (which is a valid reverse
topological order) and accumulates gradients. All arithmetic is float64.

Broadcasting is deliberately limited to adding a 1-D bias to the last axis,
multiplying by a scalar (:func:`scale`) and batched ``matmul`` against a 2-D
operand. Anything else must have matching shapes.

Gradients of leaf variables (created with :meth:`Tape.variable`) accumulate
across repeated ``backward`` calls until :meth:`Tape.zero_grad`. Gradients of
intermediate nodes are recomputed from scratch on each call.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, NumericError

Tensor = np.ndarray


class Variable:
    __slots__ = ("value", "grad", "tape", "tape_id", "parents", "backward_fn", "requires_grad", "is_leaf", "name")

    def __init__(self, value, tape, parents=(), backward_fn=None, requires_grad=True, is_leaf=False, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf
        self.name = name
        self.grad = np.zeros_like(value) if (is_leaf and requires_grad) else None
        self.tape_id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, id={self.tape_id})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Records operations for one forward pass. Single-threaded."""

    def __init__(self):
        self.nodes: list[Variable] = []

    def variable(self, value, requires_grad: bool = True, name: str | None = None) -> Variable:
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, "variable")
        return Variable(arr, self, requires_grad=requires_grad, is_leaf=True, name=name)

    def constant(self, value) -> Variable:
        return self.variable(value, requires_grad=False)

    def zero_grad(self) -> None:
        for node in self.nodes:
            if node.is_leaf and node.requires_grad:
                node.grad[...] = 0.0

    def backward(self, root: Variable) -> None:
        if root.tape is not self:
            raise InputError("root belongs to a different tape")
        if root.value.size != 1 or root.value.ndim != 0:
            raise InputError(f"backward needs a scalar root, got shape {root.shape}")
        pending: dict[int, np.ndarray] = {root.tape_id: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.tape_id + 1]):
            g = pending.pop(node.tape_id, None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad += g
                continue
            node.grad = g
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape_id in pending:
                    pending[parent.tape_id] = pending[parent.tape_id] + pg
                else:
                    pending[parent.tape_id] = pg


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")


def _lift(x, like: Variable) -> Variable:
    if isinstance(x, Variable):
        if x.tape is not like.tape:
            raise InputError("variables from different tapes cannot be combined")
        return x
    return like.tape.constant(x)


def _node(value, op: str, parents: Sequence[Variable], backward_fn) -> Variable:
    _check_finite(value, op)
    tape = parents[0].tape
    return Variable(value, tape, tuple(parents), backward_fn, requires_grad=any(p.requires_grad for p in parents))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape`` (leading axes only)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul(a: Variable, b) -> Variable:
    b = _lift(b, a)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise InputError(f"matmul needs operands of rank >= 2, got {av.shape} and {bv.shape}")
    if av.ndim > 2 and bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise InputError(f"matmul batch shapes differ: {av.shape} vs {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise InputError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        ga = _reduce_to(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _reduce_to(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _node(av @ bv, "matmul", (a, b), backward)


def _check_same_or_bias(a: Variable, b: Variable, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.value.ndim == 1 and a.value.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise InputError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def add(a: Variable, b) -> Variable:
    b = _lift(b, a)
    bias = _check_same_or_bias(a, b, "add")

    def backward(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return _node(a.value + b.value, "add", (a, b), backward)


def sub(a: Variable, b) -> Variable:
    b = _lift(b, a)
    bias = _check_same_or_bias(a, b, "sub")

    def backward(g):
        gb = -(g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g)
        return g, gb

    return _node(a.value - b.value, "sub", (a, b), backward)


def mul(a: Variable, b) -> Variable:
    b = _lift(b, a)
    if a.shape != b.shape:
        raise InputError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return _node(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a: Variable, s) -> Variable:
    """Multiply by a scalar constant or a scalar (0-d) variable."""
    if isinstance(s, Variable):
        if s.value.ndim != 0:
            raise InputError(f"scale factor must be a scalar, got shape {s.shape}")
        av, sv = a.value, s.value
        return _node(av * sv, "scale", (a, s), lambda g: (g * sv, np.sum(g * av)))
    s = float(s)
    return _node(a.value * s, "scale", (a,), lambda g: (g * s,))


def sigmoid(a: Variable) -> Variable:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Variable) -> Variable:
    out = np.tanh(a.value)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def log(a: Variable) -> Variable:
    x = a.value
    if np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    return _node(np.log(x), "log", (a,), lambda g: (g / x,))


def mean(a: Variable, axis: int | None = None) -> Variable:
    x = a.value
    if axis is None:
        n = x.size
        return _node(np.asarray(x.mean()), "mean", (a,), lambda g: (np.full_like(x, g / n),))
    n = x.shape[axis]
    return _node(x.mean(axis=axis), "mean", (a,), lambda g: (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),))


def sum_(a: Variable) -> Variable:
    x = a.value
    return _node(np.asarray(x.sum()), "sum", (a,), lambda g: (np.full_like(x, g),))


def concat(parts: Sequence[Variable], axis: int = 0) -> Variable:
    parts = list(parts)
    if not parts:
        raise InputError("concat of nothing")
    parts = [parts[0]] + [_lift(p, parts[0]) for p in parts[1:]]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise InputError(f"concat: {exc}") from exc
    edges = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, edges, axis=axis))

    return _node(out, "concat", parts, backward)


def slice_(a: Variable, index) -> Variable:
    x = a.value
    try:
        out = x[index]
    except IndexError as exc:
        raise InputError(f"slice: {exc}") from exc

    def backward(g):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), "slice", (a,), backward)


def reshape(a: Variable, shape: Sequence[int]) -> Variable:
    x = a.value
    try:
        out = x.reshape(shape)
    except ValueError as exc:
        raise InputError(f"reshape: {exc}") from exc
    return _node(out, "reshape", (a,), lambda g: (g.reshape(x.shape),))


def transpose(a: Variable, axes: Sequence[int] | None = None) -> Variable:
    axes = tuple(reversed(range(a.value.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def grad_check(
    f: Callable[[Tape, Variable], Variable],
    point,
    h: float = 1e-5,
) -> float:
    """Largest discrepancy between the reverse-mode gradient of a scalar
    function and central differences, ``|a - c| / max(1, |c|)``."""
    if not h > 0:
        raise InputError(f"step h must be > 0, got {h}")
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    xv = tape.variable(x0)
    root = f(tape, xv)
    tape.backward(root)
    analytic = xv.grad.copy()

    def evaluate(x):
        t = Tape()
        val = f(t, t.variable(x)).value
        if not np.all(np.isfinite(val)):
            raise NumericError("function is not finite at a perturbed point")
        return float(val)

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        cd = (evaluate(xp.reshape(x0.shape)) - evaluate(xm.reshape(x0.shape))) / (2 * h)
        err = abs(analytic.reshape(-1)[i] - cd) / max(1.0, abs(cd))
        worst = max(worst, err)
    return worst


def variables(tape: Tape, arrays: dict[str, np.ndarray]) -> dict[str, Variable]:
    return {k: tape.variable(v, name=k) for k, v in arrays.items()}


def values(vs: Iterable[Variable]) -> list[np.ndarray]:
    return [v.value for v in vs]
