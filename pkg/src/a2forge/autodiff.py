"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every operation as a :class:`Node` with an
append-only integer id.  Leaves are bound to arrays; ``backward`` walks the
nodes in decreasing id order, and ``replay`` re-runs the recorded graph with
new leaf bindings (used for gradient checks with all noise pinned).

Broadcasting is deliberately limited to adding a bias vector to every row of
a batch; every other op requires exactly matching shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray


class AutodiffError(Exception):
    """Base class for errors raised by the tape."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError, ArithmeticError):
    def __init__(self, op: str, node_id: int):
        self.op = op
        self.node_id = node_id
        super().__init__(f"{op} (node {node_id}) produced a non-finite value")


class ContractError(AutodiffError):
    pass


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...]
    value: Tensor
    requires_grad: bool
    attrs: dict = field(default_factory=dict)


def as_tensor(x) -> Tensor:
    return np.array(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# op registry: kind -> (forward(xs, **attrs), backward(g, xs, out, **attrs))
# backward returns one gradient (or None) per input.

_OPS: dict[str, tuple[Callable, Callable]] = {}


def _register(kind):
    def deco(pair):
        fwd, bwd = pair()
        _OPS[kind] = (fwd, bwd)
        return pair

    return deco


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(kind, [a.shape, b.shape])


@_register("add")
def _add():
    def fwd(xs):
        a, b = xs
        if a.shape == b.shape:
            return a + b
        if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            return a + b  # bias over the batch dimension
        raise ShapeError("add", [a.shape, b.shape])

    def bwd(g, xs, out):
        a, b = xs
        gb = g if b.shape == g.shape else g.sum(axis=0)
        return [g, gb]

    return fwd, bwd


@_register("sub")
def _sub():
    def fwd(xs):
        _same_shape("sub", *xs)
        return xs[0] - xs[1]

    return fwd, lambda g, xs, out: [g, -g]


@_register("mul")
def _mul():
    def fwd(xs):
        _same_shape("mul", *xs)
        return xs[0] * xs[1]

    return fwd, lambda g, xs, out: [g * xs[1], g * xs[0]]


@_register("scale")
def _scale():
    def fwd(xs, c):
        return xs[0] * c

    return fwd, lambda g, xs, out, c: [g * c]


@_register("matmul")
def _matmul():
    def fwd(xs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", [a.shape, b.shape])
        with np.errstate(over="ignore", invalid="ignore"):
            return a @ b

    def bwd(g, xs, out):
        a, b = xs
        return [g @ b.T, a.T @ g]

    return fwd, bwd


@_register("relu")
def _relu():
    def fwd(xs):
        return np.maximum(xs[0], 0.0)

    # subgradient 0 at 0
    return fwd, lambda g, xs, out: [g * (xs[0] > 0)]


@_register("exp")
def _exp():
    def fwd(xs):
        with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
            return np.exp(xs[0])

    return fwd, (lambda g, xs, out: [g * out])


@_register("log_softmax")
def _log_softmax():
    def fwd(xs):
        z = xs[0]
        if z.ndim != 2:
            raise ShapeError("log_softmax", [z.shape], "expected (batch, classes)")
        m = z.max(axis=1, keepdims=True)
        shifted = z - m
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def bwd(g, xs, out):
        p = np.exp(out)
        return [g - p * g.sum(axis=1, keepdims=True)]

    return fwd, bwd


@_register("softmax")
def _softmax():
    def fwd(xs):
        z = xs[0]
        if z.ndim != 2:
            raise ShapeError("softmax", [z.shape], "expected (batch, n)")
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def bwd(g, xs, out):
        return [out * (g - (g * out).sum(axis=1, keepdims=True))]

    return fwd, bwd


@_register("sum")
def _sum():
    def fwd(xs, axis=None):
        return np.asarray(xs[0].sum(axis=axis))

    def bwd(g, xs, out, axis=None):
        x = xs[0]
        if axis is None:
            return [np.full(x.shape, float(g))]
        return [np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()]

    return fwd, bwd


@_register("mean")
def _mean():
    def fwd(xs):
        return np.asarray(xs[0].mean())

    return fwd, lambda g, xs, out: [np.full(xs[0].shape, float(g) / xs[0].size)]


@_register("sign_detached")
def _sign():
    return (lambda xs: np.sign(xs[0])), (lambda g, xs, out: [np.zeros_like(xs[0])])


@_register("l2_norm")
def _l2():
    # row-wise norm for 2-D inputs, whole-array norm otherwise
    def fwd(xs):
        x = xs[0]
        if x.ndim == 2:
            return np.sqrt((x * x).sum(axis=1))
        return np.asarray(np.sqrt((x * x).sum()))

    def bwd(g, xs, out):
        x = xs[0]
        safe = np.where(out > 0, out, 1.0)
        if x.ndim == 2:
            return [x * (g / safe)[:, None] * (out > 0)[:, None]]
        return [x * (g / safe) * (out > 0)]

    return fwd, bwd


@_register("reshape")
def _reshape():
    def fwd(xs, shape):
        x = xs[0]
        if int(np.prod(shape)) != x.size:
            raise ShapeError("reshape", [x.shape, shape])
        return x.reshape(shape)

    return fwd, lambda g, xs, out, shape: [g.reshape(xs[0].shape)]


@_register("pick")
def _pick():
    # z[i, labels[i]]
    def fwd(xs, labels):
        z = xs[0]
        if z.ndim != 2 or len(labels) != z.shape[0]:
            raise ShapeError("pick", [z.shape, (len(labels),)])
        return z[np.arange(z.shape[0]), labels]

    def bwd(g, xs, out, labels):
        gz = np.zeros_like(xs[0])
        gz[np.arange(gz.shape[0]), labels] = g
        return [gz]

    return fwd, bwd


@_register("max_excluding")
def _max_excluding():
    # max_{j != labels[i]} z[i, j]
    def fwd(xs, labels):
        z = xs[0]
        if z.ndim != 2 or z.shape[1] < 2 or len(labels) != z.shape[0]:
            raise ShapeError("max_excluding", [z.shape, (len(labels),)])
        masked = z.copy()
        masked[np.arange(z.shape[0]), labels] = -np.inf
        return masked.max(axis=1)

    def bwd(g, xs, out, labels):
        z = xs[0]
        masked = z.copy()
        masked[np.arange(z.shape[0]), labels] = -np.inf
        gz = np.zeros_like(z)
        gz[np.arange(z.shape[0]), masked.argmax(axis=1)] = g
        return [gz]

    return fwd, bwd


@_register("row_scale")
def _row_scale():
    # s[i] * x[i, :]
    def fwd(xs):
        s, x = xs
        if s.ndim != 1 or x.ndim != 2 or s.shape[0] != x.shape[0]:
            raise ShapeError("row_scale", [s.shape, x.shape])
        return s[:, None] * x

    return fwd, lambda g, xs, out: [(g * xs[1]).sum(axis=1), g * xs[0][:, None]]


@_register("mix")
def _mix():
    # out[b, :] = sum_o w[b, o] * stack[o, b, :]
    def fwd(xs):
        w, stack = xs
        if w.ndim != 2 or stack.ndim != 3 or stack.shape[:2] != (w.shape[1], w.shape[0]):
            raise ShapeError("mix", [w.shape, stack.shape])
        return np.einsum("bo,obd->bd", w, stack)

    def bwd(g, xs, out):
        w, stack = xs
        return [np.einsum("bd,obd->bo", g, stack), np.einsum("bd,bo->obd", g, w)]

    return fwd, bwd


@_register("clip")
def _clip():
    # gradient passes only where the input was not clipped
    def fwd(xs, lo, hi):
        x = xs[0]
        if np.shape(lo) not in ((), x.shape) or np.shape(hi) not in ((), x.shape):
            raise ShapeError("clip", [x.shape, np.shape(lo), np.shape(hi)])
        return np.minimum(np.maximum(x, lo), hi)

    def bwd(g, xs, out, lo, hi):
        return [g * (out == xs[0])]

    return fwd, bwd


@_register("straight_through")
def _straight_through():
    # forward: one-hot argmax of each row; backward: identity to the soft input
    def fwd(xs):
        p = xs[0]
        if p.ndim != 2:
            raise ShapeError("straight_through", [p.shape])
        hard = np.zeros_like(p)
        hard[np.arange(p.shape[0]), p.argmax(axis=1)] = 1.0
        return hard

    return fwd, lambda g, xs, out: [g]


# ---------------------------------------------------------------------------


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> Tensor:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, kind={self.tape.nodes[self.id].kind}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.constant(np.broadcast_to(as_tensor(other), self.shape).copy())

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, c: float):
        return scale(self, 1.0 / float(c))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of operations.

    Args:
        check_finite: raise :class:`NonFiniteError` as soon as any op yields
            a non-finite value.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    @property
    def differentiable_leaves(self) -> set[int]:
        return {n.id for n in self.nodes if n.kind == "leaf" and n.requires_grad}

    def leaf(self, value, requires_grad: bool = False) -> Var:
        node = Node(len(self.nodes), "leaf", (), as_tensor(value), requires_grad)
        self.nodes.append(node)
        return Var(self, node.id)

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def apply(self, kind: str, *inputs: Var, **attrs) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise AutodiffError(f"{kind}: input from a different tape")
        fwd, _ = _OPS[kind]
        value = fwd([self.nodes[v.id].value for v in inputs], **attrs)
        node = Node(
            len(self.nodes),
            kind,
            tuple(v.id for v in inputs),
            np.asarray(value, dtype=np.float64),
            any(self.nodes[v.id].requires_grad for v in inputs),
            attrs,
        )
        if self.check_finite and not np.all(np.isfinite(node.value)):
            raise NonFiniteError(kind, node.id)
        self.nodes.append(node)
        return Var(self, node.id)

    def replay(self, bindings: Mapping[int, Tensor] | None = None) -> Tensor:
        """Re-run every recorded op with (possibly new) leaf values.

        Returns the value of the last node.  Intermediate caches are replaced,
        so a subsequent :meth:`backward` differentiates at the new point.
        """
        bindings = bindings or {}
        for node in self.nodes:
            if node.kind == "leaf":
                if node.id in bindings:
                    new = as_tensor(bindings[node.id])
                    if new.shape != node.value.shape:
                        raise ShapeError("bind", [node.value.shape, new.shape])
                    node.value = new
                continue
            fwd, _ = _OPS[node.kind]
            node.value = np.asarray(
                fwd([self.nodes[i].value for i in node.inputs], **node.attrs), dtype=np.float64
            )
            if self.check_finite and not np.all(np.isfinite(node.value)):
                raise NonFiniteError(node.kind, node.id)
        return self.nodes[-1].value

    def backward(self, root: Var) -> dict[int, Tensor]:
        """Gradients of a scalar ``root`` for every differentiable leaf."""
        root_node = self.nodes[root.id]
        if root_node.value.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root_node.value.shape}")
        grads: dict[int, Tensor] = {root.id: np.ones_like(root_node.value)}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            if node.kind == "leaf":
                grads[node.id] = g  # parked; collected below
                continue
            _, bwd = _OPS[node.kind]
            xs = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, bwd(g, xs, node.value, **node.attrs)):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                gi = np.asarray(gi, dtype=np.float64).reshape(self.nodes[i].value.shape)
                grads[i] = grads[i] + gi if i in grads else gi
        out = {}
        for i in self.differentiable_leaves:
            out[i] = grads.get(i, np.zeros_like(self.nodes[i].value))
        return out


# functional front-end ------------------------------------------------------


def _op(kind):
    def f(*inputs, **attrs):
        return inputs[0].tape.apply(kind, *inputs, **attrs)

    f.__name__ = kind
    return f


add = _op("add")
sub = _op("sub")
mul = _op("mul")
matmul = _op("matmul")
relu = _op("relu")
exp = _op("exp")
log_softmax = _op("log_softmax")
softmax = _op("softmax")
sign_detached = _op("sign_detached")
l2_norm = _op("l2_norm")
row_scale = _op("row_scale")
mix = _op("mix")
straight_through = _op("straight_through")


def scale(x: Var, c: float) -> Var:
    return x.tape.apply("scale", x, c=float(c))


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    return x.tape.apply("sum", x, axis=axis)


def mean(x: Var) -> Var:
    return x.tape.apply("mean", x)


def reshape(x: Var, shape: tuple) -> Var:
    return x.tape.apply("reshape", x, shape=tuple(shape))


def pick(z: Var, labels) -> Var:
    return z.tape.apply("pick", z, labels=np.asarray(labels, dtype=np.int64))


def max_excluding(z: Var, labels) -> Var:
    return z.tape.apply("max_excluding", z, labels=np.asarray(labels, dtype=np.int64))


def clip(x: Var, lo, hi) -> Var:
    return x.tape.apply("clip", x, lo=lo, hi=hi)


def value_and_grad(fn: Callable[..., Var], *arrays) -> tuple[float, list[Tensor]]:
    """Evaluate ``fn(*vars)`` on a fresh tape and differentiate w.r.t. every argument."""
    tape = Tape()
    xs = [tape.leaf(a, requires_grad=True) for a in arrays]
    out = fn(*xs)
    grads = tape.backward(out)
    return float(out.value), [grads[x.id] for x in xs]


def finite_diff_check(fn: Callable[[Var], Var], point, h: float = 1e-5) -> float:
    """Max relative discrepancy between the tape gradient and central differences.

    ``fn`` maps a single leaf to a scalar node.  The error per coordinate is
    ``|ad - cd| / max(1, |cd|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    point = as_tensor(point)
    _, (ad,) = value_and_grad(fn, point)

    def f(x):
        tape = Tape()
        return float(fn(tape.leaf(x)).value)

    flat = point.ravel()
    cd = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        cd[i] = (f(up.reshape(point.shape)) - f(dn.reshape(point.shape))) / (2 * h)
    cd = cd.reshape(point.shape)
    if cd.size == 0:
        return 0.0
    return float(np.max(np.abs(ad - cd) / np.maximum(1.0, np.abs(cd))))
