"""MLP defense classifier, losses, input gradients and optimizers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

logger = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "cw")


class NonFiniteGradientError(ArithmeticError):
    pass


@dataclass
class DefenseParams:
    """Weights ``(in, out)`` and biases ``(out,)`` for each dense layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} does not chain")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, activation: str = "relu") -> "DefenseParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def copy(self) -> "DefenseParams":
        return DefenseParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


def init_mlp(sizes=(784, 256, 128, 10), rng: np.random.Generator | None = None) -> DefenseParams:
    """He-initialised MLP with zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return DefenseParams(weights, biases)


def logits_node(tape: Tape, layers: list[tuple[Var, Var]], x: Var) -> Var:
    h = x
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def _bind(tape: Tape, params: DefenseParams, requires_grad: bool = False):
    return [
        (tape.leaf(w, requires_grad), tape.leaf(b, requires_grad))
        for w, b in zip(params.weights, params.biases)
    ]


def _check_input(params: DefenseParams, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != params.sizes[0]:
        raise ad.ShapeError("classify", [x.shape, (None, params.sizes[0])])


def classify(params: DefenseParams, x) -> np.ndarray:
    x = ad.as_tensor(x)
    _check_input(params, x)
    tape = Tape()
    return logits_node(tape, _bind(tape, params), tape.constant(x)).value


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    return labels


def per_example_loss_node(z: Var, labels, kind: str = "ce") -> Var:
    """Per-example loss vector ``(B,)``; both kinds are maximised by attackers."""
    labels = _check_labels(labels, z.shape[1])
    if kind == "ce":
        return -ad.pick(ad.log_softmax(z), labels)
    if kind == "cw":
        return ad.max_excluding(z, labels) - ad.pick(z, labels)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def loss_node(z: Var, labels, kind: str = "ce") -> Var:
    return ad.mean(per_example_loss_node(z, labels, kind))


def _scalar_loss(logits, labels, kind):
    if isinstance(logits, Var):
        return loss_node(logits, labels, kind)
    tape = Tape()
    z = tape.constant(np.atleast_2d(ad.as_tensor(logits)))
    return float(loss_node(z, np.atleast_1d(labels), kind).value)


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class (float, or a node for node input)."""
    return _scalar_loss(logits, labels, "ce")


def cw_margin_loss(logits, labels):
    """Mean of ``max_{j != y} z_j - z_y``."""
    return _scalar_loss(logits, labels, "cw")


def per_example_loss(params: DefenseParams, x, labels, kind: str = "ce") -> np.ndarray:
    x = ad.as_tensor(x)
    _check_input(params, x)
    tape = Tape()
    z = logits_node(tape, _bind(tape, params), tape.constant(x))
    return per_example_loss_node(z, labels, kind).value.copy()


def loss_and_input_gradient(params: DefenseParams, x, labels, kind: str = "ce"):
    """Per-example losses and the gradient of the mean loss w.r.t. ``x``."""
    x = ad.as_tensor(x)
    _check_input(params, x)
    tape = Tape()
    xv = tape.leaf(x, requires_grad=True)
    per = per_example_loss_node(logits_node(tape, _bind(tape, params), xv), labels, kind)
    grads = tape.backward(ad.mean(per))
    return per.value.copy(), grads[xv.id]


def input_gradient(params: DefenseParams, x, labels, kind: str = "ce") -> np.ndarray:
    return loss_and_input_gradient(params, x, labels, kind)[1]


def loss_and_param_gradient(params: DefenseParams, x, labels, kind: str = "ce"):
    """Mean loss and gradients for ``params.arrays()`` (input held constant)."""
    x = ad.as_tensor(x)
    _check_input(params, x)
    tape = Tape()
    layers = _bind(tape, params, requires_grad=True)
    root = loss_node(logits_node(tape, layers, tape.constant(x)), labels, kind)
    grads = tape.backward(root)
    flat = [v for pair in layers for v in pair]
    return float(root.value), [grads[v.id] for v in flat]


def accuracy(params: DefenseParams, x, labels) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(classify(params, x).argmax(axis=1) == np.asarray(labels)))


# optimizers ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """State for ``sgd`` (heavy-ball momentum) or ``adamw`` (decoupled decay)."""

    kind: str = "sgd"
    lr: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd(lr=0.1, momentum=0.9, weight_decay=5e-4) -> OptimizerState:
    return OptimizerState("sgd", lr=lr, momentum=momentum, weight_decay=weight_decay)


def adamw(lr=1e-3, weight_decay=1e-2, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    return OptimizerState("adamw", lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState) -> list[np.ndarray]:
    """One update; buffers in ``state`` are advanced in place.

    Raises:
        NonFiniteGradientError: if any gradient entry is non-finite.  The
            state is left untouched.
    """
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ad.ShapeError("optimizer_step", [p.shape for p in params] + [g.shape for g in grads])
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteGradientError("non-finite gradient; step refused")
    if not state.first:
        state.first = [np.zeros_like(p) for p in params]
        if state.kind == "adamw":
            state.second = [np.zeros_like(p) for p in params]
    state.step += 1
    out = []
    if state.kind == "sgd":
        for i, (p, g) in enumerate(zip(params, grads)):
            v = state.momentum * state.first[i] + g
            state.first[i] = v
            out.append(p - state.lr * (v + state.weight_decay * p))
        return out
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.beta1 * state.first[i] + (1 - state.beta1) * g
        v = state.beta2 * state.second[i] + (1 - state.beta2) * g * g
        state.first[i], state.second[i] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append(p - state.lr * (update + state.weight_decay * p))
    return out
