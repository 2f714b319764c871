"""The automated attacker: attention scores, Gumbel sampling and alpha training.

Each cell ``k`` owns a query projection ``W_q`` ``(D, E)`` and two key tables,
``W_op`` ``(E, 7)`` for the perturbation block and ``W_os`` ``(E, 5)`` for
the step-size block.  Scores are ``(grad @ W_q) @ W_op`` and
``(grad @ W_q) @ W_os`` with the gradient held constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tape
from .ops import (
    MOMENTUM_OPS,
    N_OPS,
    Budget,
    MomentumState,
    NoiseCell,
    OpKind,
    check_in_budget,
    l2_rows,
    projection_bounds,
    project,
    unified_direction,
)
from .space import N_STEPS, STEP_MULTIPLIERS, AttackTrace, CellChoice, _resolve_noise_seed, cell_apply

logger = logging.getLogger(__name__)

GUMBEL_TAU = 1.0
STEP_TAU = 0.1


@dataclass
class AttackerParams:
    query: list[np.ndarray]  # (D, E) per cell
    op_keys: list[np.ndarray]  # (E, 7) per cell
    step_keys: list[np.ndarray]  # (E, 5) per cell

    def __post_init__(self):
        if not (len(self.query) == len(self.op_keys) == len(self.step_keys)) or not self.query:
            raise ValueError("need the same positive number of query / key matrices")
        d, e = self.query[0].shape
        for k, (q, o, s) in enumerate(zip(self.query, self.op_keys, self.step_keys)):
            if q.shape != (d, e) or o.shape != (e, N_OPS) or s.shape != (e, N_STEPS):
                raise ValueError(f"cell {k}: shapes {q.shape}, {o.shape}, {s.shape} do not match D={d}, E={e}")

    @property
    def steps(self) -> int:
        return len(self.query)

    @property
    def input_dim(self) -> int:
        return self.query[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.query[0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for q, o, s in zip(self.query, self.op_keys, self.step_keys):
            out += [q, o, s]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "AttackerParams":
        arrays = list(arrays)
        return cls(arrays[0::3], arrays[1::3], arrays[2::3])

    def copy(self) -> "AttackerParams":
        return AttackerParams.from_arrays([a.copy() for a in self.arrays()])


def init_attacker(steps: int, input_dim: int, embed_dim: int = 16, rng=None, scale: float = 1.0) -> AttackerParams:
    """Random attacker whose initial scores are roughly standard normal.

    With a unit-norm query input, ``W_q ~ N(0, scale^2)`` and keys
    ``~ N(0, 1/E)`` give scores of variance ``scale^2``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    q = [rng.normal(0.0, scale, (input_dim, embed_dim)) for _ in range(steps)]
    o = [rng.normal(0.0, embed_dim**-0.5, (embed_dim, N_OPS)) for _ in range(steps)]
    s = [rng.normal(0.0, embed_dim**-0.5, (embed_dim, N_STEPS)) for _ in range(steps)]
    return AttackerParams(q, o, s)


def param_count(alpha: AttackerParams) -> int:
    return int(sum(a.size for a in alpha.arrays()))


def normalize_query(grad) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    g = g.reshape(g.shape[0], -1) if g.ndim > 1 else g.reshape(1, -1)
    n = l2_rows(g)
    out = np.zeros_like(g)
    out[n > 0] = g[n > 0] / n[n > 0, None]
    return out


def attention_scores(grad, query, op_keys, step_keys):
    """Scores ``(B, 7)`` and ``(B, 5)`` for a gradient batch (raw, unnormalised)."""
    g = np.asarray(grad, dtype=np.float64)
    g = g.reshape(1, -1) if g.ndim == 1 else g
    if g.shape[1] != query.shape[0]:
        raise ad.ShapeError("attention_scores", [g.shape, query.shape])
    q = g @ query
    return q @ op_keys, q @ step_keys


def gumbel_noise(rng, shape) -> np.ndarray:
    u = rng.uniform(0.0, 1.0, size=shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def _softmax(z):
    z = np.atleast_2d(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sample_op(e_op, tau_g: float = GUMBEL_TAU, rng=None, kappa=None):
    """Gumbel-max / Gumbel-softmax sample of one operation per row.

    Returns:
        ``(hard one-hot, relaxed weights, kappa)``.
    """
    if tau_g <= 0:
        raise ValueError("Gumbel temperature must be positive")
    e = np.atleast_2d(np.asarray(e_op, dtype=np.float64))
    if kappa is None:
        kappa = gumbel_noise(rng if rng is not None else np.random.default_rng(), e.shape)
    z = e + kappa
    hard = np.zeros_like(z)
    hard[np.arange(z.shape[0]), z.argmax(axis=1)] = 1.0
    return hard, _softmax(z / tau_g), kappa


def stepsize_weights(e_os, tau: float = STEP_TAU) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return _softmax(np.asarray(e_os, dtype=np.float64) / tau)


# generation ----------------------------------------------------------------


def generate(
    alpha: AttackerParams,
    params: M.DefenseParams,
    x,
    y,
    budget: Budget,
    loss_kind: str = "ce",
    rng=None,
    mode: str = "hard",
    tau_g: float = GUMBEL_TAU,
    tau: float = STEP_TAU,
    mu: float = 1.0,
    noise_seed: int | None = None,
    straight_through: bool = True,
    check: bool = True,
):
    """Construct per-example attacks with the current attacker.

    ``mode="hard"`` applies exactly one sampled operation per cell.
    ``mode="relaxed"`` runs the differentiable pass used for alpha training
    and returns the same ``(x_adv, trace)`` pair.
    """
    if mode == "relaxed":
        res = _relaxed_pass(alpha, params, x, y, budget, loss_kind, rng, 1, tau_g, tau, mu, noise_seed, straight_through, check)
        return res.x_adv[0], res.traces[0]
    if mode != "hard":
        raise ValueError(f"unknown mode {mode!r}")
    if alpha.steps != budget.steps:
        raise ValueError(f"attacker has {alpha.steps} cells, budget has {budget.steps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    seed = _resolve_noise_seed(rng, noise_seed)
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    xk = x0.copy()
    momentum = MomentumState.zeros_like(x0, mu)
    batch = x0.shape[0]
    ops = np.empty((budget.steps, batch), dtype=np.int64)
    steps = np.empty((budget.steps, batch, N_STEPS))
    losses = np.empty((budget.steps + 1, batch))
    for k in range(budget.steps):
        loss, grad = M.loss_and_input_gradient(params, xk, y, loss_kind)
        losses[k] = loss
        e_op, e_os = attention_scores(normalize_query(grad), alpha.query[k], alpha.op_keys[k], alpha.step_keys[k])
        hard, _, _ = sample_op(e_op, tau_g, rng)
        w_os = stepsize_weights(e_os, tau)
        delta, momentum = cell_apply(CellChoice(hard, w_os), grad, momentum, budget, NoiseCell(seed, k))
        xk = project(x0, xk + delta, budget)
        if check:
            check_in_budget(x0, xk, budget)
        ops[k] = hard.argmax(axis=1)
        steps[k] = w_os
    losses[-1] = M.per_example_loss(params, xk, y, loss_kind)
    return xk, AttackTrace(ops, steps, losses, seed)


class RelaxedPass(NamedTuple):
    objective: float
    grads: list[np.ndarray]  # aligned with alpha.arrays()
    tape: Tape
    leaf_ids: list[int]
    x_adv: list[np.ndarray]
    traces: list[AttackTrace]


def _relaxed_pass(alpha, params, x, y, budget, loss_kind, rng, samples, tau_g, tau, mu, noise_seed, straight_through, check):
    if alpha.steps != budget.steps:
        raise ValueError(f"attacker has {alpha.steps} cells, budget has {budget.steps}")
    if samples < 1:
        raise ValueError("need at least one Monte Carlo sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    batch = x0.shape[0]
    tape = Tape()
    leaves = [tape.leaf(a, requires_grad=True) for a in alpha.arrays()]
    layers = [(tape.constant(w), tape.constant(b)) for w, b in zip(params.weights, params.biases)]
    lo, hi = projection_bounds(x0, budget)
    step_grid = tape.constant((STEP_MULTIPLIERS * budget.eta).reshape(-1, 1))
    totals = []
    xs, traces = [], []
    for m in range(samples):
        seed = _resolve_noise_seed(rng, noise_seed if m == 0 else None)
        xk = tape.constant(x0)
        momentum = MomentumState.zeros_like(x0, mu)
        ops = np.empty((budget.steps, batch), dtype=np.int64)
        steps = np.empty((budget.steps, batch, N_STEPS))
        weights = np.empty((budget.steps, batch, N_OPS))
        losses = np.empty((budget.steps + 1, batch))
        for k in range(budget.steps):
            wq, wop, wos = leaves[3 * k : 3 * k + 3]
            loss, grad = M.loss_and_input_gradient(params, xk.value, y, loss_kind)
            losses[k] = loss
            q = ad.matmul(tape.constant(normalize_query(grad)), wq)
            e_op = ad.matmul(q, wop)
            e_os = ad.matmul(q, wos)
            kappa = gumbel_noise(rng, (batch, N_OPS))
            soft = ad.softmax(ad.scale(e_op + tape.constant(kappa), 1.0 / tau_g))
            gamma_op = ad.straight_through(soft) if straight_through else soft
            gamma_os = ad.softmax(ad.scale(e_os, 1.0 / tau))
            step = ad.reshape(ad.matmul(gamma_os, step_grid), (batch,))
            noise = NoiseCell(seed, k)
            stack = np.empty((N_OPS, batch, x0.shape[1]))
            chosen = soft.value.argmax(axis=1)
            new_m = momentum.direction.copy()
            for kind in OpKind:
                d, m_k = unified_direction(kind, grad, momentum, noise)
                stack[int(kind)] = d
                if kind in MOMENTUM_OPS:
                    upd = chosen == int(kind)
                    new_m[upd] = m_k.direction[upd]
            momentum = MomentumState(new_m, mu)
            delta = ad.row_scale(step, ad.mix(gamma_op, tape.constant(stack)))
            xk = ad.clip(xk + delta, lo, hi)
            if check:
                check_in_budget(x0, xk.value, budget)
            ops[k] = chosen
            steps[k] = gamma_os.value
            weights[k] = soft.value
        z = M.logits_node(tape, layers, xk)
        per = M.per_example_loss_node(z, y, loss_kind)
        losses[-1] = per.value
        totals.append(ad.mean(per))
        xs.append(xk.value.copy())
        traces.append(AttackTrace(ops, steps, losses, seed, op_weights=weights))
    total = totals[0]
    for t in totals[1:]:
        total = total + t
    objective = ad.scale(total, -1.0 / samples)
    grads = tape.backward(objective)
    return RelaxedPass(float(objective.value), [grads[v.id] for v in leaves], tape, [v.id for v in leaves], xs, traces)


def attacker_objective(
    alpha: AttackerParams,
    params: M.DefenseParams,
    x,
    y,
    budget: Budget,
    samples: int = 1,
    loss_kind: str = "ce",
    rng=None,
    tau_g: float = GUMBEL_TAU,
    tau: float = STEP_TAU,
    mu: float = 1.0,
    noise_seed: int | None = None,
    straight_through: bool = True,
    check: bool = True,
) -> RelaxedPass:
    """Monte Carlo estimate of the negated adversarial loss and its alpha-gradient.

    Input gradients entering each cell are constants.  The returned tape can
    be replayed with perturbed alpha leaves; every noise draw and cell
    gradient stays pinned.
    """
    return _relaxed_pass(alpha, params, x, y, budget, loss_kind, rng, samples, tau_g, tau, mu, noise_seed, straight_through, check)


def update_alpha(alpha: AttackerParams, grads, state: M.OptimizerState) -> AttackerParams:
    """One adaptive-moment step on the objective; a non-finite gradient skips the step."""
    try:
        new = M.optimizer_step(alpha.arrays(), list(grads), state)
    except M.NonFiniteGradientError:
        logger.warning("non-finite attacker gradient; alpha update skipped")
        return alpha
    return AttackerParams.from_arrays(new)
