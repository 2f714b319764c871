"""K-cell attacker space: block mixtures, cells, rollouts and fixed presets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .ops import (
    MOMENTUM_OPS,
    N_OPS,
    Budget,
    MomentumState,
    NoiseCell,
    OpKind,
    check_in_budget,
    project,
    unified_direction,
)

STEP_MULTIPLIERS = np.array([1e-4, 1e-3, 1e-2, 1e-1, 1.0])
N_STEPS = len(STEP_MULTIPLIERS)


def one_hot(index: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[index] = 1.0
    return v


@dataclass
class CellChoice:
    """Operation weights ``(7,)`` and step-size weights ``(5,)``.

    Either array may also carry a leading batch axis for per-example choices.
    """

    op_weights: np.ndarray
    step_weights: np.ndarray

    def __post_init__(self):
        self.op_weights = np.asarray(self.op_weights, dtype=np.float64)
        self.step_weights = np.asarray(self.step_weights, dtype=np.float64)
        for name, w, n in (("op", self.op_weights, N_OPS), ("step", self.step_weights, N_STEPS)):
            if w.shape[-1] != n:
                raise ValueError(f"{name} weights need {n} entries, got shape {w.shape}")
            if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
                raise ValueError(f"{name} weights must lie on the simplex")

    @classmethod
    def hard(cls, op: OpKind, step_index: int = N_STEPS - 1) -> "CellChoice":
        return cls(one_hot(int(op), N_OPS), one_hot(step_index, N_STEPS))

    def is_hard(self) -> bool:
        w = self.op_weights
        return bool(np.all((w == 0) | (w == 1)) and np.all(w.sum(axis=-1) == 1))


@dataclass
class AttackPlan:
    cells: list[CellChoice]
    budget: Budget

    def __post_init__(self):
        if len(self.cells) != self.budget.steps:
            raise ValueError(f"plan has {len(self.cells)} cells but budget.steps={self.budget.steps}")

    @property
    def op_ids(self) -> list[int]:
        return [int(np.argmax(c.op_weights)) for c in self.cells]


@dataclass
class AttackTrace:
    """Per-cell record of one rollout over a batch.

    ``ops`` is ``(K, B)`` in the stable 0..6 encoding, ``step_weights`` is
    ``(K, B, 5)``, ``losses`` is ``(K + 1, B)`` evaluated at ``x^(0..K)``.
    """

    ops: np.ndarray
    step_weights: np.ndarray
    losses: np.ndarray
    noise_seed: int
    op_weights: np.ndarray | None = None
    inputs: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def final_loss(self) -> np.ndarray:
        return self.losses[-1]


def stepsize_mixture(step_weights, eta: float):
    """``sum_i w_i * multiplier_i * eta``; per row for batched weights."""
    return np.asarray(step_weights, dtype=np.float64) @ (STEP_MULTIPLIERS * eta)


def _batched(w, batch):
    w = np.asarray(w, dtype=np.float64)
    return np.broadcast_to(w, (batch, w.shape[-1])) if w.ndim == 1 else w


def cell_apply(choice: CellChoice, grad, momentum: MomentumState, budget: Budget, rng):
    """Perturbation of one cell for a ``(B, D)`` gradient batch.

    Hard (one-hot) rows evaluate only their selected operation; relaxed rows
    mix the unified output of all seven.

    Returns:
        ``(delta, momentum)``
    """
    grad = np.asarray(grad, dtype=np.float64)
    single = grad.ndim == 1
    g = grad.reshape(1, -1) if single else grad
    mom = MomentumState(np.asarray(momentum.direction).reshape(g.shape), momentum.mu)
    batch = g.shape[0]
    w_op = _batched(choice.op_weights, batch)
    step = stepsize_mixture(_batched(choice.step_weights, batch), budget.eta)

    hard_rows = np.all((w_op == 0) | (w_op == 1), axis=1) & (w_op.sum(axis=1) == 1)
    selected = np.argmax(w_op, axis=1)
    needed = set(selected[hard_rows].tolist())
    if not hard_rows.all():
        needed = set(range(N_OPS))
    direction = np.zeros_like(g)
    new_m = mom.direction.copy()
    for kind in sorted(needed):
        d, m_k = unified_direction(OpKind(kind), g, mom, rng)
        rows_hard = hard_rows & (selected == kind)
        direction[rows_hard] = d[rows_hard]
        soft = ~hard_rows
        if soft.any():
            direction[soft] += w_op[soft, kind][:, None] * d[soft]
        if kind in MOMENTUM_OPS:
            # momentum advances where the (argmax) choice is a momentum op
            upd = selected == kind
            new_m[upd] = m_k.direction[upd]
    delta = step[:, None] * direction
    if single:
        delta = delta.reshape(grad.shape)
        new_m = new_m.reshape(grad.shape)
    return delta, MomentumState(new_m, mom.mu)


def _resolve_noise_seed(rng, noise_seed):
    if noise_seed is not None:
        return int(noise_seed)
    rng = rng if rng is not None else np.random.default_rng(0)
    return int(rng.integers(2**63 - 1))


def rollout(
    plan: AttackPlan,
    params: M.DefenseParams,
    x,
    y,
    loss_kind: str = "ce",
    rng: np.random.Generator | None = None,
    random_start: bool = False,
    noise_seed: int | None = None,
    mu: float = 1.0,
    keep_inputs: bool = False,
    check: bool = True,
):
    """Run a fixed plan from ``x`` and return ``(x_adv, trace)``.

    ``random_start`` adds ``Uniform(-eps, eps)`` noise (drawn from ``rng``)
    before the first cell, as in the PGD baseline.  Random operations draw
    from :class:`NoiseCell` streams keyed by ``noise_seed`` (taken from
    ``rng`` when omitted).
    """
    budget = plan.budget
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        xk = project(x0, x0 + rng.uniform(-budget.eps, budget.eps, size=x0.shape), budget)
    else:
        xk = x0.copy()
    seed = _resolve_noise_seed(rng, noise_seed)
    momentum = MomentumState.zeros_like(x0, mu)
    batch = x0.shape[0]
    ops = np.empty((budget.steps, batch), dtype=np.int64)
    steps = np.empty((budget.steps, batch, N_STEPS))
    losses = np.empty((budget.steps + 1, batch))
    inputs = [xk.copy()] if keep_inputs else None
    for k, choice in enumerate(plan.cells):
        loss, grad = M.loss_and_input_gradient(params, xk, y, loss_kind)
        losses[k] = loss
        delta, momentum = cell_apply(choice, grad, momentum, budget, NoiseCell(seed, k))
        xk = project(x0, xk + delta, budget)
        if check:
            check_in_budget(x0, xk, budget)
        ops[k] = np.argmax(_batched(choice.op_weights, batch), axis=1)
        steps[k] = _batched(choice.step_weights, batch)
        if keep_inputs:
            inputs.append(xk.copy())
    losses[-1] = M.per_example_loss(params, xk, y, loss_kind)
    return xk, AttackTrace(ops, steps, losses, seed, inputs=inputs)


def step_index(step: float, eta: float) -> int:
    """Grid index of ``step`` among ``multiplier * eta``."""
    grid = STEP_MULTIPLIERS * eta
    hits = np.flatnonzero(np.isclose(grid, step, rtol=1e-12, atol=0.0))
    if hits.size == 0:
        raise ValueError(f"step {step} is not on the grid {grid.tolist()}")
    return int(hits[0])


def preset_pgd(steps: int, step: float = 2 / 255, eps: float = 8 / 255, eta: float | None = None) -> AttackPlan:
    """FGSM with one fixed step size in every cell."""
    eta = step if eta is None else eta
    budget = Budget(eps=eps, eta=eta, steps=steps)
    idx = step_index(step, eta)
    return AttackPlan([CellChoice.hard(OpKind.FGSM, idx) for _ in range(steps)], budget)


def preset_rfgsm(steps: int, step: float = 2 / 255, eps: float = 8 / 255, eta: float | None = None) -> AttackPlan:
    """Gaussian, then FGSM, then Identity for the remaining cells."""
    if steps < 2:
        raise ValueError("R+FGSM needs at least 2 cells")
    eta = step if eta is None else eta
    budget = Budget(eps=eps, eta=eta, steps=steps)
    idx = step_index(step, eta)
    kinds = [OpKind.GAUSSIAN, OpKind.FGSM] + [OpKind.IDENTITY] * (steps - 2)
    return AttackPlan([CellChoice.hard(k, idx) for k in kinds], budget)


def plan_from_ids(op_ids, step_ids, budget: Budget) -> AttackPlan:
    return AttackPlan([CellChoice.hard(OpKind(o), s) for o, s in zip(op_ids, step_ids)], budget.with_steps(len(op_ids)))


def enumerate_op_sequences(steps: int):
    """All ``7**steps`` operation sequences."""
    return itertools.product(range(N_OPS), repeat=steps)


def enumerate_plans(budget: Budget):
    """All one-hot operation x one-hot step-size plans (``35**K`` of them)."""
    cells = list(itertools.product(range(N_OPS), range(N_STEPS)))
    for combo in itertools.product(cells, repeat=budget.steps):
        yield plan_from_ids([c[0] for c in combo], [c[1] for c in combo], budget)
