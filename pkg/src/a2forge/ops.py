"""Primitive perturbation operations, magnitude unification and projection.

All functions work row-wise on ``(batch, features)`` arrays: norms, signs and
momentum are per example.  1-D inputs are treated as a single example.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class OpKind(IntEnum):
    FGSM = 0
    FGM = 1
    FGSMM = 2
    FGMM = 3
    GAUSSIAN = 4
    UNIFORM = 5
    IDENTITY = 6


N_OPS = len(OpKind)
MOMENTUM_OPS = (OpKind.FGSMM, OpKind.FGMM)
RANDOM_OPS = (OpKind.GAUSSIAN, OpKind.UNIFORM)


@dataclass(frozen=True)
class Budget:
    """L-inf threat model: bound ``eps``, base step ``eta``, ``steps`` cells, data range."""

    eps: float = 8 / 255
    eta: float = 2 / 255
    steps: int = 10
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.lo < self.hi:
            raise ValueError(f"empty data range [{self.lo}, {self.hi}]")

    def with_steps(self, steps: int) -> "Budget":
        return Budget(self.eps, self.eta, steps, self.lo, self.hi)


@dataclass
class MomentumState:
    """Accumulated direction per example, zero at the first cell."""

    direction: np.ndarray
    mu: float = 1.0

    @classmethod
    def zeros_like(cls, x, mu: float = 1.0) -> "MomentumState":
        return cls(np.zeros_like(np.asarray(x, dtype=np.float64)), mu)


def _rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim == 1 else a


def _safe_divide_rows(a: np.ndarray, norms: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    nz = norms > 0
    out[nz] = a[nz] / norms[nz, None]
    return out


def l2_rows(a) -> np.ndarray:
    a = _rows(a)
    return np.sqrt((a * a).sum(axis=1))


def momentum_update(grad, momentum: MomentumState) -> np.ndarray:
    """``mu * m + g / ||g||_1`` per row (rows with a zero gradient add nothing)."""
    g = _rows(grad)
    m = _rows(momentum.direction)
    return momentum.mu * m + _safe_divide_rows(g, np.abs(g).sum(axis=1))


def raw_direction(kind: OpKind, grad, momentum: MomentumState | None = None, rng=None):
    """Un-normalised direction of one operation.

    ``rng`` is anything exposing ``standard_normal(shape)`` and
    ``uniform(lo, hi, size)`` (a numpy Generator or a pinned noise cell).

    Returns:
        ``(direction, momentum)``; momentum is replaced only for FGSMM/FGMM.
    """
    kind = OpKind(kind)
    grad = np.asarray(grad, dtype=np.float64)
    g = _rows(grad)
    if kind == OpKind.FGSM:
        d = np.sign(g)
    elif kind == OpKind.FGM:
        d = _safe_divide_rows(g, l2_rows(g))
    elif kind in MOMENTUM_OPS:
        if momentum is None:
            raise ValueError(f"{kind.name} needs a momentum state")
        m_new = momentum_update(g, momentum)
        d = np.sign(m_new) if kind == OpKind.FGSMM else _safe_divide_rows(m_new, l2_rows(m_new))
        momentum = MomentumState(m_new.reshape(grad.shape), momentum.mu)
    elif kind == OpKind.GAUSSIAN:
        d = _rows(rng.standard_normal(grad.shape))
    elif kind == OpKind.UNIFORM:
        d = _rows(rng.uniform(-1.0, 1.0, size=grad.shape))
    else:
        d = np.zeros_like(g)
    return d.reshape(grad.shape), momentum


def unify_magnitude(direction, reference_grad) -> np.ndarray:
    """Rescale each row to the L2 norm of ``sign(reference_grad)``.

    Zero rows (Identity, or a vanishing gradient) are returned unchanged.
    """
    direction = np.asarray(direction, dtype=np.float64)
    d = _rows(direction)
    target = l2_rows(np.sign(_rows(reference_grad)))
    norms = l2_rows(d)
    out = d.copy()
    nz = norms > 0
    out[nz] = d[nz] * (target[nz] / norms[nz])[:, None]
    return out.reshape(direction.shape)


def unified_direction(kind: OpKind, grad, momentum=None, rng=None):
    """``raw_direction`` followed by ``unify_magnitude`` (FGSM and Identity are exact passthroughs)."""
    d, momentum = raw_direction(kind, grad, momentum, rng)
    if OpKind(kind) not in (OpKind.FGSM, OpKind.IDENTITY):
        d = unify_magnitude(d, grad)
    return d, momentum


def project(x0, x, budget: Budget) -> np.ndarray:
    """Clamp to the eps-ball around ``x0`` and then to the data range."""
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x0.shape != x.shape:
        raise ValueError(f"project: shape mismatch {x0.shape} vs {x.shape}")
    out = np.minimum(np.maximum(x, x0 - budget.eps), x0 + budget.eps)
    return np.minimum(np.maximum(out, budget.lo), budget.hi)


def projection_bounds(x0, budget: Budget) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate interval equivalent to :func:`project` (for ``x0`` in range)."""
    x0 = np.asarray(x0, dtype=np.float64)
    return np.maximum(x0 - budget.eps, budget.lo), np.minimum(x0 + budget.eps, budget.hi)


def check_in_budget(x0, x, budget: Budget, tol: float = 1e-12) -> None:
    """Raise ``AssertionError`` if ``x`` leaves the eps-ball or the data range."""
    x0 = np.asarray(x0)
    x = np.asarray(x)
    linf = np.abs(x - x0).max(initial=0.0)
    if linf > budget.eps + tol:
        raise AssertionError(f"perturbation {linf:.3e} exceeds eps={budget.eps:.3e}")
    if x.size and (x.min() < budget.lo or x.max() > budget.hi):
        raise AssertionError("adversarial input left the data range")


class NoiseCell:
    """Lazily drawn full-batch Gaussian and uniform draws for one cell.

    Draws depend only on ``(seed, cell)``, so two rollouts with the same seed
    see the same random perturbations whatever operations they select.
    """

    def __init__(self, seed: int, cell: int):
        self.seed = int(seed)
        self.cell = int(cell)
        self._gauss = None
        self._unif = None

    def standard_normal(self, shape):
        if self._gauss is None or self._gauss.shape != tuple(shape):
            self._gauss = np.random.default_rng([self.seed, self.cell, 0]).standard_normal(shape)
        return self._gauss

    def uniform(self, lo, hi, size):
        if self._unif is None or self._unif.shape != tuple(size):
            self._unif = np.random.default_rng([self.seed, self.cell, 1]).uniform(lo, hi, size=size)
        return self._unif
