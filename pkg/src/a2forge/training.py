"""Adversarial training loops, robust evaluation and the brute-force oracle."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as M
from . import policy as P
from .data import Dataset, load_mnist_subset, split, synth_blobs
from .ops import N_OPS, Budget, MomentumState, NoiseCell, OpKind, check_in_budget, project, unified_direction
from .space import N_STEPS, STEP_MULTIPLIERS, AttackTrace, preset_pgd, preset_rfgsm, rollout

logger = logging.getLogger(__name__)

TRAIN_ATTACKERS = ("a2", "pgd", "rfgsm", "none")


class DivergenceError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    attacker: str = "a2"
    steps: int = 10
    eps: float = 8 / 255
    eta: float = 2 / 255
    loss_kind: str = "ce"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: bool = True
    # desk-scale attacker defaults: far fewer updates than a full run, so a
    # larger step and near-uniform initial scores
    alpha_lr: float = 1e-2
    alpha_weight_decay: float = 1e-2
    embed_dim: int = 16
    alpha_init_scale: float = 0.01
    tau: float = P.STEP_TAU
    tau_gumbel: float = P.GUMBEL_TAU
    mc_samples: int = 1
    momentum_decay: float = 1.0
    hidden: tuple = (256, 128)
    dataset: str = "mnist"
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    blob_dim: int = 2
    blob_classes: int = 2
    blob_separation: float = 0.5
    eval_steps: int = 20
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.attacker not in TRAIN_ATTACKERS:
            raise ValueError(f"attacker must be one of {TRAIN_ATTACKERS}, got {self.attacker!r}")
        if self.loss_kind not in M.LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {M.LOSS_KINDS}")
        if self.dataset not in ("mnist", "blobs"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        for name in ("batch_size", "eval_every", "mc_samples", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "steps", "eval_steps", "n_val"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("eps", "eta", "lr", "alpha_lr", "tau", "tau_gumbel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def budget(self) -> Budget:
        return Budget(self.eps, self.eta, max(self.steps, 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_data(config: TrainConfig):
    if config.dataset == "mnist":
        return load_mnist_subset(config.n_train, config.n_val, config.n_test, seed=config.seed)
    n_total = config.n_train + config.n_val + config.n_test
    per_class = -(-n_total // config.blob_classes)
    blobs = synth_blobs(config.seed, per_class, config.blob_classes, config.blob_dim, config.blob_separation)
    blobs = blobs.take(n_total)
    fr = np.array([config.n_train, config.n_val, config.n_test], dtype=float) / n_total
    return split(blobs, fr / fr.sum(), seed=config.seed)


# evaluation ----------------------------------------------------------------


@dataclass
class AttackerSpec:
    """What to attack with: none, fgsm, pgd, rfgsm, a2 or oracle."""

    kind: str = "pgd"
    steps: int = 20
    eps: float = 8 / 255
    eta: float | None = None
    random_start: bool = True
    alpha: P.AttackerParams | None = None
    loss_kind: str = "ce"

    def __post_init__(self):
        if self.kind not in ("none", "fgsm", "pgd", "rfgsm", "a2", "oracle"):
            raise ValueError(f"unknown attacker kind {self.kind!r}")
        if self.kind == "a2" and self.alpha is None:
            raise ValueError("a2 attacker needs trained attacker parameters")

    @property
    def step(self) -> float:
        if self.eta is not None:
            return self.eta
        return self.eps if self.kind == "fgsm" else 2 / 255

    @property
    def label(self) -> str:
        if self.kind in ("none", "fgsm"):
            return self.kind
        return f"{self.kind}{self.steps}"


def attack_batch(params: M.DefenseParams, spec: AttackerSpec, x, y, rng) -> tuple[np.ndarray, AttackTrace | None]:
    if spec.kind == "none":
        return np.array(x, dtype=np.float64), None
    if spec.kind == "fgsm":
        plan = preset_pgd(1, spec.step, spec.eps)
        return rollout(plan, params, x, y, spec.loss_kind, rng)
    if spec.kind == "pgd":
        plan = preset_pgd(spec.steps, spec.step, spec.eps)
        return rollout(plan, params, x, y, spec.loss_kind, rng, random_start=spec.random_start)
    if spec.kind == "rfgsm":
        plan = preset_rfgsm(spec.steps, spec.step, spec.eps)
        return rollout(plan, params, x, y, spec.loss_kind, rng)
    if spec.kind == "a2":
        budget = Budget(spec.eps, spec.step, spec.alpha.steps)
        return P.generate(spec.alpha, params, x, y, budget, spec.loss_kind, rng, mode="hard")
    raise ValueError("oracle attacks go through brute_force_oracle")


def evaluate_robust(
    params: M.DefenseParams,
    spec: AttackerSpec,
    data: Dataset,
    seed: int = 1234,
    batch_size: int = 500,
    traces: list | None = None,
) -> float:
    """Fraction of ``data`` still classified correctly after the attack."""
    if len(data) == 0:
        return 0.0
    if spec.kind == "oracle":
        budget = Budget(spec.eps, spec.step, spec.steps)
        res = brute_force_oracle(params, data.inputs, data.labels, budget, spec.loss_kind, noise_seed=seed)
        return float(1.0 - res.fooled.mean())
    rng = np.random.default_rng(seed)
    correct = 0
    for start in range(0, len(data), batch_size):
        xb = data.inputs[start : start + batch_size]
        yb = data.labels[start : start + batch_size]
        x_adv, trace = attack_batch(params, spec, xb, yb, rng)
        check_in_budget(xb, x_adv, Budget(spec.eps, spec.step, 1))
        if traces is not None and trace is not None:
            traces.append(trace)
        correct += int((M.classify(params, x_adv).argmax(axis=1) == yb).sum())
    return correct / len(data)


def op_histogram(traces) -> np.ndarray:
    """Per-cell frequency ``(K, 7)`` of selected operations over all traced examples."""
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    ops = np.concatenate([t.ops for t in traces], axis=1)
    counts = np.stack([np.bincount(row, minlength=N_OPS) for row in ops]).astype(np.float64)
    return counts / ops.shape[1]


# brute force ---------------------------------------------------------------

ORACLE_MAX_STEPS = 3


@dataclass
class OracleResult:
    best_ops: np.ndarray  # (B, K)
    best_steps: np.ndarray  # (B, K) step-size grid indices
    best_loss: np.ndarray  # (B,)
    fooled: np.ndarray  # (B,) some plan flips the prediction
    n_plans: int


def brute_force_oracle(
    params: M.DefenseParams,
    x,
    y,
    budget: Budget,
    loss_kind: str = "ce",
    noise_seed: int = 0,
    ops=tuple(OpKind),
    mu: float = 1.0,
) -> OracleResult:
    """Exhaustive search over one-hot operation x one-hot step plans.

    Random operations use :class:`NoiseCell` draws keyed by ``noise_seed``,
    identical to those a rollout or attacker generation with the same seed
    would see.  Shared plan prefixes are evaluated once.
    """
    if budget.steps > ORACLE_MAX_STEPS:
        raise ValueError(f"brute force limited to K <= {ORACLE_MAX_STEPS}, got {budget.steps}")
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    batch, K = x0.shape[0], budget.steps
    ops = [OpKind(o) for o in ops]
    best_loss = np.full(batch, -np.inf)
    best_ops = np.zeros((batch, K), dtype=np.int64)
    best_steps = np.zeros((batch, K), dtype=np.int64)
    fooled = np.zeros(batch, dtype=bool)
    grid = STEP_MULTIPLIERS * budget.eta
    count = 0

    def visit(k, xk, momentum, prefix):
        nonlocal count
        if k == K:
            count += 1
            loss = M.per_example_loss(params, xk, y, loss_kind)
            fooled[:] |= M.classify(params, xk).argmax(axis=1) != y
            better = loss > best_loss
            best_loss[better] = loss[better]
            best_ops[better] = [p[0] for p in prefix]
            best_steps[better] = [p[1] for p in prefix]
            return
        _, grad = M.loss_and_input_gradient(params, xk, y, loss_kind)
        noise = NoiseCell(noise_seed, k)
        for kind in ops:
            d, m_new = unified_direction(kind, grad, momentum, noise)
            for s in range(N_STEPS):
                x_next = project(x0, xk + (np.full(batch, grid[s])[:, None] * d), budget)
                visit(k + 1, x_next, m_new, prefix + [(int(kind), s)])

    visit(0, x0.copy(), MomentumState.zeros_like(x0, mu), [])
    return OracleResult(best_ops, best_steps, best_loss, fooled, count)


# training ------------------------------------------------------------------


@dataclass
class EvalReport:
    clean_acc: float = 0.0
    robust: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    best: M.DefenseParams
    last: M.DefenseParams
    alpha: P.AttackerParams | None
    report: EvalReport
    config: TrainConfig
    theta_state: M.OptimizerState | None = None
    alpha_state: M.OptimizerState | None = None
    epoch: int = 0


CSV_COLUMNS = ("epoch", "lr", "train_loss", "mean_adv_loss", "clean_acc", "robust_fgsm", "robust_pgd")


def lr_at(config: TrainConfig, epoch: int) -> float:
    lr = config.lr
    if config.lr_schedule and config.epochs > 0:
        if epoch >= 0.5 * config.epochs:
            lr /= 10
        if epoch >= 0.75 * config.epochs:
            lr /= 10
    return lr


def _validate(params, config, data: Dataset):
    clean = M.accuracy(params, data.inputs, data.labels)
    fgsm = evaluate_robust(params, AttackerSpec("fgsm", 1, config.eps), data, seed=config.seed + 7)
    pgd = evaluate_robust(params, AttackerSpec("pgd", config.eval_steps, config.eps, 2 / 255), data, seed=config.seed + 11)
    return clean, fgsm, pgd


def _train_batch_attack(config, theta, alpha, xb, yb, rng):
    K = config.steps
    if config.attacker == "none" or K == 0:
        return xb, None
    if config.attacker == "pgd":
        plan = preset_pgd(K, config.eta, config.eps)
        return rollout(plan, theta, xb, yb, config.loss_kind, rng, random_start=True)
    if config.attacker == "rfgsm":
        plan = preset_rfgsm(K, config.eta, config.eps)
        return rollout(plan, theta, xb, yb, config.loss_kind, rng)
    return P.generate(
        alpha, theta, xb, yb, config.budget, config.loss_kind, rng, "hard",
        tau_g=config.tau_gumbel, tau=config.tau, mu=config.momentum_decay,
    )


def train(config: TrainConfig, data=None, resume: TrainResult | None = None, on_epoch=None) -> TrainResult:
    """Adversarial training with the attacker named by ``config.attacker``.

    For ``a2`` each batch runs: hard-mode generation, a defense step on the
    adversarial loss, then one attacker step on a fresh relaxed pass over
    the same batch with the updated defense.
    """
    train_set, val_set, test_set = data if data is not None else load_data(config)
    sizes = (train_set.dim, *config.hidden, max(train_set.n_classes, int(test_set.labels.max()) + 1))
    if resume is None:
        theta = M.init_mlp(sizes, np.random.default_rng([config.seed, 0]))
        theta_state = M.sgd(config.lr, config.momentum, config.weight_decay)
        alpha = alpha_state = None
        if config.attacker == "a2":
            alpha = P.init_attacker(config.steps, train_set.dim, config.embed_dim,
                                    np.random.default_rng([config.seed, 3]), config.alpha_init_scale)
            alpha_state = M.adamw(config.alpha_lr, config.alpha_weight_decay)
        report = EvalReport()
        best, best_score, start = theta.copy(), -1.0, 0
    else:
        theta, theta_state = resume.last.copy(), resume.theta_state
        alpha, alpha_state = resume.alpha, resume.alpha_state
        report, best, start = resume.report, resume.best.copy(), resume.epoch
        best_score = max((row["robust_pgd"] for row in report.curves), default=-1.0)
    for epoch in range(start, config.epochs):
        rng = np.random.default_rng([config.seed, 2, epoch])
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(train_set))
        theta_state.lr = lr_at(config, epoch)
        losses, adv_losses, traces = [], [], []
        for b in range(0, len(order), config.batch_size):
            idx = order[b : b + config.batch_size]
            xb, yb = train_set.inputs[idx], train_set.labels[idx]
            try:
                x_adv, trace = _train_batch_attack(config, theta, alpha, xb, yb, rng)
                loss, grads = M.loss_and_param_gradient(theta, x_adv, yb, config.loss_kind)
                if not np.isfinite(loss):
                    raise M.NonFiniteGradientError("non-finite loss")
                theta = M.DefenseParams.from_arrays(M.optimizer_step(theta.arrays(), grads, theta_state))
                if alpha is not None:
                    res = P.attacker_objective(
                        alpha, theta, xb, yb, config.budget, config.mc_samples, config.loss_kind, rng,
                        config.tau_gumbel, config.tau, config.momentum_decay,
                    )
                    alpha = P.update_alpha(alpha, res.grads, alpha_state)
                    losses.append(-res.objective)
            except ArithmeticError as exc:
                state = {"theta": theta, "alpha": alpha, "epoch": epoch + 1, "batch": b // config.batch_size}
                raise DivergenceError(f"training diverged at epoch {epoch + 1}: {exc}", state) from exc
            check_in_budget(xb, x_adv, config.budget)
            if trace is not None:
                traces.append(trace)
            adv_losses.append(loss)
        row = {
            "epoch": epoch + 1,
            "lr": theta_state.lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "mean_adv_loss": float(np.mean(adv_losses)) if adv_losses else float("nan"),
        }
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            clean, fgsm, pgd = _validate(theta, config, val_set)
        else:
            clean = fgsm = pgd = float("nan")
        row.update(clean_acc=clean, robust_fgsm=fgsm, robust_pgd=pgd)
        report.curves.append(row)
        if traces:
            report.histograms.append(op_histogram(traces).tolist())
        if np.isfinite(pgd) and pgd > best_score:
            best_score, best = pgd, theta.copy()
            report.best_epoch = epoch + 1
        logger.info("epoch %d %s", epoch + 1, row)
        result = TrainResult(best, theta, alpha, report, config, theta_state, alpha_state, epoch + 1)
        if on_epoch is not None:
            on_epoch(result)
    if config.epochs == 0 or best_score < 0:
        best = theta.copy()
    final = TrainResult(best, theta, alpha, report, config, theta_state, alpha_state, max(config.epochs, start))
    _final_eval(final, test_set)
    return final


def _final_eval(result: TrainResult, test_set: Dataset):
    cfg = result.config
    rep = result.report
    for tag, params in (("best", result.best), ("last", result.last)):
        rep.robust[f"{tag}_clean"] = M.accuracy(params, test_set.inputs, test_set.labels)
        rep.robust[f"{tag}_fgsm"] = evaluate_robust(params, AttackerSpec("fgsm", 1, cfg.eps), test_set, seed=cfg.seed + 7)
        rep.robust[f"{tag}_pgd{cfg.eval_steps}"] = evaluate_robust(
            params, AttackerSpec("pgd", cfg.eval_steps, cfg.eps, 2 / 255), test_set, seed=cfg.seed + 11
        )
    rep.clean_acc = rep.robust["best_clean"]


def train_at_a2(config: TrainConfig, data=None, **kw) -> TrainResult:
    cfg = TrainConfig.from_dict({**config.to_dict(), "attacker": "a2"})
    return train(cfg, data, **kw)


def train_at_pgd(config: TrainConfig, data=None, **kw) -> TrainResult:
    cfg = TrainConfig.from_dict({**config.to_dict(), "attacker": "pgd"})
    return train(cfg, data, **kw)


# attacker-only training against a frozen defense ---------------------------


@dataclass
class AttackerTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    steps: int = 10
    eps: float = 8 / 255
    eta: float = 2 / 255
    lr: float = 1e-2
    weight_decay: float = 1e-2
    embed_dim: int = 16
    init_scale: float = 0.01
    tau: float = P.STEP_TAU
    tau_gumbel: float = P.GUMBEL_TAU
    mc_samples: int = 1
    momentum_decay: float = 1.0
    loss_kind: str = "ce"
    seed: int = 0

    @property
    def budget(self) -> Budget:
        return Budget(self.eps, self.eta, self.steps)


def train_attacker(theta: M.DefenseParams, train_set: Dataset, eval_set: Dataset | None, cfg: AttackerTrainConfig, on_epoch=None):
    """Fit the attacker alone against a frozen defense.

    Returns:
        ``(alpha, curve)`` where each curve row holds the epoch, the mean
        relaxed-pass loss and (when ``eval_set`` is given) the hard-mode
        robust accuracy.
    """
    alpha = P.init_attacker(cfg.steps, train_set.dim, cfg.embed_dim, np.random.default_rng([cfg.seed, 3]), cfg.init_scale)
    state = M.adamw(cfg.lr, cfg.weight_decay)
    curve = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 4, epoch])
        order = np.random.default_rng([cfg.seed, 5, epoch]).permutation(len(train_set))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            res = P.attacker_objective(
                alpha, theta, train_set.inputs[idx], train_set.labels[idx], cfg.budget, cfg.mc_samples,
                cfg.loss_kind, rng, cfg.tau_gumbel, cfg.tau, cfg.momentum_decay,
            )
            alpha = P.update_alpha(alpha, res.grads, state)
            losses.append(-res.objective)
        row = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses))}
        if eval_set is not None:
            spec = AttackerSpec("a2", cfg.steps, cfg.eps, cfg.eta, alpha=alpha, loss_kind=cfg.loss_kind)
            row["robust_acc"] = evaluate_robust(theta, spec, eval_set, seed=cfg.seed + 13)
        curve.append(row)
        logger.info("attacker epoch %d %s", epoch + 1, row)
        if on_epoch is not None:
            on_epoch(alpha, row)
    return alpha, curve
