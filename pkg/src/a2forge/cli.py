"""Command line: ``a2forge {train,attack,oracle,eval,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as aio
from . import model as M
from .ops import Budget
from .training import (
    AttackerSpec,
    AttackerTrainConfig,
    TrainConfig,
    brute_force_oracle,
    evaluate_robust,
    load_data,
    op_histogram,
    train,
    train_attacker,
)

logger = logging.getLogger("a2forge")

CHECKPOINT_NAME = "checkpoint.a2ck"
ATTACK_CURVE_COLUMNS = ("epoch", "mean_loss", "robust_acc")


class UsageError(ValueError):
    pass


# attacker specs ------------------------------------------------------------


@dataclass
class AttackerArg:
    kind: str
    steps: int | None = None
    eta: float | None = None
    eps: float | None = None
    train: bool = False
    epochs: int = 20
    random_start: bool = True
    extra: dict = field(default_factory=dict)


def parse_attacker(text: str) -> AttackerArg:
    """Parse ``kind[:opt,opt=value,...]``, e.g. ``pgd:K=10`` or ``a2:train,epochs=20,eta=8/255``.

    ``pgd10`` is shorthand for ``pgd:K=10``.
    """
    head, _, rest = text.strip().partition(":")
    head = head.lower()
    steps = None
    for prefix in ("pgd", "rfgsm"):
        if head.startswith(prefix) and head[len(prefix):].isdigit():
            head, steps = prefix, int(head[len(prefix):])
    if head not in ("none", "fgsm", "pgd", "rfgsm", "a2", "oracle"):
        raise UsageError(f"unknown attacker {text!r}")
    arg = AttackerArg(head, steps)
    for token in filter(None, (t.strip() for t in rest.split(","))):
        key, eq, value = token.partition("=")
        key = key.strip()
        if not eq:
            if key == "train" and head == "a2":
                arg.train = True
                continue
            if key == "no_random_start":
                arg.random_start = False
                continue
            raise UsageError(f"bad attacker option {token!r}")
        try:
            if key == "K":
                arg.steps = int(value)
            elif key == "epochs":
                arg.epochs = int(value)
            elif key in ("eta", "eps"):
                setattr(arg, key, float(aio.parse_number(value)))
            elif key == "random_start":
                arg.random_start = value.lower() in ("1", "true", "yes")
            else:
                raise UsageError(f"unknown attacker option {key!r}")
        except (aio.ConfigError, ValueError) as exc:
            raise UsageError(f"bad value in {token!r}: {exc}") from exc
    if (arg.steps is not None and arg.steps < 0) or arg.epochs < 0:
        raise UsageError(f"{text!r}: K and epochs must be non-negative")
    if any(v is not None and v <= 0 for v in (arg.eta, arg.eps)):
        raise UsageError(f"{text!r}: eta and eps must be positive")
    return arg


def _train_attacker_kind(name: str) -> tuple[str, int | None]:
    arg = parse_attacker(name)
    if arg.kind not in ("a2", "pgd", "rfgsm", "none"):
        raise UsageError(f"cannot train against {name!r}")
    return arg.kind, arg.steps


# helpers -------------------------------------------------------------------


def _config_from_args(args) -> TrainConfig:
    cfg = aio.load_config(args.config) if args.config else TrainConfig()
    d = cfg.to_dict()
    if args.attacker is not None:
        kind, steps = _train_attacker_kind(args.attacker)
        d["attacker"] = kind
        if steps is not None:
            d["steps"] = steps
    for key in ("seed", "epochs", "steps"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    for key in ("eps", "eta"):
        if getattr(args, key) is not None:
            d[key] = float(aio.parse_number(getattr(args, key)))
    return TrainConfig.from_dict(d)


def _run_meta(cfg: TrainConfig) -> dict:
    return {"seed": cfg.seed, "config": cfg.to_dict()}


def _write_run(out: Path, result, cfg: TrainConfig) -> None:
    aio.write_checkpoint(out / CHECKPOINT_NAME, aio.checkpoint_from_result(result))
    aio.write_metrics_csv(out / "metrics.csv", result.report.curves)
    aio.atomic_write_text(out / "op_histogram.json", aio.dump_json(aio.histogram_document(result.report.histograms, cfg.seed, cfg.to_dict())))


def _load_ck(path) -> aio.Checkpoint:
    return aio.read_checkpoint(path)


def _ck_data(ck: aio.Checkpoint):
    cfg = TrainConfig.from_dict(ck.config)
    return cfg, load_data(cfg)


def _pick_split(data, name: str, n: int | None):
    idx = {"train": 0, "val": 1, "test": 2}
    if name not in idx:
        raise UsageError(f"unknown split {name!r}")
    ds = data[idx[name]]
    return ds.take(n) if n is not None else ds


def _spec(arg: AttackerArg, cfg: TrainConfig, alpha=None) -> AttackerSpec:
    eps = arg.eps if arg.eps is not None else cfg.eps
    if arg.kind == "fgsm":
        return AttackerSpec("fgsm", 1, eps, arg.eta)
    steps = arg.steps if arg.steps is not None else (alpha.steps if alpha is not None else cfg.steps)
    eta = arg.eta if arg.eta is not None else cfg.eta
    return AttackerSpec(arg.kind, steps, eps, eta, arg.random_start, alpha, cfg.loss_kind)


def _attacker_cfg(cfg: TrainConfig, arg: AttackerArg, seed: int, steps: int | None = None) -> AttackerTrainConfig:
    return AttackerTrainConfig(
        epochs=arg.epochs,
        steps=steps if steps is not None else (arg.steps or cfg.steps),
        eps=arg.eps if arg.eps is not None else cfg.eps,
        eta=arg.eta if arg.eta is not None else cfg.eta,
        embed_dim=cfg.embed_dim,
        tau=cfg.tau,
        tau_gumbel=cfg.tau_gumbel,
        loss_kind=cfg.loss_kind,
        seed=seed,
    )


# commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        ck = _load_ck(out / CHECKPOINT_NAME)
        saved = dict(ck.config)
        saved["epochs"] = cfg.epochs
        if saved != cfg.to_dict():
            raise UsageError("--resume: config differs from the checkpoint (only epochs may change)")
        resume = aio.result_from_checkpoint(ck)
        resume.config = cfg
        logger.info("resuming from epoch %d", ck.epoch)
    aio.atomic_write_text(out / "config.toml", aio.config_to_toml(cfg))
    result = train(cfg, resume=resume, on_epoch=lambda r: _write_run(out, r, cfg))
    _write_run(out, result, cfg)
    summary = {**_run_meta(cfg), "best_epoch": result.report.best_epoch, "test": result.report.robust}
    aio.atomic_write_text(out / "report.json", aio.dump_json(summary))
    print(aio.dump_json(summary["test"]), end="")
    return 0


def cmd_attack(args) -> int:
    ck = _load_ck(args.checkpoint)
    cfg, data = _ck_data(ck)
    theta = ck.theta if args.use == "last" or ck.best is None else ck.best
    arg = parse_attacker(args.attacker or "pgd:K=10")
    if args.steps is not None:
        arg.steps = args.steps
    if args.eta is not None:
        arg.eta = float(aio.parse_number(args.eta))
    if args.eps is not None:
        arg.eps = float(aio.parse_number(args.eps))
    target = _pick_split(data, args.split, args.n)
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    alpha, curve = ck.alpha, None
    if arg.kind == "a2" and arg.train:
        acfg = _attacker_cfg(cfg, arg, seed)
        alpha, curve = train_attacker(theta, data[1], target, acfg)
        aio.atomic_write_text(out / "attack_curve.csv", aio.csv_text(curve, ATTACK_CURVE_COLUMNS))
        aio.write_checkpoint(out / "attacker.a2ck", aio.Checkpoint(theta=theta, alpha=alpha, config=cfg.to_dict(), seed=seed))
    if arg.kind == "a2" and alpha is None:
        raise UsageError("checkpoint holds no attacker; use a2:train")
    if arg.kind == "oracle":
        raise UsageError("use the oracle subcommand")
    spec = _spec(arg, cfg, alpha if arg.kind == "a2" else None)
    traces = []
    robust = evaluate_robust(theta, spec, target, seed=seed + 13, traces=traces)
    report = {
        **_run_meta(cfg),
        "attack_seed": seed,
        "attacker": args.attacker,
        "split": args.split,
        "n": len(target),
        "clean_acc": M.accuracy(theta, target.inputs, target.labels),
        "robust_acc": robust,
    }
    if curve is not None:
        report["curve"] = curve
    if traces:
        aio.atomic_write_text(out / "attack_op_histogram.json",
                              aio.dump_json(aio.histogram_document([op_histogram(traces).tolist()], seed, cfg.to_dict())))
    aio.atomic_write_text(out / "attack_report.json", aio.dump_json(report))
    print(f"{spec.label} robust accuracy: {robust:.4f}")
    return 0


def cmd_eval(args) -> int:
    ck = _load_ck(args.checkpoint)
    cfg, data = _ck_data(ck)
    theta = ck.theta if args.use == "last" or ck.best is None else ck.best
    target = _pick_split(data, args.split, args.n)
    seed = args.seed if args.seed is not None else cfg.seed
    specs = args.attacker or ["fgsm", f"pgd:K={cfg.eval_steps}"]
    rows = [{"attacker": "none", "robust_acc": M.accuracy(theta, target.inputs, target.labels)}]
    for text in specs:
        arg = parse_attacker(text)
        if arg.kind == "a2" and ck.alpha is None:
            raise UsageError("checkpoint holds no attacker")
        if arg.kind == "oracle":
            arg.steps = arg.steps or 1
        rows.append({"attacker": text, "robust_acc": evaluate_robust(theta, _spec(arg, cfg, ck.alpha if arg.kind == "a2" else None), target, seed=seed + 13)})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aio.atomic_write_text(out / "eval.csv", aio.csv_text(rows, ("attacker", "robust_acc")))
    aio.atomic_write_text(out / "eval.json", aio.dump_json({**_run_meta(cfg), "split": args.split, "n": len(target), "rows": rows}))
    for row in rows:
        print(f"{row['attacker']:<24} {row['robust_acc']:.4f}")
    return 0


def cmd_oracle(args) -> int:
    K = args.steps if args.steps is not None else 1
    if K > 3 or K < 1:
        raise UsageError(f"oracle needs 1 <= K <= 3, got {K}")
    ck = _load_ck(args.checkpoint)
    cfg, data = _ck_data(ck)
    theta = ck.theta if args.use == "last" or ck.best is None else ck.best
    target = _pick_split(data, args.split, args.n)
    seed = args.seed if args.seed is not None else cfg.seed
    eps = float(aio.parse_number(args.eps)) if args.eps is not None else cfg.eps
    eta = float(aio.parse_number(args.eta)) if args.eta is not None else cfg.eta
    budget = Budget(eps, eta, K)
    res = brute_force_oracle(theta, target.inputs, target.labels, budget, cfg.loss_kind, noise_seed=seed)
    pgd = evaluate_robust(theta, AttackerSpec("pgd", K, eps, eta, random_start=False, loss_kind=cfg.loss_kind), target, seed=seed)
    alpha = ck.alpha if ck.alpha is not None and ck.alpha.steps == K else None
    if alpha is None and args.a2_epochs > 0:
        alpha, _ = train_attacker(theta, data[1], None, _attacker_cfg(cfg, AttackerArg("a2", K, eta, eps, True, args.a2_epochs), seed, K))
    a2 = None
    if alpha is not None:
        a2 = evaluate_robust(theta, AttackerSpec("a2", K, eps, eta, alpha=alpha, loss_kind=cfg.loss_kind), target, seed=seed)
    per_example = [
        {
            "index": i,
            "label": int(target.labels[i]),
            "best_ops": res.best_ops[i].tolist(),
            "best_steps": res.best_steps[i].tolist(),
            "best_loss": float(res.best_loss[i]),
            "fooled": bool(res.fooled[i]),
        }
        for i in range(len(target))
    ]
    report = {
        **_run_meta(cfg),
        "K": K,
        "eps": eps,
        "eta": eta,
        "noise_seed": seed,
        "n": len(target),
        "plans_per_example": res.n_plans,
        "op_encoding": aio.histogram_document([], seed, {})["op_encoding"],
        "aggregate": {
            "clean_acc": M.accuracy(theta, target.inputs, target.labels),
            "oracle_robust_acc": float(1.0 - res.fooled.mean()) if len(target) else 0.0,
            "pgd_robust_acc": pgd,
            "a2_robust_acc": a2,
        },
        "examples": per_example,
    }
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aio.atomic_write_text(out / "oracle_report.json", aio.dump_json(report))
    agg = report["aggregate"]
    print(f"plans per example: {res.n_plans}")
    for k, v in agg.items():
        print(f"{k:<20} {'n/a' if v is None else f'{v:.4f}'}")
    return 0


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [Path(r) for r in (args.run_dir or [args.out_dir])]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for run in runs:
        rows = aio.read_csv(run / "metrics.csv")
        ep = [int(r["epoch"]) for r in rows]
        for ax, col in zip(axes, ("clean_acc", "robust_pgd", "mean_adv_loss")):
            ax.plot(ep, [float(r[col]) for r in rows], marker=".", label=run.name)
            ax.set_title(col)
            ax.set_xlabel("epoch")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig.savefig(out / "curves.png", dpi=110, metadata={"Software": None})
    plt.close(fig)
    hist_path = runs[0] / "op_histogram.json"
    if hist_path.exists():
        import json

        doc = json.loads(hist_path.read_text())
        if doc["epochs"]:
            h = np.asarray(doc["epochs"][-1]["cells"])
            names = sorted(doc["op_encoding"], key=doc["op_encoding"].get)
            fig, ax = plt.subplots(figsize=(7, 3.2))
            bottom = np.zeros(h.shape[0])
            for j, name in enumerate(names):
                ax.bar(np.arange(1, h.shape[0] + 1), h[:, j], bottom=bottom, label=name)
                bottom += h[:, j]
            ax.set_xlabel("cell")
            ax.set_ylabel("selection frequency")
            ax.legend(fontsize=7, ncol=4)
            fig.tight_layout()
            fig.savefig(out / "op_histogram.png", dpi=110, metadata={"Software": None})
            plt.close(fig)
    print(f"wrote plots to {out}")
    return 0


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="a2forge", description="Automated attacker search and adversarial training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--eps", help="number or fraction, e.g. 8/255")
        sp.add_argument("--eta", help="number or fraction, e.g. 2/255")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--out-dir", default="runs/latest")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--split", default="test", choices=("train", "val", "test"))
            sp.add_argument("--n", type=int, help="use only the first N examples of the split")
            sp.add_argument("--use", default="best", choices=("best", "last"))

    t = sub.add_parser("train", help="adversarial training")
    common(t, checkpoint=False)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--attacker", help="a2, pgd, pgd10, rfgsm or none")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="attack a frozen checkpoint")
    common(a)
    a.add_argument("--attacker", help="e.g. pgd:K=10, a2, a2:train,epochs=20,eta=8/255")
    a.set_defaults(func=cmd_attack)

    o = sub.add_parser("oracle", help="brute-force search over discrete plans (K <= 3)")
    common(o)
    o.add_argument("--a2-epochs", type=int, default=3, help="train a K-cell attacker for the comparison (0 disables)")
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("eval", help="robust accuracy under several attackers")
    common(e)
    e.add_argument("--attacker", action="append", help="repeatable; default fgsm and pgd:K=<eval_steps>")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="static plots from run directories")
    r.add_argument("--run-dir", action="append")
    r.add_argument("--out-dir", default="runs/latest")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, aio.ConfigError, aio.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"a2forge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
