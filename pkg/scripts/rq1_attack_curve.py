"""Attack-effect curve against a frozen defense.

Trains the attacker alone (eta=2/255 and the full-ball variant eta=eps) on
the validation split of the checkpoint's dataset, logs robust test accuracy
per epoch, and compares against PGD-10.

    python scripts/rq1_attack_curve.py --checkpoint runs/pgd/checkpoint.a2ck --out-dir runs/rq1
"""

import argparse
from pathlib import Path

import numpy as np

from a2forge import io as aio
from a2forge.training import AttackerSpec, AttackerTrainConfig, TrainConfig, evaluate_robust, load_data, train_attacker


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out-dir", default="runs/rq1")
    args = ap.parse_args()

    ck = aio.read_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(ck.config)
    theta = ck.best or ck.theta
    _, val, test = load_data(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for seed in args.seeds:
        pgd = evaluate_robust(theta, AttackerSpec("pgd", args.steps, cfg.eps, cfg.eta), test, seed=seed + 13)
        for variant, eta in (("a2", cfg.eta), ("a2_full_ball", cfg.eps)):
            acfg = AttackerTrainConfig(epochs=args.epochs, steps=args.steps, eps=cfg.eps, eta=eta, seed=seed)
            _, curve = train_attacker(theta, val, test, acfg)
            for row in curve:
                rows.append({"seed": seed, "variant": variant, "pgd_robust_acc": pgd, **row})
            print(f"seed {seed} {variant}: final {curve[-1]['robust_acc']:.4f} (pgd{args.steps} {pgd:.4f})")
    cols = ("seed", "variant", "epoch", "mean_loss", "robust_acc", "pgd_robust_acc")
    aio.atomic_write_text(out / "rq1_curve.csv", aio.csv_text(rows, cols))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for variant in ("a2", "a2_full_ball"):
        sel = [r for r in rows if r["variant"] == variant]
        ep = sorted({r["epoch"] for r in sel})
        ax.plot(ep, [np.mean([r["robust_acc"] for r in sel if r["epoch"] == e]) for e in ep], marker=".", label=variant)
    ax.axhline(np.mean([r["pgd_robust_acc"] for r in rows]), color="k", ls="--", label=f"pgd{args.steps}")
    ax.set_xlabel("attacker epoch")
    ax.set_ylabel("robust accuracy (test)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "rq1_curve.png", dpi=110, metadata={"Software": None})


if __name__ == "__main__":
    main()
