"""PGD-AT vs AT-A2 on the MNIST subset, several seeds.

    python scripts/at_comparison.py --seeds 0 1 2 --out-dir runs/at_cmp
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from a2forge import io as aio
from a2forge.training import train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out-dir", default="runs/at_cmp")
    args = ap.parse_args()
    out = Path(args.out_dir)
    rows = []
    for name in ("at_pgd", "at_a2"):
        base = aio.load_config(ROOT / "configs" / f"{name}.toml")
        for seed in args.seeds:
            cfg = replace(base, seed=seed, **({"epochs": args.epochs} if args.epochs else {}))
            res = train(cfg)
            run = out / f"{name}_seed{seed}"
            aio.write_checkpoint(run / "checkpoint.a2ck", aio.checkpoint_from_result(res))
            aio.write_metrics_csv(run / "metrics.csv", res.report.curves)
            rows.append({"method": name, "seed": seed, "best_epoch": res.report.best_epoch, **res.report.robust})
            print(name, seed, res.report.robust)
    cols = ["method", "seed", "best_epoch"] + sorted(k for k in rows[0] if k not in ("method", "seed", "best_epoch"))
    aio.atomic_write_text(out / "at_comparison.csv", aio.csv_text(rows, cols))
    for name in ("at_pgd", "at_a2"):
        sel = [r for r in rows if r["method"] == name]
        print(f"{name}: " + ", ".join(f"{k} {np.mean([r[k] for r in sel]):.4f}" for k in cols[3:]))


if __name__ == "__main__":
    main()
