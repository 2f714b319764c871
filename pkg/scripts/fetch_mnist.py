"""Build data/mnist/ IDX files from the 5000-image MNIST sample shipped in mlxtend.

The mlxtend wheel is fetched with ``pip download`` (no install), the CSV is
read from inside the wheel, and images/labels are written as gzipped IDX.

    python scripts/fetch_mnist.py [--out data]
"""

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from a2forge.data import MNIST_IMAGES, MNIST_LABELS, write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data"))
    args = ap.parse_args()
    out = Path(args.out) / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", tmp, "-q"],
            check=True,
        )
        wheel = next(Path(tmp).glob("mlxtend-*.whl"))
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    write_idx(out / MNIST_IMAGES, images)
    write_idx(out / MNIST_LABELS, labels)
    print(f"wrote {len(labels)} examples to {out}")


if __name__ == "__main__":
    main()
