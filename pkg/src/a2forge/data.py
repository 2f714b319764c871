"""IDX parsing, synthetic blobs and deterministic splits."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "A2FORGE_DATA_DIR"

MNIST_IMAGES = "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = "mnist5k-labels-idx1-ubyte.gz"


class IDXParseError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, D) in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "all"
    provenance: str = ""

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError(f"inputs {self.inputs.shape} vs labels {self.labels.shape}")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split, self.provenance)

    def take(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, magic: int):
    if len(raw) < 4:
        raise IDXParseError(path, 0, "truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IDXParseError(path, 0, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXParseError(path, 4, "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IDXParseError(path, len(raw), f"truncated payload: need {count} bytes after offset {header}")
    if len(raw) > header + count:
        raise IDXParseError(path, header + count, "trailing bytes after payload")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Unsigned-byte IDX images and labels (optionally gzipped), pixels scaled to [0, 1]."""
    dims, images = _parse_idx(_read_bytes(images_path), images_path, IMAGES_MAGIC)
    ldims, labels = _parse_idx(_read_bytes(labels_path), labels_path, LABELS_MAGIC)
    if dims[0] != ldims[0]:
        raise IDXParseError(labels_path, 4, f"count mismatch: {dims[0]} images vs {ldims[0]} labels")
    n = dims[0] if limit is None else min(limit, dims[0])
    x = images[:n].reshape(n, int(np.prod(dims[1:]))).astype(np.float64) / 255.0
    return Dataset(x, labels[:n].astype(np.int64), "all", f"idx:{Path(images_path).name}:limit={limit}")


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (gzip when ``path`` ends in ``.gz``)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    raw = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        raw = gzip.compress(raw, mtime=0)
    path.write_bytes(raw)


def synth_blobs(seed: int, n_per_class: int, classes: int = 2, dim: int = 2, separation: float = 0.5) -> Dataset:
    """Gaussian blobs (std 0.1) at hypercube corners, clipped to [0, 1].

    Class ``c`` is centred at ``0.5 + separation * (bit - 0.5)`` where the
    bit for coordinate ``d`` is bit ``d mod ceil(log2 classes)`` of ``c``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if separation <= 0:
        raise ValueError("separation must be positive")
    n_bits = max(1, int(np.ceil(np.log2(classes))))
    if classes > 2 ** min(n_bits, dim):
        raise ValueError(f"{classes} classes do not fit on distinct corners in {dim} dims")
    rng = np.random.default_rng(seed)
    bits = np.array([[(c >> (d % n_bits)) & 1 for d in range(dim)] for c in range(classes)], dtype=np.float64)
    centres = 0.5 + separation * (bits - 0.5)
    y = np.repeat(np.arange(classes), n_per_class)
    x = np.clip(centres[y] + 0.1 * rng.standard_normal((len(y), dim)), 0.0, 1.0)
    order = rng.permutation(len(y))
    prov = f"blobs:seed={seed},n={n_per_class},classes={classes},dim={dim},sep={separation}"
    return Dataset(x[order], y[order].astype(np.int64), "all", prov)


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffled partition into train / val / test."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(fractions) != 3 or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions.tolist()}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(dataset.subset(p, name) for p, name in zip(parts, ("train", "val", "test")))


def data_dir(override=None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


def load_mnist_subset(n_train=2000, n_val=500, n_test=1000, seed=0, root=None):
    """Disjoint shuffled train / val / test slices of the bundled MNIST sample."""
    d = data_dir(root) / "mnist"
    images, labels = d / MNIST_IMAGES, d / MNIST_LABELS
    if not images.exists():
        raise FileNotFoundError(f"{images} not found; run scripts/fetch_mnist.py or set {DATA_DIR_ENV}")
    full = load_idx(images, labels)
    total = n_train + n_val + n_test
    if total > len(full):
        raise ValueError(f"requested {total} examples but only {len(full)} are available")
    order = np.random.default_rng(seed).permutation(len(full))
    cuts = np.cumsum([n_train, n_val, n_test])
    parts = (order[: cuts[0]], order[cuts[0] : cuts[1]], order[cuts[1] : cuts[2]])
    return tuple(full.subset(p, name) for p, name in zip(parts, ("train", "val", "test")))
