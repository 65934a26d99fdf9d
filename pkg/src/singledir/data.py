"""Datasets: MNIST IDX and CIFAR-10 binary loaders, splits, synthetic blobs,
and label corruption.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngs
from .errors import ConfigError, DataFormatError

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32
DATA_DIR_ENV = "SINGLEDIR_DATA"


@dataclass(frozen=True)
class Dataset:
    examples: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.examples) != len(self.labels):
            raise DataFormatError(f"{len(self.examples)} examples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataFormatError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, name: str | None = None) -> Dataset:
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.examples[idx], self.labels[idx], self.n_classes,
                       self.name if name is None else name)

    def with_labels(self, labels: np.ndarray, name: str | None = None) -> Dataset:
        return replace(self, labels=np.asarray(labels, dtype=np.int64),
                       name=self.name if name is None else name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


# --- MNIST IDX ------------------------------------------------------------------

def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc.strerror}") from None
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0 "
                              f"(expected 0x{expected_magic:08x})")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise DataFormatError(f"{path}: expected {size} data bytes after offset {header}, "
                              f"found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise DataFormatError(f"image count {len(images)} does not match label count {len(labels)}")
    if len(labels) and labels.max() >= 10:
        raise DataFormatError(f"{labels_path}: label {labels.max()} outside [0, 10)")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), 10, name)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    images = np.rint(np.asarray(dataset.examples) * 255.0).astype(np.uint8)
    if images.ndim != 3:
        raise ConfigError("IDX image files need examples shaped [N, rows, cols]")
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGE_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABEL_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


# --- CIFAR-10 binary -------------------------------------------------------------

def load_cifar10(paths: Sequence | str | os.PathLike, name: str = "cifar10") -> Dataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        try:
            raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
        except OSError as exc:
            raise DataFormatError(f"cannot read {path}: {exc.strerror}") from None
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}")
        rec = raw.reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] >= 10)
        if bad.size:
            raise DataFormatError(f"{path}: label byte {rec[bad[0], 0]} >= 10 at offset {bad[0] * CIFAR_RECORD}")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(xs), np.concatenate(ys), 10, name)


def write_cifar10(dataset: Dataset, path) -> None:
    pix = np.rint(np.asarray(dataset.examples) * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    if pix.shape[1] != CIFAR_RECORD - 1:
        raise ConfigError("CIFAR-10 records need examples shaped [N, 3, 32, 32]")
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pix], axis=1)
    Path(path).write_bytes(rec.tobytes())


# --- synthetic -------------------------------------------------------------------

def synthetic_blobs(n_per_class: int, classes: int, dim: int, separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian clusters, min-max scaled to [0, 1].

    Class means sit on a line (``dim == 1``) or a circle in the first two
    coordinates, with adjacent means ``separation`` apart.
    """
    if n_per_class < 1 or classes < 1 or dim < 1 or separation < 0:
        raise ConfigError("synthetic_blobs needs positive sizes and a non-negative separation")
    means = np.zeros((classes, dim))
    if dim == 1 or classes <= 2:
        means[:, 0] = (np.arange(classes) - (classes - 1) / 2) * separation
    else:
        radius = separation / (2 * math.sin(math.pi / classes))
        ang = 2 * math.pi * np.arange(classes) / classes
        means[:, 0], means[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
    g = rngs.stream(seed, "blobs")
    labels = np.repeat(np.arange(classes), n_per_class)
    x = means[labels] + g.standard_normal((len(labels), dim))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return Dataset(x, labels.astype(np.int64), classes, f"blobs-{classes}x{n_per_class}")


# --- splitting -------------------------------------------------------------------

def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Disjoint seeded subsets with sizes ``round(f * N)`` (half up)."""
    fr = [float(f) for f in fractions]
    if any(f <= 0 for f in fr):
        raise ConfigError("split fractions must be positive")
    if sum(fr) > 1.0 + 1e-12:
        raise ConfigError(f"split fractions sum to {sum(fr)} > 1")
    n = len(dataset)
    perm = rngs.stream(seed, "split").permutation(n)
    out, start = [], 0
    for i, f in enumerate(fr):
        size = min(int(math.floor(f * n + 0.5)), n - start)
        out.append(dataset.subset(perm[start:start + size], f"{dataset.name}[split{i}]"))
        start += size
    return out


def split_counts(dataset: Dataset, counts: Sequence[int], seed: int) -> list[Dataset]:
    """Like :func:`split` with absolute sizes."""
    if sum(counts) > len(dataset) or any(c <= 0 for c in counts):
        raise ConfigError(f"cannot draw subsets of sizes {list(counts)} from {len(dataset)} examples")
    perm = rngs.stream(seed, "split").permutation(len(dataset))
    out, start = [], 0
    for i, c in enumerate(counts):
        out.append(dataset.subset(perm[start:start + c], f"{dataset.name}[split{i}]"))
        start += c
    return out


# --- label corruption ------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"corruption fraction must lie in [0, 1], got {self.fraction}")


def corrupted_count(fraction: float, n: int) -> int:
    """Number of examples selected for corruption: fraction * n rounded half up."""
    return int(math.floor(fraction * n + 0.5))


def corrupt_labels(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Shuffle the labels of a random ``round(fraction * N)`` subset.

    The selected examples' labels are permuted among themselves, so the
    overall label multiset is preserved exactly.
    """
    n = len(dataset)
    k = corrupted_count(spec.fraction, n)
    labels = dataset.labels.copy()
    if k:
        g = rngs.stream(spec.seed, "corrupt")
        idx = g.choice(n, size=k, replace=False)
        labels[idx] = labels[idx][g.permutation(k)]
    return dataset.with_labels(labels, f"{dataset.name}~corrupt{spec.fraction:g}")


def corruption_sidecar(original: Dataset, corrupted: Dataset, spec: CorruptionSpec) -> dict:
    changed = np.flatnonzero(original.labels != corrupted.labels)
    return {"source_name": original.name, "fraction": spec.fraction, "seed": spec.seed,
            "changed_indices": changed.tolist(), "new_labels": corrupted.labels[changed].tolist()}


def apply_sidecar(dataset: Dataset, sidecar: dict) -> Dataset:
    labels = dataset.labels.copy()
    idx = np.asarray(sidecar["changed_indices"], dtype=np.intp)
    if idx.size and idx.max() >= len(labels):
        raise DataFormatError("corruption sidecar indexes past the end of the dataset")
    labels[idx] = sidecar["new_labels"]
    return dataset.with_labels(labels, f"{dataset.name}~corrupt{sidecar['fraction']:g}")


def write_sidecar(path, sidecar: dict) -> None:
    Path(path).write_text(json.dumps(sidecar) + "\n")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())


# --- on-disk discovery -----------------------------------------------------------

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(data_dir=None, part: str = "train") -> tuple[Path, Path] | None:
    root = Path(data_dir) if data_dir is not None else default_data_dir()
    for base in (root / "mnist", root):
        img, lab = (base / f for f in MNIST_FILES[part])
        if img.exists() and lab.exists():
            return img, lab
    return None


def find_cifar10(data_dir=None) -> list[Path]:
    root = Path(data_dir) if data_dir is not None else default_data_dir()
    for base in (root / "cifar-10-batches-bin", root / "cifar10", root):
        found = sorted(base.glob("data_batch_*.bin"))
        if found:
            return found
    return []


def load_source(source: str, data_dir=None) -> Dataset:
    """Load the training pool of a named source (``mnist`` or ``cifar10``)."""
    if source == "mnist":
        paths = find_mnist(data_dir)
        if paths is None:
            raise DataFormatError(f"MNIST IDX files not found under {data_dir or default_data_dir()} "
                                  f"(set {DATA_DIR_ENV})")
        ds = load_idx(*paths)
        return Dataset(ds.examples.reshape(len(ds), -1), ds.labels, 10, "mnist")
    if source == "cifar10":
        paths = find_cifar10(data_dir)
        if not paths:
            raise DataFormatError(f"CIFAR-10 binary batches not found under {data_dir or default_data_dir()} "
                                  f"(set {DATA_DIR_ENV})")
        return load_cifar10(paths)
    raise ConfigError(f"unknown data source {source!r}")
