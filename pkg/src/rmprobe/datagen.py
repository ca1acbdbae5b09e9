"""Synthetic datasets, CSV export and IDX (MNIST format) ingestion."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.inputs),):
                raise ValueError("one label per input row is required")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, index) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.inputs[index], labels, self.split)

    def train_test_split(self, test_fraction: float = 0.2, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle split; stratified per class when labels exist."""
        rng = np.random.default_rng(seed)
        if self.labels is None:
            perm = rng.permutation(len(self))
            n_test = int(round(test_fraction * len(self)))
            test_idx, train_idx = perm[:n_test], perm[n_test:]
        else:
            train_idx, test_idx = [], []
            for c in np.unique(self.labels):
                members = rng.permutation(np.flatnonzero(self.labels == c))
                n_test = int(round(test_fraction * len(members)))
                test_idx.extend(members[:n_test])
                train_idx.extend(members[n_test:])
            train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
        train, test = self.subset(train_idx), self.subset(test_idx)
        train.split, test.split = "train", "test"
        return train, test


def _balanced_labels(n_per_class: int, classes: int) -> np.ndarray:
    return np.repeat(np.arange(classes), n_per_class)


def gen_blobs(n_per_class: int, classes: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters around centres drawn uniformly from [0.2, 0.8]^dim."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, dim))
    labels = _balanced_labels(n_per_class, classes)
    noise = rng.normal(0.0, 1.0, size=(len(labels), dim)) * spread
    return Dataset(np.clip(centers[labels] + noise, 0.0, 1.0), labels)


def ring_radius(k: int, classes: int) -> float:
    # 0.15, 0.30, 0.45 for up to three classes; squeezed to stay inside the unit square beyond
    return (k + 1) * min(0.15, 0.45 / classes)


def gen_rings(n_per_class: int, classes: int, dim: int, noise: float, seed: int) -> Dataset:
    """Concentric circles around (0.5, 0.5) in the first two coordinates.

    Remaining coordinates sit at 0.5 plus Gaussian noise of the same scale.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 2:
        raise ValueError("rings need dim >= 2")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n_per_class, classes)
    radii = np.array([ring_radius(k, classes) for k in range(classes)])[labels]
    theta = rng.uniform(0.0, 2 * np.pi, size=len(labels))
    x = np.full((len(labels), dim), 0.5)
    x[:, 0] += radii * np.cos(theta)
    x[:, 1] += radii * np.sin(theta)
    x += rng.normal(0.0, 1.0, size=x.shape) * noise
    return Dataset(np.clip(x, 0.0, 1.0), labels)


# ---------------------------------------------------------------- CSV


def write_csv(dataset: Dataset, path: str | os.PathLike) -> None:
    header = [f"x{k}" for k in range(dataset.dim)]
    if dataset.labels is not None:
        header.append("label")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for k, row in enumerate(dataset.inputs):
            vals = [repr(float(v)) for v in row]
            if dataset.labels is not None:
                vals.append(str(int(dataset.labels[k])))
            w.writerow(vals)


def read_csv(path: str | os.PathLike) -> Dataset:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: empty CSV file")
    header, body = rows[0], rows[1:]
    has_labels = bool(header) and header[-1] == "label"
    n_feat = len(header) - int(has_labels)
    if n_feat < 1:
        raise FormatError(f"{path}: no feature columns")
    inputs = np.empty((len(body), n_feat))
    labels = np.empty(len(body), dtype=np.int64) if has_labels else None
    for k, row in enumerate(body):
        if len(row) != len(header):
            raise FormatError(f"{path}:{k + 2}: expected {len(header)} fields, got {len(row)}")
        try:
            inputs[k] = [float(v) for v in row[:n_feat]]
            if has_labels:
                labels[k] = int(row[-1])
        except ValueError as e:
            raise FormatError(f"{path}:{k + 2}: {e}") from None
    return Dataset(inputs, labels)


# ---------------------------------------------------------------- IDX


def _read_idx(path, expected_magic: int, kind: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX {kind} magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = int(np.prod(dims))
    if len(buf) - head < count:
        raise FormatError(f"{path}: truncated IDX payload, header promises {count} bytes, "
                          f"found {len(buf) - head}")
    if len(buf) - head > count:
        raise FormatError(f"{path}: {len(buf) - head - count} trailing bytes after IDX payload")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike) -> Dataset:
    """Unsigned-byte IDX images (flattened, scaled by 1/255) with their label file."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"image/label count mismatch: {images.shape[0]} images, "
                          f"{labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64))


def write_idx(dataset: Dataset, images_path, labels_path, shape: tuple[int, int] | None = None) -> None:
    """Quantize inputs to bytes and write an IDX image/label pair (rows x cols images)."""
    if dataset.labels is None:
        raise ValueError("IDX export needs labels")
    if shape is None:
        side = int(round(np.sqrt(dataset.dim)))
        shape = (side, side) if side * side == dataset.dim else (1, dataset.dim)
    if len(shape) != 2 or shape[0] * shape[1] != dataset.dim:
        raise ValueError(f"image shape {shape} does not match dim {dataset.dim}")
    pixels = np.round(np.clip(dataset.inputs, 0, 1) * 255).astype(np.uint8)
    n = len(dataset)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, *shape))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())
