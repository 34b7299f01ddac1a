"""Dataset ingestion and synthesis.

Two sources: big-endian IDX image/label files (the classic handwritten-
digit distribution format) and a seeded synthetic spirals generator used
as the desk-scale classification task.  Inputs are stored with the
sample axis last to match the layer convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file failed validation (bad magic, truncation, mismatch)."""


@dataclass
class Dataset:
    """Feature tensor (sample axis last), integer labels, a split tag,
    and optional per-channel normalization statistics."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.inputs.shape[-1] != self.labels.size:
            raise ValueError(
                f"{self.inputs.shape[-1]} samples but {self.labels.size} labels"
            )
        if self.std is not None and np.any(np.asarray(self.std) <= 0):
            raise ValueError("std entries must be positive")

    @property
    def size(self) -> int:
        return self.labels.size

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IdxFormatError(f"{path}: truncated file while reading {what}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair.

    Headers are big-endian; pixel bytes are scaled to [0, 1].  Distinct
    errors for a bad magic number, a truncated file, and an image/label
    count mismatch."""
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        count, rows, cols = struct.unpack(">III", _read_exact(fh, 12, images_path, "header"))
        raw = _read_exact(fh, count * rows * cols, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).astype(float) / 255.0
        images = images.reshape(count, rows, cols)

    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        (label_count,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "header"))
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path, "labels"), dtype=np.uint8)

    if label_count != count:
        raise IdxFormatError(
            f"count mismatch: {count} images in {images_path} but {label_count} labels in {labels_path}"
        )
    # (1, rows, cols, n): single-channel image tensor, sample axis last.
    inputs = np.transpose(images, (1, 2, 0))[None, ...]
    return Dataset(inputs=inputs, labels=labels.astype(int))


def synth_spirals(classes: int, per_class: int, noise: float, seed: int, split: str = "train") -> Dataset:
    """Interleaved planar spirals with Gaussian angular noise.

    Class ``c`` follows radius t, angle 2*pi*(t + c/classes) for t in
    (0, 1], with noise applied to the angle so the displacement scales
    with the radius and the arms stay separated near the origin.  With
    ``noise = 0`` the points lie exactly on the curves.  Fully determined
    by the seed."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("need at least one point per class")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5B1A])))
    t = np.linspace(0.05, 1.0, per_class)
    coords = np.empty((2, classes * per_class))
    labels = np.empty(classes * per_class, dtype=int)
    for c in range(classes):
        angle = 2.0 * np.pi * (t + c / classes) + noise * rng.standard_normal(per_class)
        block = slice(c * per_class, (c + 1) * per_class)
        coords[0, block] = t * np.cos(angle)
        coords[1, block] = t * np.sin(angle)
        labels[block] = c
    return Dataset(inputs=coords, labels=labels, split=split)


def normalization_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation (channel = axis 0)."""
    flat = dataset.inputs.reshape(dataset.inputs.shape[0], -1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    std = np.where(std <= 0, 1.0, std)
    return mean, std


def normalize(dataset: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    """Apply precomputed statistics; validation data must be normalized
    with the training statistics, so they are always passed in."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise ValueError("std entries must be positive")
    shape = (-1,) + (1,) * (dataset.inputs.ndim - 1)
    inputs = (dataset.inputs - mean.reshape(shape)) / std.reshape(shape)
    return replace(dataset, inputs=inputs, mean=mean, std=std)
