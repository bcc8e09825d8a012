"""Datasets: synthetic blobs, IDX and CSV loaders, standardization, splits."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mixcal.errors import FormatError, ValidationError

STD_FLOOR = 1e-8
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"
    normalization: Optional[tuple] = None
    label_map: Optional[tuple] = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValidationError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       name=name or self.name)


def make_blobs(n_classes: int, n_per_class: int, dim: int, centers_spread: float,
               within_std: float, seed: int, name: str = "blobs",
               latent_dim: Optional[int] = None, ambient_std: float = 0.0) -> Dataset:
    """Isotropic Gaussian clusters around seeded random centers.

    With ``latent_dim < dim`` the clusters live in a random ``latent_dim``
    subspace of R^dim and only ``ambient_std`` noise leaves it, so the data
    occupies a thin slab the way natural images occupy a low-dimensional
    manifold.
    """
    if n_classes < 2:
        raise ValidationError("need at least two classes")
    if n_per_class < 1 or dim < 1:
        raise ValidationError("n_per_class and dim must be positive")
    if within_std < 0 or centers_spread < 0 or ambient_std < 0:
        raise ValidationError("spreads must be non-negative")
    latent = dim if latent_dim is None else int(latent_dim)
    if not 1 <= latent <= dim:
        raise ValidationError(f"latent_dim must lie in [1, {dim}], got {latent}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, centers_spread, size=(n_classes, latent))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centers[labels] + within_std * rng.standard_normal((labels.size, latent))
    if latent < dim:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, latent)))
        features = features @ basis.T + ambient_std * rng.standard_normal((labels.size, dim))
    return Dataset(features, labels, n_classes, name)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, expected_magic: int, expected_ndim: int) -> tuple[tuple, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated at byte {len(raw)}, header needs 4 bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    header = 4 + 4 * expected_ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated at byte {len(raw)}, header needs {header} bytes")
    dims = struct.unpack(f">{expected_ndim}I", raw[4:header])
    need = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated at byte {len(raw)}, expected {need} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after byte {need}")
    return dims, raw[header:]


def load_idx(images_path, labels_path, n_classes: Optional[int] = None,
             name: Optional[str] = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), label_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != n_labels:
        raise ValidationError(f"{count} images but {n_labels} labels")
    features = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(features, labels, n_classes, name or Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels of shape (n,)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValidationError("images must be (n, rows, cols) with one label per image")
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, label_column: str = "label", name: Optional[str] = None) -> Dataset:
    """Numeric CSV with a header row; labels are remapped densely to 0..K-1."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise FormatError(f"{path}: no column named {label_column!r} in header")
        li = header.index(label_column)
        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell in row {lineno}") from None
            lab = values.pop(li)
            if not np.isfinite(lab) or lab != int(lab):
                raise FormatError(f"{path}: label {row[li]!r} in row {lineno} is not an integer")
            rows.append(values)
            raw_labels.append(int(lab))
    dim = len(header) - 1
    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    originals, labels = np.unique(np.array(raw_labels, dtype=np.int64), return_inverse=True)
    return Dataset(features, labels.astype(np.int64), len(originals), name or Path(path).stem,
                   label_map=tuple(int(v) for v in originals))


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    labels = dataset.labels
    if dataset.label_map is not None:
        labels = np.asarray(dataset.label_map)[labels]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(dataset.dim)] + [label_column])
        for row, lab in zip(dataset.features, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


# ---------------------------------------------------------------------------
# standardization and splits


def normalize_stats(train: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and floored std of the training split."""
    if len(train) < 1:
        raise ValidationError("cannot compute statistics of an empty dataset")
    x = train.features
    mean = x.mean(axis=0)
    constant = np.ptp(x, axis=0) == 0
    mean[constant] = x[0, constant]
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return mean, std


def apply_normalization(dataset: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    if mean.shape != (dataset.dim,) or std.shape != (dataset.dim,):
        raise ValidationError("normalization statistics do not match feature dim")
    return replace(dataset, features=(dataset.features - mean) / std,
                   normalization=(mean.copy(), std.copy()))


def split(dataset: Dataset, fractions: Sequence[float] = (0.6, 0.2, 0.2),
          seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle, then contiguous train/val/test cut."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    cuts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(dataset.subset(idx, f"{dataset.name}/{part}")
                 for idx, part in zip(cuts, ("train", "val", "test")))
