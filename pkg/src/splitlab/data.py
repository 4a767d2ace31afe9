"""Datasets: synthetic Gaussian blobs, CSV ingestion, IDX (MNIST-style) files."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class CSVFormatError(ValueError):
    """Malformed CSV input. ``row`` and ``col`` are 1-based data coordinates."""

    def __init__(self, message, row=None, col=None):
        loc = "" if row is None else f" at (row {row}, col {col})"
        super().__init__(message + loc)
        self.row = row
        self.col = col


class MissingColumnError(CSVFormatError):
    pass


class EmptyFileError(CSVFormatError):
    pass


class IDXFormatError(ValueError):
    pass


class IDXMagicError(IDXFormatError):
    pass


class IDXCountMismatchError(IDXFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    k: int
    split: str = "train"
    ids: np.ndarray = None
    label_values: tuple = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if X.ndim != 2:
            raise ValueError("features must be 2-D")
        if y.size != X.shape[0]:
            raise ValueError(f"{y.size} labels for {X.shape[0]} rows")
        if y.size and (y.min() < 0 or y.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain NaN or Inf")
        ids = np.arange(y.size, dtype=np.int64) if self.ids is None else np.asarray(self.ids, np.int64)
        if ids.shape != y.shape:
            raise ValueError("ids must align with labels")
        for arr in (X, y, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.labels.size

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, index, split=None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.features[index], self.labels[index], self.k,
            split or self.split, self.ids[index], self.label_values,
        )


def gen_synthetic(n, d, k, class_weights, separation, rng: RngStream) -> Dataset:
    """Unit-covariance Gaussian blobs, one per class.

    Class means sit on orthonormal random directions scaled so every pair of
    means is exactly ``separation`` apart. Labels are i.i.d. categorical
    draws from ``class_weights``. Samples are generated as a stream, so a
    larger ``n`` with the same seed extends rather than reshuffles a smaller
    one.
    """
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ValueError("class_weights must be a length-k probability vector")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if k > d:
        raise ValueError("need d >= k for orthogonal class directions")
    q, _ = np.linalg.qr(rng.child("means").gaussian((d, k)))
    means = q.T * (separation / np.sqrt(2.0))
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    labels = np.searchsorted(cdf, rng.child("labels").uniform(n), side="right")
    noise = rng.child("noise").gaussian((n, d))
    return Dataset(means[labels] + noise, labels, k)


def imbalanced_binary(n=10_000, d=32, positive_rate=0.05, separation=6.0, seed=0) -> Dataset:
    """CTR-style binary workload: rare positives, well-separated blobs."""
    return gen_synthetic(n, d, 2, [1.0 - positive_rate, positive_rate], separation, RngStream(seed))


def train_test_split(data: Dataset, test_fraction=0.2, rng: RngStream = None):
    """Stratified seeded split; every class appears on both sides."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = rng or RngStream(0)
    train_idx, test_idx = [], []
    for cls in range(data.k):
        members = np.flatnonzero(data.labels == cls)
        if members.size == 0:
            continue
        if members.size < 2:
            raise ValueError(f"class {cls} has fewer than 2 samples")
        members = members[rng.permutation(members.size)]
        n_test = int(round(test_fraction * members.size))
        n_test = min(max(n_test, 1), members.size - 1)
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return data.subset(train_idx, "train"), data.subset(test_idx, "test")


def load_csv(path, label_column, columns=None) -> Dataset:
    """Read a headed numeric CSV.

    Labels must be integer-valued; they are remapped to ``0..k-1`` in sorted
    order of the original values, which are kept in ``label_values``.
    ``columns`` selects feature columns (default: every non-label column).
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise EmptyFileError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise MissingColumnError(f"{path}: no column named {label_column!r}")
    feature_cols = [h for h in header if h != label_column] if columns is None else list(columns)
    for name in feature_cols:
        if name not in header:
            raise MissingColumnError(f"{path}: no column named {name!r}")
    body = rows[1:]
    if not body:
        raise EmptyFileError(f"{path}: header but no data rows")
    li = header.index(label_column)
    fi = [header.index(c) for c in feature_cols]

    X = np.empty((len(body), len(fi)))
    raw_labels = np.empty(len(body), dtype=np.int64)
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise CSVFormatError(f"expected {len(header)} cells, found {len(row)}", r, len(row))
        for j, c in enumerate(fi):
            X[r - 1, j] = _parse_cell(row[c], r, c + 1)
        value = _parse_cell(row[li], r, li + 1)
        if value != int(value):
            raise CSVFormatError("label is not integer-valued", r, li + 1)
        raw_labels[r - 1] = int(value)
    values, labels = np.unique(raw_labels, return_inverse=True)
    return Dataset(X, labels, len(values), label_values=tuple(int(v) for v in values))


def _parse_cell(text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise CSVFormatError(f"non-numeric cell {text!r}", row, col) from None
    if not np.isfinite(value):
        raise CSVFormatError(f"non-finite cell {text!r}", row, col)
    return value


def write_csv(data: Dataset, path, label_column="label"):
    names = [f"f{j}" for j in range(data.n_features)]
    labels = data.labels if data.label_values is None else np.asarray(data.label_values)[data.labels]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + [label_column])
        for x, y in zip(data.features, labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1], one row per image."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise IDXFormatError(f"{images_path}: too short for an IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IDXMagicError(f"{images_path}: bad image magic 0x{magic:08x}")
    expected = count * rows * cols
    if len(blob) - 16 < expected:
        raise IDXFormatError(f"{images_path}: expected {expected} pixel bytes, found {len(blob) - 16}")
    pixels = np.frombuffer(blob, np.uint8, expected, 16).reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise IDXFormatError(f"{labels_path}: too short for an IDX label header")
    magic, n_labels = struct.unpack(">II", blob[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IDXMagicError(f"{labels_path}: bad label magic 0x{magic:08x}")
    if n_labels != count:
        raise IDXCountMismatchError(f"{count} images but {n_labels} labels")
    if len(blob) - 8 < n_labels:
        raise IDXFormatError(f"{labels_path}: expected {n_labels} label bytes, found {len(blob) - 8}")
    labels = np.frombuffer(blob, np.uint8, n_labels, 8).astype(np.int64)
    k = int(labels.max()) + 1 if n_labels else 1
    return Dataset(pixels.astype(np.float64) / 255.0, labels, max(k, 1))


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (count, rows, cols) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())
