"""Dataset container, file ingestion and synthetic generators.

File formats understood by the loaders:

CSV
    Header row ``y,x1,...,xm``; one point per subsequent row, label first,
    all fields decimal text. Feature count is inferred from the header.

IDX / ubyte
    Big-endian binary. Image file: 4-byte magic ``0x00000803``, then three
    4-byte unsigned dims (count, rows, cols), then ``count*rows*cols``
    unsigned pixel bytes in row-major order. Label file: magic
    ``0x00000801``, one 4-byte count, then ``count`` label bytes.
    Images are flattened to vectors and scaled to [0, 1].
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatchError, EmptyDatasetError


class LabeledPoint(NamedTuple):
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class Dataset:
    """Immutable (features, labels) pair; rows are data points."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labs = np.ascontiguousarray(np.asarray(self.labels, dtype=np.float64))
        if feats.ndim != 2:
            raise DimensionMismatchError(f"features must be 2-d, got shape {feats.shape}")
        if labs.shape != (feats.shape[0],):
            raise DimensionMismatchError(
                f"labels shape {labs.shape} does not match {feats.shape[0]} points"
            )
        if not (np.isfinite(feats).all() and np.isfinite(labs).all()):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])

    def points(self) -> Iterator[LabeledPoint]:
        for i in range(self.n):
            yield LabeledPoint(self.features[i], float(self.labels[i]))

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise EmptyDatasetError("cannot concatenate zero datasets")
        return Dataset(
            np.concatenate([p.features for p in parts], axis=0),
            np.concatenate([p.labels for p in parts], axis=0),
        )


def require_nonempty(dataset: Dataset, where: str) -> None:
    if dataset.n == 0:
        raise EmptyDatasetError(f"{where}: dataset is empty")


# ---------------------------------------------------------------------------
# file ingestion


def load_csv(path) -> Dataset:
    """Read a ``y,x1,...,xm`` CSV into a Dataset."""
    path = Path(path)
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "y":
            raise ValueError(f"{path}: expected header row starting with 'y'")
        m = len(header) - 1
        ys, xs = [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != m + 1:
                raise DimensionMismatchError(
                    f"{path}:{row_no}: expected {m + 1} fields, got {len(row)}"
                )
            ys.append(float(row[0]))
            xs.append([float(v) for v in row[1:]])
    if not ys:
        raise EmptyDatasetError(f"{path}: no data rows")
    return Dataset(np.array(xs), np.array(ys))


def save_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["y"] + [f"x{i + 1}" for i in range(dataset.feature_dim)])
        for x, y in dataset.points():
            writer.writerow([repr(y)] + [repr(float(v)) for v in x])


_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def load_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or struct.unpack(">I", raw[:4])[0] != _IDX_IMAGE_MAGIC:
        raise ValueError(f"{path}: not an IDX image file")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or struct.unpack(">I", raw[:4])[0] != _IDX_LABEL_MAGIC:
        raise ValueError(f"{path}: not an IDX label file")
    magic, count = struct.unpack(">II", raw[:8])
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.float64)


def load_idx(image_path, label_path, limit: int | None = None) -> Dataset:
    feats = load_idx_images(image_path)
    labs = load_idx_labels(label_path)
    if feats.shape[0] != labs.shape[0]:
        raise DimensionMismatchError(
            f"image count {feats.shape[0]} != label count {labs.shape[0]}"
        )
    if limit is not None:
        feats, labs = feats[:limit], labs[:limit]
    return Dataset(feats, labs)


# ---------------------------------------------------------------------------
# synthetic generators


def make_blobs(num_classes: int, points_per_class: int, feature_dim: int,
               spread: float, rng: np.random.Generator,
               center_scale: float = 1.0,
               orthogonal_centers: bool = False) -> Dataset:
    """Gaussian class blobs with unit-sphere centers scaled by center_scale.

    ``orthogonal_centers`` orthonormalizes the center directions (requires
    feature_dim >= num_classes), making the classes linearly separable with
    wide margins.
    """
    centers = rng.standard_normal((num_classes, feature_dim))
    if orthogonal_centers:
        if feature_dim < num_classes:
            raise ValueError("orthogonal centers need feature_dim >= num_classes")
        q, _ = np.linalg.qr(centers.T)
        centers = q[:, :num_classes].T
    centers *= center_scale / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    feats, labs = [], []
    for cls in range(num_classes):
        pts = centers[cls] + spread * rng.standard_normal((points_per_class, feature_dim))
        feats.append(pts)
        labs.append(np.full(points_per_class, cls, dtype=np.float64))
    order = rng.permutation(num_classes * points_per_class)
    return Dataset(np.concatenate(feats)[order], np.concatenate(labs)[order])


def make_ridge_cloud(n: int, feature_dim: int, noise: float,
                     rng: np.random.Generator) -> Dataset:
    """Linear-response regression cloud y = w0.x + noise."""
    w0 = rng.standard_normal(feature_dim)
    feats = rng.standard_normal((n, feature_dim))
    labs = feats @ w0 + noise * rng.standard_normal(n)
    return Dataset(feats, labs)


def make_shared_design(direction: np.ndarray, label_sets: Sequence[Sequence[float]]) -> list[Dataset]:
    """One dataset per label set, every point carrying the same feature vector.

    With a common design the per-group Hessians coincide, so smoothness,
    strong convexity, gradient-diversity and SGD-noise constants of the
    resulting ridge problems are exact closed forms; used by the certified
    validation problems.
    """
    direction = np.asarray(direction, dtype=np.float64)
    out = []
    for labels in label_sets:
        labels = np.asarray(labels, dtype=np.float64)
        out.append(Dataset(np.tile(direction, (labels.size, 1)), labels))
    return out
