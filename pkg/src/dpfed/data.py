"""Datasets, preprocessing, and client partitioning."""
from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dpfed.errors import DataFormatError, SchemaError
from dpfed.model import TrainingBatch
from dpfed.seeding import check_seed

GRAY8_MAGIC = b"FG8\x00"
_GRAY8_HEADER = struct.Struct("<4sIII")
BLOB_SPACING = 4.0


class Provenance(str, enum.Enum):
    SYNTHETIC_BLOBS = "synthetic_blobs"
    CSV = "csv"
    RAW_GRAY8 = "raw_gray8"


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine map ``(x - mean) / scale``; constant features map to 0."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        if features.shape[0] == 0:
            raise ValueError("cannot fit a standardizer on an empty dataset")
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        constant = np.ptp(features, axis=0) == 0
        # scale 0 marks a constant column
        return cls(mean, np.where(constant, 0.0, std))

    def apply(self, features: np.ndarray) -> np.ndarray:
        centered = features - self.mean
        safe = np.where(self.scale == 0.0, 1.0, self.scale)
        return np.where(self.scale == 0.0, 0.0, centered / safe)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: Provenance
    feature_names: tuple[str, ...] = ()
    label_names: tuple[str, ...] = ()
    standardizer: Standardizer | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DataFormatError("features must be a 2-D matrix")
        y = np.asarray(self.labels).astype(np.int64)
        if y.shape != (x.shape[0],):
            raise DataFormatError(f"{x.shape[0]} rows but {y.size} labels")
        if self.class_count < 1:
            raise DataFormatError("class_count must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")
        if np.isnan(x).any():
            raise DataFormatError("features contain NaN")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{i}" for i in range(x.shape[1])))
        if not self.label_names:
            object.__setattr__(self, "label_names", tuple(str(i) for i in range(self.class_count)))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, index) -> "Dataset":
        return Dataset(
            self.features[index],
            self.labels[index],
            self.class_count,
            self.provenance,
            self.feature_names,
            self.label_names,
            self.standardizer,
        )

    def batch(self, index=None) -> TrainingBatch:
        if index is None:
            return TrainingBatch(self.features, self.labels)
        return TrainingBatch(self.features[index], self.labels[index])

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and self.class_count == other.class_count
            and self.provenance == other.provenance
            and self.feature_names == other.feature_names
            and self.label_names == other.label_names
        )


def _lattice_centers(class_count: int, feature_dim: int, rng: np.random.Generator) -> np.ndarray:
    side = 2
    while side**feature_dim < class_count:
        side += 1
    total = side**feature_dim
    if total <= 4096:
        picks = rng.choice(total, size=class_count, replace=False)
    else:
        picks = set()
        while len(picks) < class_count:
            picks.add(int(rng.integers(total)))
        picks = np.array(sorted(picks))
        rng.shuffle(picks)
    coords = np.array([np.unravel_index(int(p), (side,) * feature_dim) for p in picks], dtype=np.float64)
    return (coords - (side - 1) / 2.0) * BLOB_SPACING


def generate_blobs(
    class_count: int,
    samples_per_class: int,
    feature_dim: int,
    spread: float,
    seed: int,
) -> Dataset:
    """Isotropic Gaussian clusters, one per class, centered on distinct lattice points.

    Samples are returned in a seeded shuffled order.
    """
    for name, value in (("class_count", class_count), ("samples_per_class", samples_per_class), ("feature_dim", feature_dim)):
        if isinstance(value, bool) or int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value}")
    if not spread > 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = np.random.Generator(np.random.PCG64(check_seed(seed)))
    centers = _lattice_centers(class_count, feature_dim, rng)
    labels = np.repeat(np.arange(class_count), samples_per_class)
    features = centers[labels] + spread * rng.standard_normal((labels.size, feature_dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], class_count, Provenance.SYNTHETIC_BLOBS)


def _resolve_label_column(header: list[str], label_column: str | int) -> int:
    if isinstance(label_column, int) and not isinstance(label_column, bool):
        idx = label_column if label_column >= 0 else len(header) + label_column
        if not 0 <= idx < len(header):
            raise SchemaError(f"label column index {label_column} out of range for {len(header)} columns")
        return idx
    if label_column not in header:
        raise SchemaError(f"label column '{label_column}' not found in header {header}")
    return header.index(label_column)


def load_csv(path: str | Path, label_column: str | int = "label") -> Dataset:
    """Read a header-first CSV; labels map to dense indices in first-appearance order."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, header row required") from None
        label_idx = _resolve_label_column(header, label_column)
        label_map: dict[str, int] = {}
        rows, labels = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{reader.line_num}: expected {len(header)} cells, got {len(row)}")
            values = []
            for col, cell in enumerate(row):
                if col == label_idx:
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}:{reader.line_num}: non-numeric value {cell!r} in column '{header[col]}'"
                    ) from None
            rows.append(values)
            labels.append(label_map.setdefault(row[label_idx], len(label_map)))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    names = tuple(h for i, h in enumerate(header) if i != label_idx)
    return Dataset(
        np.array(rows, dtype=np.float64),
        np.array(labels, dtype=np.int64),
        len(label_map),
        Provenance.CSV,
        feature_names=names,
        label_names=tuple(label_map),
    )


def write_csv(dataset: Dataset, path: str | Path, label_column: str = "label") -> None:
    """Write features (shortest round-trip float repr) followed by the original label names."""
    if label_column in dataset.feature_names:
        raise SchemaError(f"label column '{label_column}' collides with a feature name")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(dataset.feature_names) + [label_column])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [dataset.label_names[label]])


def normalize(dataset: Dataset, standardizer: Standardizer | None = None) -> Dataset:
    """Standardize each feature to zero mean and unit variance.

    The fitted transform is kept on ``result.standardizer``; pass it back in
    to apply the same map to evaluation data.
    """
    if len(dataset) == 0:
        raise ValueError("cannot normalize an empty dataset")
    std = standardizer if standardizer is not None else Standardizer.fit(dataset.features)
    return Dataset(
        std.apply(dataset.features),
        dataset.labels,
        dataset.class_count,
        dataset.provenance,
        dataset.feature_names,
        dataset.label_names,
        std,
    )


def equalize_gray8(image, width: int, height: int) -> np.ndarray:
    """Cumulative-histogram equalization of an 8-bit grayscale image onto [0, 255]."""
    img = np.frombuffer(bytes(image), dtype=np.uint8) if isinstance(image, (bytes, bytearray)) else np.asarray(image)
    if img.dtype != np.uint8:
        raise DataFormatError("image must be 8-bit")
    flat = img.reshape(-1)
    if flat.size != width * height:
        raise DataFormatError(f"buffer has {flat.size} pixels, expected {width}x{height}")
    hist = np.bincount(flat, minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = cdf[hist.nonzero()[0][0]]
    n = flat.size
    if n == cdf_min:
        return flat.copy()
    lut = np.floor((cdf - cdf_min) / (n - cdf_min) * 255.0 + 0.5)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[flat]


def read_gray8(path: str | Path) -> np.ndarray:
    """Images as a ``(count, height, width)`` uint8 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _GRAY8_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, count, width, height = _GRAY8_HEADER.unpack_from(raw)
    if magic != GRAY8_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    expected = count * width * height
    body = raw[_GRAY8_HEADER.size :]
    if len(body) != expected:
        raise DataFormatError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, height, width).copy()


def write_gray8(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise DataFormatError("images must be a (count, height, width) uint8 array")
    count, height, width = images.shape
    with Path(path).open("wb") as fh:
        fh.write(_GRAY8_HEADER.pack(GRAY8_MAGIC, count, width, height))
        fh.write(np.ascontiguousarray(images).tobytes())


def load_gray8(path: str | Path, labels: Sequence, equalize: bool = True) -> Dataset:
    """Flatten RawGray8 images into features scaled to [0, 1].

    ``labels`` gives one label per image; they map to dense indices in
    first-appearance order.
    """
    images = read_gray8(path)
    labels = [str(lab) for lab in labels]
    if len(labels) != images.shape[0]:
        raise DataFormatError(f"{len(labels)} labels for {images.shape[0]} images")
    count, height, width = images.shape
    rows = []
    for img in images:
        if equalize:
            img = equalize_gray8(img, width, height)
        rows.append(img.reshape(-1).astype(np.float64) / 255.0)
    label_map: dict[str, int] = {}
    idx = [label_map.setdefault(lab, len(label_map)) for lab in labels]
    features = np.array(rows).reshape(count, width * height)
    return Dataset(features, np.array(idx, dtype=np.int64), max(len(label_map), 1), Provenance.RAW_GRAY8,
                   label_names=tuple(label_map))


class PartitionMode(str, enum.Enum):
    IID = "iid"
    LABEL_SKEW = "label_skew"


@dataclass(frozen=True)
class PartitionPlan:
    mode: PartitionMode
    client_count: int
    seed: int
    concentration: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", PartitionMode(self.mode))
        if isinstance(self.client_count, bool) or int(self.client_count) != self.client_count or self.client_count < 1:
            raise ValueError("client_count must be a positive integer")
        if self.mode is PartitionMode.LABEL_SKEW and not (self.concentration > 0 and math.isfinite(self.concentration)):
            raise ValueError("concentration must be positive and finite")
        check_seed(self.seed)


def _dirichlet_via_gamma(alpha: float, k: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.gamma(alpha, 1.0, size=k)
    total = g.sum()
    if total == 0.0:
        # every gamma draw underflowed (tiny alpha): all mass on one client
        p = np.zeros(k)
        p[int(rng.integers(k))] = 1.0
        return p
    return g / total


def partition(labels, plan: PartitionPlan) -> list[np.ndarray]:
    """Split sample indices into ``plan.client_count`` disjoint, covering, non-empty shards.

    ``labels`` may be a :class:`Dataset` or a label array. Each shard is sorted.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels)
    n, k = labels.size, plan.client_count
    if k > n:
        raise ValueError(f"cannot split {n} samples across {k} clients")
    rng = np.random.Generator(np.random.PCG64(plan.seed))
    if plan.mode is PartitionMode.IID:
        return [np.sort(part) for part in np.array_split(rng.permutation(n), k)]

    shards: list[list[int]] = [[] for _ in range(k)]
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        props = _dirichlet_via_gamma(plan.concentration, k, rng)
        cuts = np.floor(np.cumsum(props)[:-1] * members.size + 0.5).astype(int)
        for client, chunk in enumerate(np.split(members, np.clip(cuts, 0, members.size))):
            shards[client].extend(int(i) for i in chunk)
    for client in range(k):
        while not shards[client]:
            donor = max(range(k), key=lambda c: (len(shards[c]), -c))
            shards[client].append(shards[donor].pop())
    return [np.array(sorted(s), dtype=np.int64) for s in shards]
