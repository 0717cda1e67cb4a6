"""Datasets: synthetic blobs, IDX (MNIST) files, non-IID partitions, public sets."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, IdxFormatError, ParameterError
from .funcspace import MeasureSet

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
_IDX_UBYTE = 0x08


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    # positions in the source pool, used to prove train/test disjointness
    source_index: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ParameterError("need inputs (K, N) and one label per input")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ParameterError("label out of range")
        if not np.all(np.isfinite(x)):
            raise ParameterError("inputs must be finite")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        src = idx if self.source_index is None else self.source_index[idx]
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes, src)

    def classes(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels))


@dataclass(frozen=True)
class PublicSet:
    """Unlabeled inputs shared by every device before training."""

    inputs: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ParameterError("public set needs at least one input")
        object.__setattr__(self, "inputs", x)

    def __len__(self):
        return self.inputs.shape[0]


def blob_means(classes: int, dim: int = 2, radius: float = 1.0) -> np.ndarray:
    """Class means evenly spaced on a circle in the first two coordinates."""
    angles = 2 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def synth_blobs(classes: int, per_class: int, spread: float, seed=None,
                means: Optional[np.ndarray] = None, dim: int = 2) -> LabeledDataset:
    """Isotropic Gaussian clusters, exactly ``per_class`` points per class."""
    if classes < 2:
        raise ParameterError("need at least two classes")
    means = blob_means(classes, dim) if means is None else np.asarray(means, dtype=float)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, means.shape[1]))
    return LabeledDataset(x, labels, classes, np.arange(labels.size))


def nearest_mean_accuracy(train: LabeledDataset, test: LabeledDataset) -> float:
    """Accuracy of the classify-by-closest-class-mean rule."""
    means = np.stack([train.inputs[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d = ((test.inputs[:, None, :] - means[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == test.labels))


def train_test_split(ds: LabeledDataset, test_per_class: int, seed=None):
    """Hold out ``test_per_class`` examples of every class; the rest is training pool."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < test_per_class:
            raise ConfigurationError(f"class {c} has only {idx.size} examples")
        test_idx.extend(rng.choice(idx, size=test_per_class, replace=False))
    test_idx = np.sort(np.asarray(test_idx, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    return ds.subset(train_idx), ds.subset(test_idx)


# -- IDX ----------------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX array (the MNIST container)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the magic number", len(raw))
    zero, dtype, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or dtype != _IDX_UBYTE or ndim < 1:
        raise IdxFormatError(f"bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IdxFormatError(f"expected {count} data bytes, found {len(raw) - header}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ParameterError("IDX writer only handles uint8 arrays")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, _IDX_UBYTE, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def mnist_load(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Images flattened to rows and scaled to [0, 1]; labels as integers."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    with open(images_path, "rb") as fh:
        magic_img = struct.unpack(">I", fh.read(4))[0]
    with open(labels_path, "rb") as fh:
        magic_lbl = struct.unpack(">I", fh.read(4))[0]
    if magic_img != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"image file magic {magic_img} != {IDX_IMAGES_MAGIC}", 0)
    if magic_lbl != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"label file magic {magic_lbl} != {IDX_LABELS_MAGIC}", 0)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    x = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return LabeledDataset(x, labels.astype(np.int64), num_classes, np.arange(labels.shape[0]))


# -- partitions ---------------------------------------------------------------


def _draw(ds: LabeledDataset, classes: Sequence[int], per_device: int, rng) -> LabeledDataset:
    share, extra = divmod(per_device, len(classes))
    picked = []
    for pos, c in enumerate(classes):
        want = share + (1 if pos < extra else 0)
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < want:
            raise ConfigurationError(f"class {c} has {idx.size} examples, need {want}")
        picked.append(rng.choice(idx, size=want, replace=False))
    return ds.subset(np.sort(np.concatenate(picked)))


def ring_classes(device: int, num_classes: int, labels_per_device: int = 2) -> list[int]:
    """Device ``i`` holds classes ``i, i+1, ...`` modulo the class count."""
    return [(device + k) % num_classes for k in range(labels_per_device)]


def partition_ring(ds: LabeledDataset, n: int, labels_per_device: int = 2,
                   per_device: int = 1000, seed=None) -> list[LabeledDataset]:
    """Neighboring devices share a class, so nearby data look alike."""
    rng = np.random.default_rng(seed)
    return [_draw(ds, ring_classes(i, ds.num_classes, labels_per_device), per_device, rng)
            for i in range(n)]


def partition_random_pairs(ds: LabeledDataset, n: int, seed=None, per_device: int = 1000,
                           labels_per_device: int = 2) -> list[LabeledDataset]:
    """Every device gets ``labels_per_device`` distinct classes chosen at random."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        classes = sorted(int(c) for c in rng.choice(ds.num_classes, labels_per_device, replace=False))
        out.append(_draw(ds, classes, per_device, rng))
    return out


def make_public(source, size: int, seed=None) -> PublicSet:
    """Draw ``size`` inputs uniformly from a pool; labels are dropped.

    ``source`` is a dataset or a bare input array. Overlap with local data
    is allowed.
    """
    if size < 1:
        raise ParameterError("public set size must be >= 1")
    x = source.inputs if isinstance(source, LabeledDataset) else np.asarray(source, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.choice(x.shape[0], size=size, replace=size > x.shape[0])
    return PublicSet(x[idx])


def grid_from_pool(pool, size: int, seed=None) -> np.ndarray:
    """Deterministic strided subsample of a seeded shuffle of the pool."""
    x = pool.inputs if isinstance(pool, LabeledDataset) else np.asarray(pool, dtype=float)
    if not 1 <= size <= x.shape[0]:
        raise ParameterError(f"grid size must be in 1..{x.shape[0]}")
    order = np.random.default_rng(seed).permutation(x.shape[0])
    stride = x.shape[0] // size
    return x[order[::stride][:size]]


def measures_from_partition(partitions: Sequence, grid_points) -> MeasureSet:
    """Nearest-grid-point histograms of each device's inputs.

    Device weights are normalized counts; the global measure is their
    average, so grid points nobody lands on carry zero weight everywhere.
    """
    grid = np.asarray(grid_points, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    local = np.zeros((len(partitions), grid.shape[0]))
    for i, part in enumerate(partitions):
        x = part.inputs if isinstance(part, (LabeledDataset, PublicSet)) else np.asarray(part, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] == 0:
            raise ConfigurationError(f"device {i} has no data")
        d = ((x[:, None, :] - grid[None]) ** 2).sum(axis=2)
        counts = np.bincount(np.argmin(d, axis=1), minlength=grid.shape[0])
        local[i] = counts / counts.sum()
    return MeasureSet.from_locals(local)


def manifest(source: str, seed, per_device: int, rule: str, **extra) -> str:
    return json.dumps({"source": source, "seed": seed, "per_device": per_device, "rule": rule, **extra},
                      sort_keys=True)
