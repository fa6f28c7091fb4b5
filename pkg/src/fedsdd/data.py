"""Datasets, synthetic task generation, Dirichlet partitioning, server pool.

The synthetic task is a Gaussian mixture: one unit-covariance cluster per
class, cluster means sampled uniformly on a sphere whose radius controls
difficulty.  It is the desk-scale stand-in for an image benchmark and is
fully deterministic per seed.

Dataset files use a small binary format (see :func:`save_dataset`) so other
tooling can parse them without this package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_seed


class DatasetFormatError(ValueError):
    """Base class for dataset file format problems."""


class DatasetHeaderError(DatasetFormatError):
    """Bad magic, impossible header fields, or payload size mismatch."""


class DatasetTruncatedError(DatasetFormatError):
    """File ends before the header-declared payload."""


class DatasetLabelError(DatasetFormatError):
    """A stored label is outside the declared class range."""


@dataclass
class LabeledDataset:
    """Feature matrix [n, d] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"inputs must be a non-empty 2-D matrix, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must align with inputs rows")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count)


@dataclass
class UnlabeledPool:
    """Server-side unlabeled inputs used for distillation."""

    inputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"pool inputs must be a non-empty 2-D matrix, got shape {self.inputs.shape}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass
class PartitionSpec:
    """Assignment of dataset rows to clients.

    ``client_indices[i]`` holds the (sorted, disjoint) row indices of client
    ``i``; every client owns at least one sample.
    """

    client_indices: list[np.ndarray]
    alpha: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]


def make_synthetic(classes: int, dim: int, per_class: int, separation: float,
                   seed: int) -> LabeledDataset:
    """Gaussian class clusters with means on a sphere of radius ``separation``.

    Rows are ordered class-major: class c occupies rows
    [c * per_class, (c + 1) * per_class).  Deterministic per seed.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("need at least 1 sample per class")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((classes, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions / np.where(norms > 0, norms, 1.0)
    xs = []
    ys = []
    for c in range(classes):
        xs.append(rng.standard_normal((per_class, dim)) + means[c])
        ys.append(np.full(per_class, c, dtype=np.int64))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), classes)


def dirichlet_partition(ds: LabeledDataset, n_clients: int, alpha: float,
                        seed: int) -> PartitionSpec:
    """Partition rows across clients with per-class Dirichlet(alpha) proportions.

    Samples are assigned without replacement; a client that ends up empty
    steals one sample from the currently largest client so that every client
    holds at least one sample.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_clients > len(ds):
        raise ValueError(f"cannot give {n_clients} clients at least one of {len(ds)} samples")
    rng = np.random.default_rng(seed)
    assigned: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = np.floor(np.cumsum(props) * idx.size).astype(np.int64)[:-1]
        for i, chunk in enumerate(np.split(idx, cuts)):
            assigned[i].append(chunk)
    parts = [np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
             for chunks in assigned]
    sizes = np.array([p.size for p in parts])
    while sizes.min() == 0:
        taker = int(np.flatnonzero(sizes == 0)[0])
        donor = int(np.argmax(sizes))
        parts[taker] = np.array([parts[donor][-1]], dtype=np.int64)
        parts[donor] = parts[donor][:-1]
        sizes[taker] = 1
        sizes[donor] -= 1
    parts = [np.sort(p) for p in parts]
    return PartitionSpec(parts, float(alpha), int(seed))


def split_server_pool(ds: LabeledDataset, fraction: float,
                      seed: int) -> tuple[LabeledDataset, UnlabeledPool]:
    """Split off an unlabeled server pool; returns (remaining labeled, pool)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(ds)
    n_pool = int(round(fraction * n))
    if n_pool < 1 or n - n_pool < 1:
        raise ValueError(f"fraction {fraction} leaves an empty side for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    pool_idx = np.sort(perm[:n_pool])
    rest_idx = np.sort(perm[n_pool:])
    return ds.subset(rest_idx), UnlabeledPool(ds.inputs[pool_idx])


def split_labeled(ds: LabeledDataset, fraction: float,
                  seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded disjoint split into (kept, held out) labeled datasets."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(ds)
    n_out = int(round(fraction * n))
    if n_out < 1 or n - n_out < 1:
        raise ValueError(f"fraction {fraction} leaves an empty side for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    out_idx = np.sort(perm[:n_out])
    keep_idx = np.sort(perm[n_out:])
    return ds.subset(keep_idx), ds.subset(out_idx)


_MAGIC = b"FSD1"


def save_dataset(ds: LabeledDataset | UnlabeledPool, path: str | Path) -> None:
    """Write the little-endian binary format.

    Layout: magic ``FSD1``, u32 {n, d, class_count}, n*d float64 inputs, then
    n u16 labels.  ``class_count == 0`` marks an unlabeled pool (no labels).
    """
    if isinstance(ds, UnlabeledPool):
        n, d, cc = len(ds), ds.dim, 0
        labels = None
    else:
        n, d, cc = len(ds), ds.dim, ds.class_count
        if cc > 0xFFFF:
            raise ValueError("class_count exceeds the u16 label range")
        labels = ds.labels
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<III", n, d, cc)
    blob += np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes()
    if labels is not None:
        blob += labels.astype("<u2").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_dataset(path: str | Path) -> LabeledDataset | UnlabeledPool:
    """Read the binary format written by :func:`save_dataset`."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise DatasetHeaderError(f"{path}: bad magic, not a dataset file")
    if len(raw) < 16:
        raise DatasetHeaderError(f"{path}: truncated header")
    n, d, cc = struct.unpack("<III", raw[4:16])
    if n == 0 or d == 0:
        raise DatasetHeaderError(f"{path}: header declares an empty dataset (n={n}, d={d})")
    inputs_bytes = n * d * 8
    labels_bytes = n * 2 if cc > 0 else 0
    expected = 16 + inputs_bytes + labels_bytes
    if len(raw) < expected:
        raise DatasetTruncatedError(
            f"{path}: payload truncated, expected {expected} bytes, file has {len(raw)}")
    if len(raw) > expected:
        raise DatasetHeaderError(
            f"{path}: header-declared size mismatches payload ({len(raw) - expected} trailing bytes)")
    inputs = np.frombuffer(raw, dtype="<f8", count=n * d, offset=16).reshape(n, d).copy()
    if cc == 0:
        return UnlabeledPool(inputs)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=16 + inputs_bytes).astype(np.int64)
    if labels.max() >= cc:
        raise DatasetLabelError(
            f"{path}: label {int(labels.max())} out of range for class_count={cc}")
    return LabeledDataset(inputs, labels, cc)


def class_histogram(ds: LabeledDataset, partition: PartitionSpec) -> np.ndarray:
    """Counts[client, class] over the partition."""
    hist = np.zeros((partition.n_clients, ds.class_count), dtype=np.int64)
    for i, idx in enumerate(partition.client_indices):
        hist[i] = np.bincount(ds.labels[idx], minlength=ds.class_count)
    return hist


def heterogeneity(ds: LabeledDataset, partition: PartitionSpec) -> float:
    """Mean over clients of total-variation distance to the global class histogram."""
    hist = class_histogram(ds, partition).astype(np.float64)
    client_frac = hist / hist.sum(axis=1, keepdims=True)
    global_frac = np.bincount(ds.labels, minlength=ds.class_count) / len(ds)
    return float(0.5 * np.abs(client_frac - global_frac).sum(axis=1).mean())


def partition_rows(ds: LabeledDataset, partition: PartitionSpec) -> list[tuple[int, int, int]]:
    """(client_id, class_id, count) rows for CSV export."""
    hist = class_histogram(ds, partition)
    return [(ci, cl, int(hist[ci, cl]))
            for ci in range(partition.n_clients)
            for cl in range(ds.class_count)]


@dataclass(frozen=True)
class DataConfig:
    """Synthetic task shape and the train/test/pool split sizes."""

    classes: int = 10
    dim: int = 16
    separation: float = 2.5
    train_per_class: int = 100
    test_per_class: int = 200
    pool_per_class: int = 60
    server_val_fraction: float = 0.0

    def __post_init__(self):
        if self.classes < 2 or self.dim < 1:
            raise ValueError("classes must be >= 2 and dim >= 1")
        if min(self.train_per_class, self.test_per_class, self.pool_per_class) < 1:
            raise ValueError("per-class split sizes must be >= 1")
        if not 0.0 <= self.server_val_fraction < 1.0:
            raise ValueError("server_val_fraction must lie in [0, 1)")


@dataclass
class DataBundle:
    """Everything a run needs: client training data, test set, server pool."""

    train: LabeledDataset
    test: LabeledDataset
    pool: UnlabeledPool
    server_val: LabeledDataset | None = None


def make_bundle(cfg: DataConfig, seed: int) -> DataBundle:
    """Build the per-seed task: one generator draw, split into train/test/pool.

    All splits come from the same synthetic distribution; the pool drops its
    labels.  An optional server validation set is carved out of the training
    block before partitioning so that every method sees the same train data.
    """
    pc = cfg.train_per_class + cfg.test_per_class + cfg.pool_per_class
    full = make_synthetic(cfg.classes, cfg.dim, pc, cfg.separation,
                          derive_seed(seed, "data"))
    tp = cfg.train_per_class + cfg.pool_per_class
    trainpool_idx = np.concatenate([np.arange(c * pc, c * pc + tp) for c in range(cfg.classes)])
    test_idx = np.concatenate([np.arange(c * pc + tp, (c + 1) * pc) for c in range(cfg.classes)])
    trainpool = full.subset(trainpool_idx)
    test = full.subset(test_idx)
    pool_fraction = cfg.pool_per_class * cfg.classes / len(trainpool)
    train, pool = split_server_pool(trainpool, pool_fraction, derive_seed(seed, "pool"))
    server_val = None
    if cfg.server_val_fraction > 0.0:
        train, server_val = split_labeled(train, cfg.server_val_fraction,
                                          derive_seed(seed, "server-val"))
    return DataBundle(train=train, test=test, pool=pool, server_val=server_val)
