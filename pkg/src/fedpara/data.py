"""Datasets, IDX ingestion and client partitioning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; the message names the offending byte offset."""


class PartitionError(ValueError):
    """A partitioning request cannot be satisfied."""


@dataclass
class Dataset:
    features: np.ndarray  # N x d, float64
    labels: np.ndarray  # N, int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.split)


@dataclass
class Partition:
    """Client id -> example indices, for local training and local evaluation."""

    train: dict[int, np.ndarray]
    test: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.train)

    def sizes(self) -> list[int]:
        return [len(self.train[c]) for c in sorted(self.train)]


# ----------------------------------------------------------------------------
# synthesis and ingestion


def synth_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed,
                split: str = "train", centers: np.ndarray | None = None) -> Dataset:
    """Gaussian class clusters around unit-normal centers.

    Passing ``centers`` lets a test set share the train set's geometry.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = blob_centers(num_classes, dim, seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    feats = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(feats[order], labels[order], num_classes, split)


def _entropy(seed) -> list[int]:
    return [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]


def blob_centers(num_classes: int, dim: int, seed) -> np.ndarray:
    return np.random.default_rng([0xB10B, *_entropy(seed)]).standard_normal((num_classes, dim))


def make_blob_task(num_classes: int, per_class_train: int, per_class_test: int, dim: int,
                   spread: float, seed: int) -> tuple[Dataset, Dataset]:
    centers = blob_centers(num_classes, dim, seed)
    train = synth_blobs(num_classes, per_class_train, dim, spread, [seed, 1], "train", centers)
    test = synth_blobs(num_classes, per_class_test, dim, spread, [seed, 2], "test", centers)
    return train, test


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise IdxFormatError(
            f"{path}: truncated data at byte offset {len(raw)}, expected {need} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (MNIST layout); pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images "
            f"(count field at byte offset 4)"
        )
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), num_classes, split)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())


# ----------------------------------------------------------------------------
# partitioning


def split_iid(dataset: Dataset, num_clients: int, seed) -> Partition:
    n = len(dataset)
    if not 1 <= num_clients <= n:
        raise PartitionError(f"need 1 <= clients <= {n}, got {num_clients}")
    order = np.random.default_rng(seed).permutation(n)
    return Partition({c: np.sort(part) for c, part in enumerate(np.array_split(order, num_clients))})


def split_dirichlet(dataset: Dataset, num_clients: int, alpha: float, seed,
                    max_attempts: int = 1000) -> Partition:
    """Per-class client proportions drawn from ``Dirichlet(alpha)``.

    Draws leaving a client empty are redrawn with the next sub-seed.
    """
    if alpha <= 0:
        raise PartitionError(f"alpha must be > 0, got {alpha}")
    if num_clients > len(dataset):
        raise PartitionError("more clients than examples")
    for attempt in range(max_attempts):
        rng = np.random.default_rng([*_entropy(seed), attempt])
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in range(dataset.num_classes):
            idx = rng.permutation(np.flatnonzero(dataset.labels == c))
            p = rng.dirichlet(np.full(num_clients, alpha))
            cuts = np.floor(np.cumsum(p)[:-1] * idx.size).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        train = {k: np.sort(np.concatenate(b)) for k, b in enumerate(buckets)}
        if all(v.size for v in train.values()):
            return Partition(train)
    raise PartitionError(f"no non-empty Dirichlet split found in {max_attempts} draws")


def split_pathological(dataset: Dataset, num_clients: int, classes_per_client: int = 2,
                       seed=0) -> Partition:
    """Label-sorted shard split: every client sees at most ``classes_per_client`` labels.

    ``num_clients * classes_per_client`` shards are cut, each inside a single
    class, and every client receives ``classes_per_client`` of them.
    """
    C = dataset.num_classes
    n_shards = num_clients * classes_per_client
    present = [c for c in range(C) if np.any(dataset.labels == c)]
    if classes_per_client < 1 or n_shards < len(present):
        raise PartitionError(
            f"{num_clients} clients x {classes_per_client} classes cannot cover {len(present)} labels"
        )
    rng = np.random.default_rng(seed)
    counts = np.array([np.sum(dataset.labels == c) for c in present])
    # one shard per class, the rest handed out by largest remaining size per shard
    per_class = np.ones(len(present), dtype=int)
    for _ in range(n_shards - len(present)):
        per_class[np.argmax(counts / per_class - 1e-9 * np.arange(len(present)))] += 1
    if np.any(per_class > counts):
        raise PartitionError("some class has fewer examples than shards")
    shards = []
    for c, k in zip(present, per_class):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        shards.extend(np.array_split(idx, k))
    order = rng.permutation(n_shards)
    train = {}
    for client in range(num_clients):
        take = order[client * classes_per_client:(client + 1) * classes_per_client]
        train[client] = np.sort(np.concatenate([shards[s] for s in take]))
    return Partition(train)


def with_local_test(partition: Partition, test_fraction: float, seed) -> Partition:
    """Carve a per-client held-out split from each client's own indices."""
    if not 0 <= test_fraction < 1:
        raise PartitionError(f"test fraction must lie in [0, 1), got {test_fraction}")
    train, test = {}, {}
    for c in sorted(partition.train):
        idx = np.random.default_rng([*_entropy(seed), c]).permutation(partition.train[c])
        k = int(round(test_fraction * idx.size))
        if test_fraction > 0 and idx.size > 1:
            k = min(max(k, 1), idx.size - 1)
        test[c] = np.sort(idx[:k])
        train[c] = np.sort(idx[k:])
    return Partition(train, test)


def subsample_train(partition: Partition, fraction: float, seed) -> Partition:
    """Keep ``fraction`` of each client's training indices; local test splits untouched."""
    if not 0 < fraction <= 1:
        raise PartitionError(f"fraction must lie in (0, 1], got {fraction}")
    train = {}
    for c in sorted(partition.train):
        idx = partition.train[c]
        k = max(1, int(round(fraction * idx.size))) if idx.size else 0
        train[c] = np.sort(np.random.default_rng([*_entropy(seed), c]).choice(idx, size=k, replace=False))
    return Partition(train, dict(partition.test))
