"""Datasets, IDX ingestion, synthetic tasks and non-IID client partitioning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError, PartitionError

log = logging.getLogger(__name__)

IDX_UBYTE = 0x08


@dataclass
class Dataset:
    """Images scaled to [0, 1] in N x C x H x W layout plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]


# -- IDX files ---------------------------------------------------------------

def _read_idx(path: str | Path, expect_ndims: tuple[int, ...]) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read ({exc.strerror})") from None
    if len(raw) < 4:
        raise DataFormatError(f"{path}: offset 0: file too short for an IDX magic number")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != IDX_UBYTE or ndim not in expect_ndims:
        raise DataFormatError(
            f"{path}: offset 0: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x} "
            f"(expected unsigned-byte data with {' or '.join(map(str, expect_ndims))} dims)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: offset 4: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: offset {header}: dims {dims} need {expected} bytes in total, file has {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair (MNIST layout).

    Image files are 3-D (N, H, W, magic 0x00000803) or 4-D (N, C, H, W,
    magic 0x00000804, as written by :func:`export_idx` for colour data).
    """
    pixels = _read_idx(images_path, (3, 4))
    labels = _read_idx(labels_path, (1,)).astype(np.int64)
    if len(labels) != len(pixels):
        raise DataFormatError(f"{labels_path}: {len(labels)} labels for {len(pixels)} images in {images_path}")
    if pixels.ndim == 3:
        pixels = pixels[:, None]
    k = int(labels.max()) + 1 if num_classes is None and len(labels) else (num_classes or 1)
    if len(labels) and labels.max() >= k:
        raise DataFormatError(f"{labels_path}: label {labels.max()} outside [0, {k})")
    return Dataset(pixels.astype(np.float64) / 255.0, labels, max(k, 2), provenance=f"idx:{images_path}")


def export_idx(ds: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write ``ds`` as IDX files (pixels quantized to round(255*x))."""
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    if pixels.shape[1] == 1:
        pixels = pixels[:, 0]
    for path, arr in ((images_path, pixels), (labels_path, ds.labels.astype(np.uint8))):
        header = struct.pack(">HBB", 0, IDX_UBYTE, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
        Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


# -- synthetic task -------------------------------------------------------------

def synth_task(num_classes: int, samples_per_class: int, image_size: int, noise_sigma: float,
               seed, channels: int = 3) -> Dataset:
    """Prototype-plus-noise images: class c is a fixed random image plus N(0, sigma^2) noise, clipped."""
    if min(num_classes, samples_per_class, image_size, channels) < 1 or noise_sigma < 0:
        raise ConfigError("synth_task sizes must be positive and noise_sigma non-negative")
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0.0, 1.0, size=(num_classes, channels, image_size, image_size))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((len(labels), channels, image_size, image_size))
    images = np.clip(protos[labels] + noise_sigma * noise, 0.0, 1.0)
    ds = Dataset(images, labels, num_classes, provenance=f"synth:seed={seed}")
    ds.prototypes = protos  # type: ignore[attr-defined]
    return ds


# -- partitioning -------------------------------------------------------------------

@dataclass
class Partition:
    """Per-client index sets into one dataset.

    ``indices`` is each client's full share; ``train``/``test`` are filled in
    by :func:`split_train_test`. ``groups`` holds a group id per client for
    group partitions.
    """

    labels: np.ndarray
    num_classes: int
    indices: list[np.ndarray]
    train: list[np.ndarray] = field(default_factory=list)
    test: list[np.ndarray] = field(default_factory=list)
    groups: list[int] | None = None

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    def histogram(self, k: int, split: str = "all") -> np.ndarray:
        idx = {"all": self.indices, "train": self.train, "test": self.test}[split][k]
        return np.bincount(self.labels[idx], minlength=self.num_classes)

    def histograms(self, split: str = "all") -> np.ndarray:
        return np.stack([self.histogram(k, split) for k in range(self.num_clients)])

    def audit(self) -> None:
        """Raise PartitionError if any index is shared or out of range."""
        allidx = np.concatenate(self.indices) if self.indices else np.array([], dtype=np.int64)
        if len(np.unique(allidx)) != len(allidx):
            raise PartitionError("an index is assigned to more than one client")
        if len(allidx) and (allidx.min() < 0 or allidx.max() >= len(self.labels)):
            raise PartitionError("partition references indices outside the dataset")
        if self.train:
            for k, (tr, te, full) in enumerate(zip(self.train, self.test, self.indices)):
                if np.intersect1d(tr, te).size:
                    raise PartitionError(f"client {k}: train and test overlap")
                if not np.array_equal(np.sort(np.concatenate([tr, te])), np.sort(full)):
                    raise PartitionError(f"client {k}: train/test do not cover the client's indices")


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that best follow ``proportions``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, seed, max_retries: int = 100) -> Partition:
    """Per class, split its samples over clients with proportions ~ Dir(alpha * 1_K).

    Draws are repeated until every client holds at least one sample.
    """
    if num_clients < 1:
        raise ConfigError("number of clients must be at least 1")
    if alpha <= 0:
        raise ConfigError("Dirichlet alpha must be positive")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for _ in range(max_retries):
        shares: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in by_class:
            idx = rng.permutation(idx)
            counts = largest_remainder(rng.dirichlet(np.full(num_clients, alpha)), len(idx))
            for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                shares[k].append(chunk)
        indices = [np.sort(np.concatenate(s)).astype(np.int64) for s in shares]
        if all(len(i) for i in indices):
            return Partition(ds.labels, ds.num_classes, indices)
    raise PartitionError(
        f"could not give all {num_clients} clients a sample in {max_retries} Dirichlet draws "
        f"(alpha={alpha}); use a larger alpha or fewer clients")


def group_partition(ds: Dataset, num_groups: int, clients_per_group: int, classes_per_client: int,
                    seed) -> Partition:
    """Clients in a group share one class subset; groups get disjoint subsets.

    Each class's samples are split evenly (shuffled) among the clients of the
    group that owns it. Client k belongs to group k // clients_per_group.
    """
    if min(num_groups, clients_per_group, classes_per_client) < 1:
        raise ConfigError("group partition sizes must be positive")
    if num_groups * classes_per_client > ds.num_classes:
        raise ConfigError(
            f"{num_groups} groups x {classes_per_client} classes exceeds the {ds.num_classes} available classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.num_classes)
    num_clients = num_groups * clients_per_group
    shares: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for g in range(num_groups):
        members = range(g * clients_per_group, (g + 1) * clients_per_group)
        for c in order[g * classes_per_client:(g + 1) * classes_per_client]:
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            for k, chunk in zip(members, np.array_split(idx, clients_per_group)):
                shares[k].append(chunk)
    indices = [np.sort(np.concatenate(s)).astype(np.int64) for s in shares]
    groups = [k // clients_per_group for k in range(num_clients)]
    return Partition(ds.labels, ds.num_classes, indices, groups=groups)


def split_train_test(partition: Partition, ratio: float = 0.8, seed=0) -> Partition:
    """Stratified per-client split so train and test share the class mix.

    A class with n >= 2 samples on a client contributes round(ratio*n)
    samples to train, clamped to [1, n-1]; a singleton class goes to train.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"train ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k, idx in enumerate(partition.indices):
        tr, te = [], []
        labels = partition.labels[idx]
        for c in np.unique(labels):
            members = rng.permutation(idx[labels == c])
            n = len(members)
            if n == 1:
                log.warning("client %d: class %d has a single sample; assigned to train", k, c)
                n_train = 1
            else:
                n_train = min(max(int(np.floor(ratio * n + 0.5)), 1), n - 1)
            tr.append(members[:n_train])
            te.append(members[n_train:])
        train.append(np.sort(np.concatenate(tr)) if tr else np.array([], dtype=np.int64))
        test.append(np.sort(np.concatenate(te)) if te else np.array([], dtype=np.int64))
    return Partition(partition.labels, partition.num_classes, partition.indices, train, test, partition.groups)
