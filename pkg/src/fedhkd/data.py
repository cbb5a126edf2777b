"""Datasets: synthetic blobs, IDX files, Dirichlet client partitioning, local splits."""

from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    beta: float
    equal_size: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


def lattice_means(n_classes: int, dim: int, separation: float = 1.0) -> np.ndarray:
    """Distinct class centres on the {-1, 0, 1} lattice of the leading coordinates."""
    k = 1
    while 3 ** k < n_classes:
        k += 1
    if k > dim:
        raise ValueError(f"{n_classes} classes need at least {k} dimensions")
    means = np.zeros((n_classes, dim))
    for j, digits in zip(range(n_classes), itertools.product((-1, 0, 1), repeat=k)):
        means[j, :k] = digits
    return separation * means


def gen_blobs(n_classes: int, dim: int, per_class: int, spread: float = 1.0, seed: int = 0,
              separation: float = 1.0) -> Dataset:
    """Gaussian clusters around :func:`lattice_means`, stored class-major."""
    if n_classes < 2 or per_class < 1:
        raise ValueError("need n_classes >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    means = lattice_means(n_classes, dim, separation)
    labels = np.repeat(np.arange(n_classes), per_class)
    noise = rng.standard_normal((len(labels), dim))
    return Dataset(means[labels] + spread * noise, labels, n_classes)


def _read_idx(path, magic: int, ndims: int):
    raw = Path(path).read_bytes()
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw) - head} of {size} bytes)")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=size, offset=head)


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair. Pixels are scaled to [0, 1] and flattened."""
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (lcount,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != lcount:
        raise IdxFormatError(f"{count} images but {lcount} labels")
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(inputs, labels, n_classes)


def partition_dirichlet(dataset: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``dataset`` across clients with per-class Dirichlet(beta) proportions.

    With ``spec.equal_size`` every client ends with exactly ``len // m``
    samples: over-full clients release random surplus samples, which are
    handed class-major to short clients, each preferring the classes it
    already holds most of.
    """
    m = spec.n_clients
    total = len(dataset)
    if total < m:
        raise ValueError(f"{total} samples cannot be split over {m} clients")
    rng = np.random.default_rng(spec.seed)

    owned = [[] for _ in range(m)]
    for j in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == j)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        p = rng.dirichlet(np.full(m, spec.beta))
        cuts = (np.cumsum(p)[:-1] * idx.size).astype(np.int64)
        for i, part in enumerate(np.split(idx, cuts)):
            owned[i].extend(part.tolist())

    if spec.equal_size:
        owned = _rebalance(owned, dataset.labels, dataset.n_classes, total // m, rng)
    return [dataset.subset(np.sort(np.asarray(o, dtype=np.int64))) for o in owned]


def _rebalance(owned, labels, n_classes, target, rng):
    pool = []
    for i, o in enumerate(owned):
        if len(o) > target:
            arr = np.asarray(o)
            drop = rng.choice(arr.size, size=arr.size - target, replace=False)
            keep = np.ones(arr.size, dtype=bool)
            keep[drop] = False
            owned[i] = arr[keep].tolist()
            pool.extend(arr[drop].tolist())
    # class-major, seeded order within class
    pool = np.asarray(pool, dtype=np.int64)
    pool = pool[rng.permutation(pool.size)]
    pool = pool[np.argsort(labels[pool], kind="stable")]
    by_class: dict[int, list[int]] = {}
    for s in pool.tolist():
        by_class.setdefault(int(labels[s]), []).append(s)

    for i, o in enumerate(owned):
        need = target - len(o)
        if need <= 0:
            continue
        have = np.bincount(labels[np.asarray(o, dtype=np.int64)], minlength=n_classes)
        while need > 0:
            avail = [c for c, lst in by_class.items() if lst]
            best = max(avail, key=lambda c: (have[c], -c))
            take = by_class[best][:need]
            del by_class[best][:len(take)]
            o.extend(take)
            need -= len(take)
    return owned


def split_local(local: Dataset, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified 75/25 train/test split with ``len // 4`` test samples."""
    n = len(local)
    if n < 4:
        raise ValueError("need at least 4 samples to split")
    rng = np.random.default_rng(seed)
    counts = local.class_counts()
    n_test = counts // 4
    # hand leftover test slots to classes with the largest remainders
    short = n // 4 - int(n_test.sum())
    order = sorted(range(local.n_classes), key=lambda c: (-(counts[c] % 4), c))
    for c in order[:short]:
        n_test[c] += 1
    train_idx, test_idx = [], []
    for c in range(local.n_classes):
        idx = rng.permutation(np.flatnonzero(local.labels == c))
        test_idx.extend(idx[: n_test[c]].tolist())
        train_idx.extend(idx[n_test[c]:].tolist())
    return local.subset(np.sort(train_idx)), local.subset(np.sort(test_idx))


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for row, y in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_csv(path, n_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "label":
        raise ValueError(f"{path}: last column must be 'label'")
    inputs = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), len(header) - 1)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(inputs, labels, n_classes)
