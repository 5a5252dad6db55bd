"""Synthetic classification data and non-IID client partitioning."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ShapeError


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    seed: int | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ShapeError("inputs must be (n, d) with one label per row")
        if len(self.labels) < 1:
            raise InputError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise InputError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[idx], self.labels[idx]


def gen_blobs(n_classes: int, dim: int, per_class: int, spread: float, seed: int, radius: float = 3.0) -> LabeledDataset:
    """Gaussian blobs; class means are seeded random directions scaled to ``radius``."""
    if n_classes < 2 or dim < 2:
        raise InputError("need at least 2 classes and 2 dimensions")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_classes, dim))
    means = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), per_class)
    inputs = means[labels] + spread * rng.standard_normal((len(labels), dim))
    return LabeledDataset(inputs, labels.astype(np.int64), n_classes, seed)


@dataclass
class PartitionPlan:
    client_indices: list[np.ndarray]
    alpha: float
    train: list[np.ndarray]
    test: list[np.ndarray]
    batches: dict[int, int] | None = None  # client -> batch (1-based)

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "clients": [
                {"train": tr.tolist(), "test": te.tolist(), "batch": (self.batches or {}).get(c)}
                for c, (tr, te) in enumerate(zip(self.train, self.test))
            ],
        }


def _split(idx: np.ndarray, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(idx)
    n_test = int(round(test_fraction * len(idx)))
    n_test = min(max(n_test, 1), len(idx) - 1)
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def dirichlet_partition(
    labels, n_clients: int, alpha: float, seed: int, test_fraction: float = 0.2, min_samples: int = 2
) -> PartitionPlan:
    """Label-skewed split: per class, draw client proportions from
    ``Dirichlet(alpha)`` and deal that class's indices out multinomially.

    Clients below ``min_samples`` steal one sample at a time from the largest
    client, so each ends with at least one train and one test index.
    """
    labels = np.asarray(labels)
    if n_clients < 1:
        raise InputError("need at least one client")
    if not alpha > 0:
        raise InputError("alpha must be positive")
    if len(labels) < n_clients * min_samples:
        raise InputError(f"{len(labels)} samples cannot cover {n_clients} clients with {min_samples} each")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        p = rng.dirichlet(np.full(n_clients, float(alpha)))
        counts = rng.multinomial(len(idx), p)
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].extend(part.tolist())
    for k in range(n_clients):
        while len(buckets[k]) < min_samples:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[donor].sort()
            buckets[k].append(buckets[donor].pop(int(rng.integers(len(buckets[donor])))))
    client_indices = [np.array(sorted(b), dtype=np.int64) for b in buckets]
    train, test = zip(*(_split(ix, test_fraction, rng) for ix in client_indices))
    return PartitionPlan(client_indices, float(alpha), list(train), list(test))


def schedule_batches(n_clients: int, batch_sizes: list[int], seed: int) -> dict[int, int]:
    """Random client -> batch assignment; batch ``k`` (1-based) gets ``batch_sizes[k-1]`` clients."""
    if sum(batch_sizes) != n_clients or any(s < 1 for s in batch_sizes):
        raise InputError(f"batch sizes {list(batch_sizes)} do not partition {n_clients} clients")
    order = np.random.default_rng(seed).permutation(n_clients)
    out, pos = {}, 0
    for b, size in enumerate(batch_sizes, start=1):
        for c in order[pos : pos + size]:
            out[int(c)] = b
        pos += size
    return dict(sorted(out.items()))


def label_histograms(labels, plan: PartitionPlan, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([np.bincount(labels[ix], minlength=n_classes) for ix in plan.client_indices]).astype(np.float64)


# flat binary format: <n, d, classes as u64> <n*d float32 row-major> <n uint32 labels>
_HEADER = struct.Struct("<QQQ")


def save_binary(ds: LabeledDataset, path: Path) -> None:
    n, d = ds.inputs.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(n, d, ds.n_classes))
        f.write(ds.inputs.astype("<f4").tobytes())
        f.write(ds.labels.astype("<u4").tobytes())


def load_binary(path: Path) -> LabeledDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ShapeError("file too short for header")
    n, d, k = _HEADER.unpack_from(blob)
    want = _HEADER.size + 4 * n * d + 4 * n
    if len(blob) != want:
        raise ShapeError(f"expected {want} bytes for n={n}, d={d}; found {len(blob)}")
    x = np.frombuffer(blob, "<f4", n * d, _HEADER.size).reshape(n, d).astype(np.float64)
    y = np.frombuffer(blob, "<u4", n, _HEADER.size + 4 * n * d).astype(np.int64)
    return LabeledDataset(x, y, int(k))


def save_plan(plan: PartitionPlan, path: Path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), sort_keys=True))
