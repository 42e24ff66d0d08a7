"""Labeled feature-vector datasets: synthesis, mixing, RMT encoding and file I/O.

Binary dataset layout (all little-endian)::

    b"ADID"  version:u16  d:u32  class_count:u32
    repeated class_count times:
        class_id:u32  n_c:u32  n_c*d float64 (row-major)

A pool file wraps several datasets::

    b"ADIP"  version:u16  dataset_count:u32
    repeated dataset_count times:
        name_len:u16  name:utf-8  <ADID record>
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from adi.errors import (
    EmptyClass,
    EmptyPool,
    IndivisibleDim,
    MalformedFile,
    PackingFailure,
    SpecMismatch,
)

DATASET_MAGIC = b"ADID"
POOL_MAGIC = b"ADIP"
FORMAT_VERSION = 1

# Reference mixed-target compositions: how many of the ten target classes come
# from each of seven pool datasets.
MIX_TABLE = (
    (1, 2, 2, 2, 1, 2, 0),
    (0, 1, 4, 0, 3, 1, 1),
    (1, 1, 2, 1, 0, 3, 2),
    (3, 2, 1, 1, 1, 1, 1),
    (2, 3, 0, 1, 1, 0, 3),
)


@dataclass(frozen=True)
class Dataset:
    """A named set of classes, each an (n_c, d) sample matrix.

    ``provenance`` maps a class id to the (dataset name, class id) it was
    copied from; it is empty for pool datasets.
    """

    name: str
    classes: Mapping[int, np.ndarray]
    provenance: Mapping[int, tuple[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.classes:
            raise EmptyClass(f"dataset {self.name!r} has no classes")
        frozen = {}
        dim = None
        for cid in sorted(self.classes):
            arr = np.array(self.classes[cid], dtype=np.float64, copy=True)
            if arr.ndim != 2:
                raise ValueError(f"class {cid} of {self.name!r} must be an (n, d) matrix")
            if arr.shape[0] == 0:
                raise EmptyClass(f"class {cid} of dataset {self.name!r} is empty")
            if dim is None:
                dim = arr.shape[1]
            elif arr.shape[1] != dim:
                raise ValueError(
                    f"class {cid} of {self.name!r} has dim {arr.shape[1]}, expected {dim}"
                )
            arr.setflags(write=False)
            frozen[int(cid)] = arr
        object.__setattr__(self, "classes", frozen)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def dim(self) -> int:
        return next(iter(self.classes.values())).shape[1]

    @property
    def class_ids(self) -> list[int]:
        return list(self.classes)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return sum(a.shape[0] for a in self.classes.values())

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(X, y)`` in class-id order."""
        xs = [self.classes[c] for c in self.classes]
        ys = [np.full(self.classes[c].shape[0], c, dtype=np.int64) for c in self.classes]
        return np.vstack(xs), np.concatenate(ys)

    @classmethod
    def from_arrays(cls, name: str, X: np.ndarray, y: np.ndarray,
                    provenance: Mapping[int, tuple[str, int]] | None = None) -> "Dataset":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y).astype(np.int64)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("X must be (n, d) with one label per row")
        classes = {int(c): X[y == c] for c in np.unique(y)}
        return cls(name, classes, provenance or {})

    def split(self, train_fraction: float = 0.8, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Stratified random train/test split; both halves keep every class."""
        rng = np.random.default_rng(seed)
        train, test = {}, {}
        for cid, arr in self.classes.items():
            n = arr.shape[0]
            perm = rng.permutation(n)
            k = min(max(1, int(round(train_fraction * n))), n - 1) if n > 1 else 1
            train[cid] = arr[perm[:k]]
            test[cid] = arr[perm[k:]] if n > 1 else arr
        return (Dataset(self.name + ":train", train, self.provenance),
                Dataset(self.name + ":test", test, self.provenance))

    def subsample(self, n: int, seed: int) -> "Dataset":
        """Uniform subsample of at most ``n`` records; classes that lose all records vanish."""
        if len(self) <= n:
            return self
        X, y = self.arrays()
        idx = np.sort(np.random.default_rng(seed).choice(len(X), size=n, replace=False))
        prov = {c: p for c, p in self.provenance.items() if c in set(y[idx].tolist())}
        return Dataset.from_arrays(self.name, X[idx], y[idx], prov)

    def map_features(self, fn, name: str | None = None) -> "Dataset":
        return Dataset(name or self.name, {c: fn(a) for c, a in self.classes.items()},
                       self.provenance)


@dataclass(frozen=True)
class DatasetPool:
    datasets: tuple[Dataset, ...]

    def __post_init__(self):
        datasets = tuple(self.datasets)
        object.__setattr__(self, "datasets", datasets)
        if not datasets:
            return
        names = [d.name for d in datasets]
        if len(set(names)) != len(names):
            raise ValueError(f"dataset names must be unique: {names}")
        dims = {d.dim for d in datasets}
        if len(dims) != 1:
            raise ValueError(f"pool datasets disagree on feature dim: {sorted(dims)}")

    @property
    def dim(self) -> int:
        if not self.datasets:
            raise EmptyPool("pool has no datasets")
        return self.datasets[0].dim

    @property
    def num_classes(self) -> int:
        return sum(d.num_classes for d in self.datasets)

    def __len__(self) -> int:
        return sum(len(d) for d in self.datasets)

    def __getitem__(self, i: int) -> Dataset:
        return self.datasets[i]

    def by_name(self, name: str) -> Dataset:
        for d in self.datasets:
            if d.name == name:
                return d
        raise KeyError(name)

    def flatten(self) -> Dataset:
        """All records in one dataset, labeled by a running class index."""
        classes, prov = {}, {}
        for ds in self.datasets:
            for cid, arr in ds.classes.items():
                k = len(classes)
                classes[k] = arr
                prov[k] = (ds.name, cid)
        return Dataset("pool", classes, prov)


@dataclass(frozen=True)
class MixSpec:
    """How many classes to take from each pool dataset (one count per dataset)."""

    counts: tuple[int, ...]
    total: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 0 for c in self.counts):
            raise SpecMismatch("class counts must be non-negative")
        if sum(self.counts) != self.total:
            raise SpecMismatch(f"counts {self.counts} sum to {sum(self.counts)}, not {self.total}")

    @classmethod
    def random(cls, pool: DatasetPool, total: int = 10, seed: int = 0) -> "MixSpec":
        """Pick ``total`` classes uniformly from all pool classes and tally per source."""
        sizes = [d.num_classes for d in pool.datasets]
        if total > sum(sizes):
            raise SpecMismatch(f"pool has only {sum(sizes)} classes, {total} requested")
        owner = np.repeat(np.arange(len(sizes)), sizes)
        picked = np.random.default_rng(seed).choice(len(owner), size=total, replace=False)
        counts = np.bincount(owner[picked], minlength=len(sizes))
        return cls(tuple(int(c) for c in counts), total, seed)


def _sphere_point(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    v = rng.standard_normal(d)
    n = np.linalg.norm(v)
    while n == 0.0:
        v = rng.standard_normal(d)
        n = np.linalg.norm(v)
    return radius * v / n


def synth_pool(n_datasets: int, classes_per_dataset: int, d: int, samples_per_class: int,
               separation: float, seed: int, *, sigma: float = 1.0,
               radius: float | None = None, max_attempts: int = 10000) -> DatasetPool:
    """Isotropic Gaussian blobs with centroids on a sphere.

    Centroids are rejection-sampled one at a time until every pair is at
    least ``separation * sigma`` apart. ``radius`` defaults to twice that
    distance. Raises PackingFailure once ``max_attempts`` proposals in total
    have been rejected.
    """
    if min(n_datasets, classes_per_dataset, d, samples_per_class) < 1:
        raise ValueError("all counts must be >= 1")
    if separation <= 0 or sigma <= 0:
        raise ValueError("separation and sigma must be positive")
    rng = np.random.default_rng(seed)
    min_dist = separation * sigma
    radius = 2.0 * min_dist if radius is None else float(radius)
    need = n_datasets * classes_per_dataset
    centroids = np.empty((need, d))
    placed = 0
    rejected = 0
    while placed < need:
        c = _sphere_point(rng, d, radius)
        if placed and np.min(np.linalg.norm(centroids[:placed] - c, axis=1)) < min_dist:
            rejected += 1
            if rejected >= max_attempts:
                raise PackingFailure(
                    f"placed {placed}/{need} centroids at spacing {min_dist:g} on radius "
                    f"{radius:g} before {max_attempts} rejections"
                )
            continue
        centroids[placed] = c
        placed += 1
    datasets = []
    k = 0
    for i in range(n_datasets):
        classes = {}
        for c in range(classes_per_dataset):
            classes[c] = centroids[k] + sigma * rng.standard_normal((samples_per_class, d))
            k += 1
        datasets.append(Dataset(f"D{i}", classes))
    return DatasetPool(tuple(datasets))


def build_mixed_target(pool: DatasetPool, spec: MixSpec,
                       keep_in_pool: bool = False) -> tuple[Dataset, DatasetPool]:
    """Draw ``spec.counts[i]`` classes from pool dataset ``i`` into a new target.

    Target classes are relabeled ``0..total-1`` in (source, class) order and
    record their origin in ``provenance``. Unless ``keep_in_pool`` is set the
    chosen classes are removed from the returned pool; a dataset left with no
    classes is dropped.
    """
    if len(spec.counts) != len(pool.datasets):
        raise SpecMismatch(
            f"mix has {len(spec.counts)} source counts but pool has {len(pool.datasets)} datasets"
        )
    rng = np.random.default_rng(spec.seed)
    picked: list[tuple[int, int]] = []
    for i, (ds, count) in enumerate(zip(pool.datasets, spec.counts)):
        if count > ds.num_classes:
            raise SpecMismatch(f"{ds.name} has {ds.num_classes} classes, {count} requested")
        ids = sorted(rng.choice(ds.class_ids, size=count, replace=False).tolist()) if count else []
        picked.extend((i, int(c)) for c in ids)

    classes, prov = {}, {}
    for new_id, (i, cid) in enumerate(picked):
        src = pool.datasets[i]
        classes[new_id] = src.classes[cid]
        prov[new_id] = (src.name, cid)
    target = Dataset("target", classes, prov)
    if keep_in_pool:
        return target, pool

    removed = set(picked)
    kept = []
    for i, ds in enumerate(pool.datasets):
        rest = {c: a for c, a in ds.classes.items() if (i, c) not in removed}
        if rest:
            kept.append(Dataset(ds.name, rest, ds.provenance))
    return target, DatasetPool(tuple(kept))


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian, sign-fixed)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def rmt_matrices(d: int, block_count: int, seed: int) -> list[np.ndarray]:
    if block_count < 1 or d % block_count:
        raise IndivisibleDim(f"feature dim {d} is not divisible by {block_count} blocks")
    rng = np.random.default_rng(seed)
    size = d // block_count
    return [random_orthogonal(size, rng) for _ in range(block_count)]


def _apply_blocks(X: np.ndarray, mats: Sequence[np.ndarray], transpose: bool) -> np.ndarray:
    size = mats[0].shape[0]
    out = np.empty_like(X)
    for b, q in enumerate(mats):
        sl = slice(b * size, (b + 1) * size)
        out[:, sl] = X[:, sl] @ (q if transpose else q.T)
    return out


def rmt_encode(dataset: Dataset, block_count: int, seed: int) -> Dataset:
    """Multiply each feature block by its own secret orthogonal matrix."""
    mats = rmt_matrices(dataset.dim, block_count, seed)
    return dataset.map_features(lambda X: _apply_blocks(X, mats, False), dataset.name + ":rmt")


def rmt_decode(dataset: Dataset, block_count: int, seed: int) -> Dataset:
    mats = rmt_matrices(dataset.dim, block_count, seed)
    return dataset.map_features(lambda X: _apply_blocks(X, mats, True), dataset.name)


# --- file formats -----------------------------------------------------------

def _dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<HII", FORMAT_VERSION, ds.dim, ds.num_classes))
    for cid, arr in ds.classes.items():
        buf.write(struct.pack("<II", cid, arr.shape[0]))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedFile(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_dataset(r: _Reader, name: str) -> Dataset:
    start = r.pos
    if r.take(4, "magic") != DATASET_MAGIC:
        raise MalformedFile("bad dataset magic", start)
    version, d, count = r.unpack("<HII", "dataset header")
    if version != FORMAT_VERSION:
        raise MalformedFile(f"unsupported dataset version {version}", start + 4)
    if d == 0 or count == 0:
        raise MalformedFile("dataset header declares zero dim or zero classes", start + 4)
    classes = {}
    for _ in range(count):
        at = r.pos
        cid, n = r.unpack("<II", "class header")
        if n == 0:
            raise MalformedFile(f"class {cid} has no samples", at)
        if cid in classes:
            raise MalformedFile(f"duplicate class id {cid}", at)
        raw = r.take(8 * n * d, f"samples of class {cid}")
        classes[cid] = np.frombuffer(raw, dtype="<f8").reshape(n, d).astype(np.float64)
    return Dataset(name, classes)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(_dataset_bytes(ds))


def load_dataset(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    r = _Reader(path.read_bytes())
    ds = _read_dataset(r, name or path.stem)
    if r.pos != len(r.data):
        raise MalformedFile("trailing bytes after dataset", r.pos)
    return ds


def save_pool(pool: DatasetPool, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(POOL_MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(pool.datasets)))
    for ds in pool.datasets:
        name = ds.name.encode("utf-8")
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(_dataset_bytes(ds))
    Path(path).write_bytes(buf.getvalue())


def load_pool(path: str | Path) -> DatasetPool:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != POOL_MAGIC:
        raise MalformedFile("bad pool magic", 0)
    version, count = r.unpack("<HI", "pool header")
    if version != FORMAT_VERSION:
        raise MalformedFile(f"unsupported pool version {version}", 4)
    datasets = []
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            name = r.take(n, "dataset name").decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedFile("dataset name is not utf-8", at) from None
        datasets.append(_read_dataset(r, name))
    if r.pos != len(r.data):
        raise MalformedFile("trailing bytes after pool", r.pos)
    return DatasetPool(tuple(datasets))


def load_csv(path: str | Path, name: str | None = None) -> Dataset:
    """Header row, numeric feature columns, integer label in the last column."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise MalformedFile(f"{path}: need a header and at least one data row")
    width = len(rows[0])
    if width < 2:
        raise MalformedFile(f"{path}: need at least one feature column and a label column")
    X, y = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise MalformedFile(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
        try:
            X.append([float(v) for v in row[:-1]])
            label = float(row[-1])
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from None
        if label != int(label):
            raise MalformedFile(f"{path}:{lineno}: label {row[-1]!r} is not an integer")
        y.append(int(label))
    return Dataset.from_arrays(name or path.stem, np.array(X), np.array(y))


def save_csv(ds: Dataset, path: str | Path) -> None:
    X, y = ds.arrays()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for row, label in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def save_provenance(ds: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "source_dataset", "source_class"])
        for cid in ds.class_ids:
            src, scls = ds.provenance[cid]
            w.writerow([cid, src, scls])


def load_provenance(path: str | Path) -> dict[int, tuple[str, int]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {int(r["class_id"]): (r["source_dataset"], int(r["source_class"])) for r in rows}


def with_provenance(ds: Dataset, provenance: Mapping[int, tuple[str, int]]) -> Dataset:
    return Dataset(ds.name, ds.classes, provenance)

