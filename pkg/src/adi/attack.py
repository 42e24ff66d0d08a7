"""The adaptive domain inference loop and extraction of the inferred dataset."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from adi.datapool import Dataset, DatasetPool
from adi.errors import ConfigError, ConnectionFailure, DimensionMismatch, EmptyLeaf
from adi.hierarchy import ConceptHierarchy
from adi.metrics import normalized_entropies, normalized_entropy
from adi.oracle import Oracle

DEFAULT_LAMBDA = 0.83
DEFAULT_BATCH = 200
DEFAULT_MAX_EPOCHS = 100


@dataclass(frozen=True)
class AttackConfig:
    lam: float = DEFAULT_LAMBDA
    batch_size: int = DEFAULT_BATCH
    delta_scale: float = 1.0
    max_epochs: int = DEFAULT_MAX_EPOCHS
    seed: int = 7
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.delta_scale > 0:
            raise ConfigError(f"delta_scale must be positive, got {self.delta_scale}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


@dataclass
class EpochRecord:
    epoch: int
    mean_entropy: float
    positives: int
    accesses: int
    leaf_probs: np.ndarray


@dataclass
class AttackResult:
    converged: bool
    epochs_used: int
    total_accesses: int
    trace: list[EpochRecord]
    hierarchy: ConceptHierarchy
    initial_probs: np.ndarray
    config: AttackConfig
    entropies: list[np.ndarray] = field(default_factory=list, repr=False)

    def probs_at(self, epoch: int) -> np.ndarray:
        """Leaf global probabilities after ``epoch`` epochs (0 is the start)."""
        return self.initial_probs if epoch == 0 else self.trace[epoch - 1].leaf_probs


def delta(level: int, node_count: int, scale: float = 1.0) -> float:
    return scale * level / node_count


def is_positive(v: Sequence[float], lam: float) -> bool:
    return normalized_entropy(v) <= lam


def converged(entropies: Sequence[float], lam: float) -> bool:
    e = np.asarray(entropies, dtype=np.float64)
    if e.size == 0:
        raise ValueError("need at least one entropy value")
    return bool(e.mean() <= lam)


def _draw_record(pool: DatasetPool, concept: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    ds_idx, cid = concept
    samples = pool.datasets[ds_idx].classes.get(cid)
    if samples is None or len(samples) == 0:
        raise EmptyLeaf(f"leaf concept {concept} has no samples")
    return samples[rng.integers(len(samples))]


def _query(oracle: Oracle, X: np.ndarray, epoch: int, workers: int) -> np.ndarray:
    def one(k: int) -> np.ndarray:
        try:
            return oracle.classify(X[k])
        except ConnectionFailure as exc:
            raise ConnectionFailure(f"epoch {epoch}, sample {k}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return np.stack(list(ex.map(one, range(len(X)))))
    return np.stack([one(k) for k in range(len(X))])


def run_adi(oracle: Oracle, hierarchy: ConceptHierarchy, pool: DatasetPool,
            config: AttackConfig = AttackConfig(),
            on_epoch: Callable[[EpochRecord], None] | None = None) -> AttackResult:
    """Tune leaf probabilities from the oracle's confidence until the batch looks in-domain.

    Each epoch draws ``batch_size`` leaves by random walk on the epoch-start
    probabilities, queries one random record per leaf, then feeds the
    entropy verdicts back in draw order. The hierarchy passed in is not
    modified; the tuned copy is returned in the result.
    """
    if oracle.input_dim != pool.dim:
        raise DimensionMismatch(f"oracle takes {oracle.input_dim} features, pool has {pool.dim}")
    h = hierarchy.copy()
    rng = np.random.default_rng(config.seed)
    node_count = h.node_count
    delta_fn = lambda j: delta(j, node_count, config.delta_scale)  # noqa: E731
    initial = h.global_probabilities()
    trace: list[EpochRecord] = []
    all_entropies = []
    start_count = oracle.stats.access_count
    done = False
    epoch = 0
    while not done and epoch < config.max_epochs:
        epoch += 1
        leaves = [h.random_walk(rng) for _ in range(config.batch_size)]
        X = np.stack([_draw_record(pool, h.nodes[leaf].leaf_concept, rng) for leaf in leaves])
        V = _query(oracle, X, epoch, config.workers)
        ent = normalized_entropies(V)
        pos = ent <= config.lam
        for leaf, flag in zip(leaves, pos):
            h.adjust(leaf, bool(flag), delta_fn)
        oracle.stats.mark_epoch()
        rec = EpochRecord(epoch, float(ent.mean()), int(pos.sum()),
                          oracle.stats.access_count - start_count, h.global_probabilities())
        trace.append(rec)
        all_entropies.append(ent)
        if on_epoch is not None:
            on_epoch(rec)
        done = converged(ent, config.lam)
    return AttackResult(done, epoch, config.batch_size * epoch, trace, h, initial, config,
                        all_entropies)


def extract_dataset(hierarchy: ConceptHierarchy, pool: DatasetPool, n_samples: int, seed: int,
                    probs: np.ndarray | None = None, name: str = "extracted") -> Dataset:
    """Sample leaves by global probability, then one record uniformly from each.

    Classes are keyed by leaf id and carry (dataset name, class id)
    provenance. ``probs`` overrides the hierarchy's current leaf
    probabilities (e.g. an earlier trace snapshot).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    p = hierarchy.global_probabilities() if probs is None else np.asarray(probs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(hierarchy.leaves), size=n_samples, p=p / p.sum())
    rows: dict[int, list[np.ndarray]] = {}
    for i in picks:
        leaf = hierarchy.leaves[i]
        rows.setdefault(leaf, []).append(
            _draw_record(pool, hierarchy.nodes[leaf].leaf_concept, rng))
    classes, prov = {}, {}
    for leaf in sorted(rows):
        ds_idx, cid = hierarchy.nodes[leaf].leaf_concept
        classes[leaf] = np.stack(rows[leaf])
        prov[leaf] = (pool.datasets[ds_idx].name, cid)
    return Dataset(name, classes, prov)


def uniform_pool_sample(pool: DatasetPool, n_samples: int, seed: int) -> Dataset:
    """Records drawn uniformly from the whole pool: the no-feedback baseline."""
    flat = pool.flatten()
    return flat.subsample(n_samples, seed)


# --- exports -----------------------------------------------------------------

def write_trace(result: AttackResult, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_entropy", "positives", "accesses"])
        for r in result.trace:
            w.writerow([r.epoch, repr(r.mean_entropy), r.positives, r.accesses])


def read_trace(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"epoch": int(r["epoch"]), "mean_entropy": float(r["mean_entropy"]),
                 "positives": int(r["positives"]), "accesses": int(r["accesses"])}
                for r in csv.DictReader(fh)]


def write_leaf_probs(result: AttackResult, outdir: str | Path) -> list[Path]:
    """One ``leaf_probs_epochNN.csv`` per epoch, epoch 00 being the initial state."""
    outdir = Path(outdir)
    h = result.hierarchy
    paths = []
    for epoch in range(result.epochs_used + 1):
        path = outdir / f"leaf_probs_epoch{epoch:02d}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["leaf", "dataset", "class_id", "global_prob"])
            for leaf, p in zip(h.leaves, result.probs_at(epoch)):
                ds_idx, cid = h.nodes[leaf].leaf_concept
                w.writerow([leaf, ds_idx, cid, repr(float(p))])
        paths.append(path)
    return paths


def read_leaf_probs(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        return np.array([float(r["global_prob"]) for r in csv.DictReader(fh)])
