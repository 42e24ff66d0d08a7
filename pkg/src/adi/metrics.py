"""Entropy, optimal-transport dataset distance, recovery scores, access costs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from adi.datapool import Dataset, DatasetPool
from adi.errors import DegenerateClassCount, DimensionMismatch, SinkhornNonConvergence
from adi.hierarchy import LeafProb


def normalized_entropy(v: Sequence[float]) -> float:
    """Shannon entropy in bits divided by log2(m); 0 log 0 is taken as 0."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise DegenerateClassCount(f"need at least two classes, got {v.size}")
    return float(normalized_entropies(v[None, :])[0])


def normalized_entropies(P: np.ndarray) -> np.ndarray:
    """Row-wise ``normalized_entropy`` of an (n, m) matrix of probability vectors."""
    P = np.asarray(P, dtype=np.float64)
    m = P.shape[1]
    if m < 2:
        raise DegenerateClassCount(f"need at least two classes, got {m}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log2(np.where(P > 0, P, 1.0)), 0.0)
    return np.clip(-terms.sum(axis=1) / np.log2(m), 0.0, 1.0)


# --- Gaussian label distance -------------------------------------------------

SHRINKAGE = 0.1
COV_FLOOR = 1e-6


@dataclass(frozen=True)
class GaussianSummary:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray
    count: int


def summarize(X: np.ndarray, class_id: int = 0, shrinkage: float = SHRINKAGE,
              floor: float = COV_FLOOR) -> GaussianSummary:
    """Mean and shrinkage-regularized covariance of the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False, ddof=1).reshape(d, d) if n > 1 else np.zeros((d, d))
    cov = (1 - shrinkage) * cov + shrinkage * np.trace(cov) / d * np.eye(d)
    cov = 0.5 * (cov + cov.T) + floor * np.eye(d)
    return GaussianSummary(class_id, mean, cov, n)


def summarize_dataset(ds: Dataset) -> list[GaussianSummary]:
    return [summarize(ds.classes[c], c) for c in ds.class_ids]


def sqrtm_psd(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def class_w2(a: GaussianSummary, b: GaussianSummary) -> float:
    """Squared 2-Wasserstein distance between two Gaussians (Bures form)."""
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch(f"dims {a.mean.shape} and {b.mean.shape} differ")
    return _w2_sq(a.mean, a.cov, b.mean, b.cov, sqrtm_psd(b.cov))


def _w2_sq(ma, ca, mb, cb, cb_half) -> float:
    cross = sqrtm_psd(cb_half @ ca @ cb_half)
    val = np.sum((ma - mb) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross)
    return max(float(val), 0.0)


def label_cost_matrix(sa: Sequence[GaussianSummary], sb: Sequence[GaussianSummary]) -> np.ndarray:
    halves = [sqrtm_psd(s.cov) for s in sb]
    W = np.empty((len(sa), len(sb)))
    for i, a in enumerate(sa):
        for j, b in enumerate(sb):
            W[i, j] = _w2_sq(a.mean, a.cov, b.mean, b.cov, halves[j])
    return W


# --- entropic OT -------------------------------------------------------------

@dataclass(frozen=True)
class SinkhornConfig:
    """``eps_rel`` scales the median ground cost to give the regularization."""

    eps_rel: float = 0.05
    max_iter: int = 2000
    tol: float = 1e-6
    anneal: bool = True
    max_points: int = 500
    seed: int = 0


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    source: np.ndarray
    target: np.ndarray
    cost: float
    epsilon: float
    iterations: int
    marginal_error: float


def sinkhorn(a: np.ndarray, b: np.ndarray, C: np.ndarray, epsilon: float,
             max_iter: int = 2000, tol: float = 1e-6,
             anneal_from: float | None = None) -> TransportPlan:
    """Log-domain Sinkhorn; returns the coupling and its linear cost <plan, C>.

    With ``anneal_from`` the regularization starts there and is halved
    (warm-starting the potentials) until it reaches ``epsilon``. The
    iteration budget covers all stages. Convergence means the row marginal
    is within ``tol`` in L1 right after a column update.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (a.size, b.size):
        raise DimensionMismatch(f"cost {C.shape} does not match marginals {a.size}, {b.size}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    schedule = [epsilon]
    if anneal_from is not None and anneal_from > epsilon:
        e = anneal_from
        schedule = []
        while e > epsilon:
            schedule.append(e)
            e *= 0.5
        schedule.append(epsilon)

    it = 0
    err = np.inf
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        while it < max_iter:
            it += 1
            f = -eps * logsumexp(log_b[None, :] + (g[None, :] - C) / eps, axis=1)
            g = -eps * logsumexp(log_a[:, None] + (f[:, None] - C) / eps, axis=0)
            if it % 10 == 0 or it == max_iter:
                logp = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / eps
                err = float(np.abs(np.exp(logsumexp(logp, axis=1)) - a).sum())
                # intermediate stages only need a rough warm start
                if err < (tol if final else max(tol, 1e-3)):
                    break
        if it >= max_iter:
            break
    logp = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / eps
    P = np.exp(logp)
    err = max(float(np.abs(P.sum(axis=1) - a).sum()), float(np.abs(P.sum(axis=0) - b).sum()))
    if eps != epsilon or err > tol:
        raise SinkhornNonConvergence(
            f"marginal error {err:.3g} > {tol:g} after {it} iterations (eps={eps:.3g})"
        )
    return TransportPlan(P, a, b, float(np.sum(P * C)), epsilon, it, err)


def exact_ot(a: np.ndarray, b: np.ndarray, C: np.ndarray) -> float:
    """Unregularized OT cost by linear programming; meant for small instances."""
    n1, n2 = C.shape
    A_eq = np.zeros((n1 + n2, n1 * n2))
    for i in range(n1):
        A_eq[i, i * n2:(i + 1) * n2] = 1.0
    for j in range(n2):
        A_eq[n1 + j, j::n2] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"linear program failed: {res.message}")
    return float(res.fun)


def otdd_cost_matrix(d1: Dataset, d2: Dataset) -> np.ndarray:
    if d1.dim != d2.dim:
        raise DimensionMismatch(f"feature dims {d1.dim} and {d2.dim} differ")
    X1, y1 = d1.arrays()
    X2, y2 = d2.arrays()
    s1, s2 = summarize_dataset(d1), summarize_dataset(d2)
    W = label_cost_matrix(s1, s2)
    i1 = {c: k for k, c in enumerate(d1.class_ids)}
    i2 = {c: k for k, c in enumerate(d2.class_ids)}
    r1 = np.array([i1[c] for c in y1])
    r2 = np.array([i2[c] for c in y2])
    sq = (np.sum(X1 ** 2, axis=1)[:, None] + np.sum(X2 ** 2, axis=1)[None, :]
          - 2.0 * X1 @ X2.T)
    return np.maximum(sq, 0.0) + W[np.ix_(r1, r2)]


def otdd_plan(d1: Dataset, d2: Dataset, cfg: SinkhornConfig = SinkhornConfig()
              ) -> tuple[float, TransportPlan]:
    d1 = d1.subsample(cfg.max_points, cfg.seed)
    d2 = d2.subsample(cfg.max_points, cfg.seed)
    C = otdd_cost_matrix(d1, d2)
    a = np.full(C.shape[0], 1.0 / C.shape[0])
    b = np.full(C.shape[1], 1.0 / C.shape[1])
    scale = float(np.median(C))
    if scale <= 0:
        scale = float(C.max()) or 1.0
    eps = cfg.eps_rel * scale
    plan = sinkhorn(a, b, C, eps, cfg.max_iter, cfg.tol,
                    anneal_from=float(C.max()) if cfg.anneal else None)
    return float(np.sqrt(plan.cost)), plan


def otdd(d1: Dataset, d2: Dataset, cfg: SinkhornConfig = SinkhornConfig()) -> float:
    """Square root of the entropic OT cost under feature + label ground cost."""
    return otdd_plan(d1, d2, cfg)[0]


# --- recovery and cost -------------------------------------------------------

def target_concepts(target: Dataset, pool: DatasetPool) -> set[tuple[int, int]]:
    """Pool (dataset index, class id) pairs that the target's classes came from."""
    index = {ds.name: i for i, ds in enumerate(pool.datasets)}
    return {(index[name], cid) for name, cid in target.provenance.values() if name in index}


def leaf_recovery(snapshot: Sequence[LeafProb], targets: Iterable[tuple[int, int]],
                  k: int) -> tuple[float, float]:
    """Precision and recall of the ``k`` most probable leaves against ``targets``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    targets = set(targets)
    top = snapshot[:k]
    hits = sum((r.dataset, r.class_id) in targets for r in top)
    precision = hits / len(top) if top else 0.0
    recall = hits / len(targets) if targets else 0.0
    return precision, recall


class AccessCost(NamedTuple):
    gdi: int
    adi: int
    ratio: float


def access_cost_model(pool_size: int, gdi_epochs: int, batch: int, adi_epochs: int) -> AccessCost:
    """GAN-based inference queries every record each epoch; ADI queries ``batch`` per epoch."""
    if min(pool_size, gdi_epochs, batch, adi_epochs) < 1:
        raise ValueError("all inputs must be positive")
    gdi = pool_size * gdi_epochs
    adi = batch * adi_epochs
    return AccessCost(gdi, adi, gdi / adi)
