"""Gradient-ascent model inversion, used to score extracted auxiliary data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from adi.datapool import Dataset
from adi.errors import ConfigError, NonDifferentiable
from adi.oracle import Oracle

MAX_HALVINGS = 30


@dataclass(frozen=True)
class InversionConfig:
    step: float = 0.1
    iterations: int = 500
    init: str = "random"  # or "aux-mean"
    seed: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise ConfigError(f"step must be positive, got {self.step}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.init not in ("random", "aux-mean"):
            raise ConfigError(f"init must be 'random' or 'aux-mean', got {self.init!r}")


@dataclass
class Reconstruction:
    class_index: int
    x: np.ndarray
    confidence: np.ndarray
    objective: list[float]


def invert_class(model: Oracle, k: int, x0: np.ndarray, cfg: InversionConfig) -> Reconstruction:
    """Maximize log p_k(x) from ``x0`` by gradient ascent with backtracking.

    A step is accepted only if the objective does not decrease; otherwise it
    is halved, up to 30 times, after which the search stops.
    """
    if not model.differentiable:
        raise NonDifferentiable(f"{model.kind} oracle exposes no gradients")
    x = np.array(x0, dtype=np.float64)
    obj = model.log_prob(x, k)
    history = [obj]
    for _ in range(cfg.iterations):
        g = model.gradient(x, k)
        if not np.any(g):
            break
        step = cfg.step
        for _ in range(MAX_HALVINGS + 1):
            cand = x + step * g
            val = model.log_prob(cand, k)
            if val >= obj:
                break
            step *= 0.5
        else:
            break
        if np.array_equal(cand, x):
            break
        x, obj = cand, val
        history.append(obj)
    return Reconstruction(k, x, model.predict_proba(x)[0], history)


def aux_class_means(model: Oracle, aux: Dataset) -> np.ndarray:
    """Per output class, the mean of auxiliary records the model assigns to it.

    Classes that receive no record fall back to the mean of all records.
    Labeling the auxiliary data costs one query per record.
    """
    X, _ = aux.arrays()
    pred = model.classify_many(X).argmax(axis=1)
    overall = X.mean(axis=0)
    return np.stack([X[pred == k].mean(axis=0) if np.any(pred == k) else overall
                     for k in range(model.num_classes)])


def random_inits(m: int, d: int, seed: int, center: np.ndarray | float = 0.0,
                 scale: np.ndarray | float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return center + scale * rng.standard_normal((m, d))


def invert_all(model: Oracle, cfg: InversionConfig, aux: Dataset | None = None,
               center: np.ndarray | float = 0.0,
               scale: np.ndarray | float = 1.0) -> list[Reconstruction]:
    """One reconstruction per output class, initialized per ``cfg.init``."""
    if cfg.init == "aux-mean":
        if aux is None:
            raise ConfigError("aux-mean initialization needs auxiliary data")
        starts = aux_class_means(model, aux)
    else:
        starts = random_inits(model.num_classes, model.input_dim, cfg.seed, center, scale)
    return [invert_class(model, k, starts[k], cfg) for k in range(model.num_classes)]


def evaluate_reconstructions(model: Oracle, recons: list[Reconstruction],
                             threshold: float | None = None) -> float:
    """Fraction of reconstructions the model assigns to their intended class.

    With ``threshold`` a reconstruction also needs that much confidence in
    its class.
    """
    if not recons:
        return 0.0
    X = np.stack([r.x for r in recons])
    P = model.predict_proba(X)
    ok = 0
    for r, p in zip(recons, P):
        hit = int(np.argmax(p)) == r.class_index
        if threshold is not None:
            hit = hit and bool(p[r.class_index] > threshold)
        ok += int(hit)
    return ok / len(recons)
