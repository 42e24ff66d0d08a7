"""Black-box target models: x -> confidence vector, with access accounting.

Model file layout (little-endian)::

    b"ADIM"  version:u16  kind:u8  d:u32  m:u32  params:float64[]

``kind`` 1 is softmax-linear (params: W row-major m*d, then bias m);
``kind`` 2 is nearest-centroid softmax (params: centroids m*d, then temperature).
"""

from __future__ import annotations

import struct
import threading
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_softmax, softmax

from adi.datapool import Dataset
from adi.errors import DimensionMismatch, MalformedFile, NonDifferentiable, SingleClass
from adi.metrics import normalized_entropies

MODEL_MAGIC = b"ADIM"
MODEL_VERSION = 1
KIND_SOFTMAX = 1
KIND_CENTROID = 2


class OracleStats:
    """Thread-safe count of classify calls, with an optional per-epoch log."""

    def __init__(self):
        self._lock = threading.Lock()
        self.access_count = 0
        self.epoch_log: list[int] = []

    def add(self, n: int = 1) -> None:
        with self._lock:
            self.access_count += n

    def mark_epoch(self) -> None:
        with self._lock:
            self.epoch_log.append(self.access_count)

    def reset(self) -> None:
        with self._lock:
            self.access_count = 0
            self.epoch_log.clear()


class Oracle:
    """Anything that maps a length-d vector to a length-m probability vector.

    ``classify``/``classify_many`` are the attacker-facing calls and are
    counted in ``stats``. Subclasses implement ``_probs`` on a batch.
    """

    kind = "abstract"
    differentiable = False

    def __init__(self, input_dim: int, num_classes: int):
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.stats = OracleStats()

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionMismatch(
                f"expected inputs of length {self.input_dim}, got shape {X.shape}"
            )
        return X

    def _probs(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Uncounted batch evaluation, for the model owner's own bookkeeping."""
        return self._probs(self._check(X))

    def classify(self, x: np.ndarray) -> np.ndarray:
        X = self._check(x)
        if X.shape[0] != 1:
            raise DimensionMismatch("classify takes a single vector; use classify_many")
        out = self._probs(X)[0]
        self.stats.add(1)
        return out

    def classify_many(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        out = self._probs(X)
        self.stats.add(X.shape[0])
        return out

    def gradient(self, x: np.ndarray, k: int) -> np.ndarray:
        raise NonDifferentiable(f"{self.kind} oracle exposes no gradients")

    def log_prob(self, x: np.ndarray, k: int) -> float:
        raise NonDifferentiable(f"{self.kind} oracle exposes no log-probabilities")


class SoftmaxLinear(Oracle):
    kind = "softmax-linear"
    differentiable = True

    def __init__(self, weights: np.ndarray, bias: np.ndarray, metadata: dict | None = None):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise DimensionMismatch(f"weights {weights.shape} and bias {bias.shape} disagree")
        if weights.shape[0] < 2:
            raise SingleClass("a classifier needs at least two classes")
        super().__init__(weights.shape[1], weights.shape[0])
        self.weights = weights
        self.bias = bias
        self.metadata = dict(metadata or {})

    def logits(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights.T + self.bias

    def _probs(self, X):
        return softmax(self.logits(X), axis=1)

    def log_prob(self, x, k):
        X = self._check(x)
        return float(log_softmax(self.logits(X), axis=1)[0, k])

    def gradient(self, x, k):
        """d log p_k / dx = W_k - sum_j p_j W_j."""
        X = self._check(x)
        p = self._probs(X)[0]
        return self.weights[k] - p @ self.weights

    def params(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])


class CentroidSoftmax(Oracle):
    """Confidence softmax(-||x - c_k||^2 / temperature)."""

    kind = "nearest-centroid-softmax"
    differentiable = True

    def __init__(self, centroids: np.ndarray, temperature: float = 1.0,
                 metadata: dict | None = None):
        centroids = np.asarray(centroids, dtype=np.float64)
        if centroids.ndim != 2:
            raise DimensionMismatch("centroids must be an (m, d) matrix")
        if centroids.shape[0] < 2:
            raise SingleClass("a classifier needs at least two classes")
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        super().__init__(centroids.shape[1], centroids.shape[0])
        self.centroids = centroids
        self.temperature = float(temperature)
        self.metadata = dict(metadata or {})

    def logits(self, X: np.ndarray) -> np.ndarray:
        sq = ((X[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return -sq / self.temperature

    def _probs(self, X):
        return softmax(self.logits(X), axis=1)

    def log_prob(self, x, k):
        X = self._check(x)
        return float(log_softmax(self.logits(X), axis=1)[0, k])

    def gradient(self, x, k):
        X = self._check(x)
        p = self._probs(X)[0]
        return (2.0 / self.temperature) * (self.centroids[k] - p @ self.centroids)

    def params(self) -> np.ndarray:
        return np.concatenate([self.centroids.ravel(), [self.temperature]])

    @classmethod
    def from_dataset(cls, dataset: Dataset, temperature: float = 1.0) -> "CentroidSoftmax":
        if dataset.num_classes < 2:
            raise SingleClass("need at least two classes")
        cents = np.stack([dataset.classes[c].mean(axis=0) for c in dataset.class_ids])
        return cls(cents, temperature, {"class_ids": dataset.class_ids})


def accuracy(model: Oracle, dataset: Dataset) -> float:
    """Held-out accuracy; class ids map to output indices in sorted order."""
    ids = model.metadata.get("class_ids", list(range(model.num_classes)))
    index = {c: i for i, c in enumerate(ids)}
    X, y = dataset.arrays()
    pred = model.predict_proba(X).argmax(axis=1)
    return float(np.mean(pred == np.array([index[c] for c in y])))


def train_softmax(dataset: Dataset, lr: float = 0.5, epochs: int = 300, seed: int = 0,
                  weight_decay: float = 1e-3, train_fraction: float = 0.8) -> SoftmaxLinear:
    """Full-batch gradient descent on cross-entropy with L2 weight decay.

    The dataset is split ``train_fraction`` : rest per class; the held-out
    accuracy lands in ``metadata["accuracy"]``.
    """
    if dataset.num_classes < 2:
        raise SingleClass(f"{dataset.name} has a single class")
    train, test = dataset.split(train_fraction, seed)
    ids = dataset.class_ids
    index = {c: i for i, c in enumerate(ids)}
    X, y = train.arrays()
    y = np.array([index[c] for c in y])
    n, d = X.shape
    m = len(ids)
    rng = np.random.default_rng(seed)
    W = 0.01 * rng.standard_normal((m, d))
    b = np.zeros(m)
    onehot = np.eye(m)[y]
    for _ in range(epochs):
        P = softmax(X @ W.T + b, axis=1)
        G = (P - onehot) / n
        W -= lr * (G.T @ X + weight_decay * W)
        b -= lr * G.sum(axis=0)
    model = SoftmaxLinear(W, b, {"class_ids": ids, "seed": seed, "epochs": epochs,
                                 "lr": lr, "weight_decay": weight_decay})
    model.metadata["accuracy"] = accuracy(model, test)
    return model


def save_model(model: Oracle, path: str | Path) -> None:
    if isinstance(model, SoftmaxLinear):
        kind = KIND_SOFTMAX
    elif isinstance(model, CentroidSoftmax):
        kind = KIND_CENTROID
    else:
        raise TypeError(f"cannot serialize a {model.kind} oracle")
    header = MODEL_MAGIC + struct.pack("<HBII", MODEL_VERSION, kind, model.input_dim,
                                       model.num_classes)
    Path(path).write_bytes(header + model.params().astype("<f8").tobytes())


def load_model(path: str | Path) -> Oracle:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise MalformedFile("bad model magic", 0)
    if len(data) < 15:
        raise MalformedFile("truncated model header", len(data))
    version, kind, d, m = struct.unpack("<HBII", data[4:15])
    if version != MODEL_VERSION:
        raise MalformedFile(f"unsupported model version {version}", 4)
    expected = {KIND_SOFTMAX: m * d + m, KIND_CENTROID: m * d + 1}.get(kind)
    if expected is None:
        raise MalformedFile(f"unknown model kind {kind}", 6)
    body = data[15:]
    if len(body) != 8 * expected:
        raise MalformedFile(f"expected {8 * expected} parameter bytes, found {len(body)}",
                            15 + min(len(body), 8 * expected))
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if kind == KIND_SOFTMAX:
        return SoftmaxLinear(params[:m * d].reshape(m, d), params[m * d:])
    return CentroidSoftmax(params[:m * d].reshape(m, d), float(params[-1]))


def max_correct_entropy(model: Oracle, test: Dataset) -> float:
    """Mean over classes of the largest normalized entropy among correctly classified test points."""
    ids = model.metadata.get("class_ids", list(range(model.num_classes)))
    vals = []
    for i, c in enumerate(ids):
        if c not in test.classes:
            continue
        P = model.predict_proba(test.classes[c])
        ok = P.argmax(axis=1) == i
        if ok.any():
            vals.append(normalized_entropies(P[ok]).max())
    if not vals:
        raise ValueError("no test point is classified correctly")
    return float(np.mean(vals))


def calibrate_temperature(train: Dataset, test: Dataset, lam: float,
                          bounds: tuple[float, float] = (1e-3, 1e4)) -> float:
    """Temperature at which ``max_correct_entropy`` on ``test`` equals ``lam``.

    Correctness does not depend on the temperature and entropy grows with
    it, so the root is unique and bracketed by ``bounds``.
    """
    def gap(t: float) -> float:
        return max_correct_entropy(CentroidSoftmax.from_dataset(train, t), test) - lam

    lo, hi = bounds
    if gap(lo) > 0 or gap(hi) < 0:
        raise ValueError(f"no temperature in {bounds} reaches entropy {lam}")
    return float(brentq(gap, lo, hi, xtol=1e-9, rtol=1e-12))


def fit_centroid(dataset: Dataset, temperature: float | None = None, lam: float = 0.83,
                 seed: int = 0, train_fraction: float = 0.8) -> CentroidSoftmax:
    """Class means of a stratified training split.

    With ``temperature=None`` the temperature is calibrated so that the
    entropy threshold ``lam`` matches the held-out split (see
    ``calibrate_temperature``).
    """
    if dataset.num_classes < 2:
        raise SingleClass(f"{dataset.name} has a single class")
    train, test = dataset.split(train_fraction, seed)
    if temperature is None:
        temperature = calibrate_temperature(train, test, lam)
    model = CentroidSoftmax.from_dataset(train, temperature)
    model.metadata.update(seed=seed, temperature=temperature, calibrated_for=lam)
    model.metadata["accuracy"] = accuracy(model, test)
    return model
