"""Loss oracles, synthetic federated datasets and CSV ingestion."""

from __future__ import annotations

import csv
import enum
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from fedrecover.errors import DatasetError, ShapeMismatchError


# --------------------------------------------------------------------------
# RNG streams
# --------------------------------------------------------------------------

def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Key for an independent random stream.

    The stream is a PCG64 generator seeded by ``SeedSequence(global_seed,
    spawn_key=(purpose, round, client))``. Gaussian draws use numpy's
    ziggurat sampler.
    """

    global_seed: int
    purpose: str = "data"
    round: int = 0
    client: int = 0

    def generator(self) -> np.random.Generator:
        if self.round < 0 or self.client < 0:
            raise ValueError("stream keys must be nonnegative")
        ss = np.random.SeedSequence(
            int(self.global_seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(_purpose_code(self.purpose), int(self.round), int(self.client)),
        )
        return np.random.Generator(np.random.PCG64(ss))


def stream(seed: int, purpose: str, round: int = 0, client: int = 0) -> np.random.Generator:
    return RngStream(seed, purpose, round, client).generator()


def sample_batch(rng: np.random.Generator, n: int, size: Optional[int]) -> np.ndarray:
    """Uniform minibatch indices with replacement; ``size=None`` means the full set."""
    if size is None:
        return np.arange(n)
    if size < 1:
        raise ValueError("batch size must be positive")
    return rng.integers(0, n, size=size)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

class LossKind(str, enum.Enum):
    SQUARED = "squared"
    TRACE = "trace"
    LOGISTIC = "logistic"


@dataclass
class ClientDataset:
    """Samples held by one client.

    ``features`` is ``(n, p)`` for squared/logistic losses and ``(n, p1, p2)``
    for trace regression. Logistic responses are integer class labels.
    """

    features: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.responses = np.asarray(self.responses)
        if self.features.ndim not in (2, 3):
            raise DatasetError("features must be (n, p) or (n, p1, p2)")
        if self.features.shape[0] < 1:
            raise DatasetError("a client needs at least one sample")
        if self.responses.shape != (self.features.shape[0],):
            raise DatasetError("responses must have one entry per sample")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("features must be finite")

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    def subset(self, idx) -> "ClientDataset":
        return ClientDataset(self.features[idx], self.responses[idx])


class Loss:
    kind: LossKind

    def value(self, w, X, y) -> float:
        raise NotImplementedError

    def grad(self, w, X, y) -> np.ndarray:
        raise NotImplementedError

    def param_shape(self, dataset: ClientDataset) -> tuple:
        raise NotImplementedError

    def check_labels(self, dataset: ClientDataset) -> None:
        pass


class SquaredLoss(Loss):
    """``1/(2n) sum (y - x^T w)^2``."""

    kind = LossKind.SQUARED

    def _check(self, w, X):
        if w.ndim != 1 or X.ndim != 2 or X.shape[1] != w.shape[0]:
            raise ShapeMismatchError(f"squared loss: w {w.shape} vs X {X.shape}")

    def value(self, w, X, y):
        self._check(w, X)
        r = y - X @ w
        return float(r @ r / (2 * len(y)))

    def grad(self, w, X, y):
        self._check(w, X)
        return -(X.T @ (y - X @ w)) / len(y)

    def param_shape(self, dataset):
        return (dataset.features.shape[1],)


class TraceLoss(Loss):
    """``1/(2n) sum (y - <X, W>)^2`` for matrix covariates."""

    kind = LossKind.TRACE

    def _check(self, W, X):
        if W.ndim != 2 or X.ndim != 3 or X.shape[1:] != W.shape:
            raise ShapeMismatchError(f"trace loss: W {W.shape} vs X {X.shape}")

    def value(self, W, X, y):
        self._check(W, X)
        r = y - np.einsum("nij,ij->n", X, W)
        return float(r @ r / (2 * len(y)))

    def grad(self, W, X, y):
        self._check(W, X)
        r = y - np.einsum("nij,ij->n", X, W)
        return -np.einsum("n,nij->ij", r, X) / len(y)

    def param_shape(self, dataset):
        return tuple(dataset.features.shape[1:])


class LogisticLoss(Loss):
    """Multinomial logistic regression with a ``(p, C)`` weight matrix."""

    kind = LossKind.LOGISTIC

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes = int(num_classes)

    def _check(self, W, X):
        if W.ndim != 2 or X.ndim != 2 or W.shape != (X.shape[1], self.num_classes):
            raise ShapeMismatchError(f"logistic loss: W {W.shape} vs X {X.shape}")

    def _log_probs(self, W, X):
        logits = X @ W
        logits = logits - logits.max(axis=1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

    def value(self, W, X, y):
        self._check(W, X)
        lp = self._log_probs(W, X)
        return float(-lp[np.arange(len(y)), y.astype(int)].mean())

    def grad(self, W, X, y):
        self._check(W, X)
        P = np.exp(self._log_probs(W, X))
        P[np.arange(len(y)), y.astype(int)] -= 1.0
        return X.T @ P / len(y)

    def predict(self, W, X):
        return np.argmax(X @ W, axis=1)

    def param_shape(self, dataset):
        return (dataset.features.shape[1], self.num_classes)

    def check_labels(self, dataset):
        y = dataset.responses
        if not np.all((y >= 0) & (y < self.num_classes) & (y == np.floor(y))):
            raise DatasetError(f"labels must be integers in [0, {self.num_classes})")


def make_loss(kind: Union[str, LossKind], num_classes: int = 2) -> Loss:
    kind = LossKind(kind)
    if kind is LossKind.SQUARED:
        return SquaredLoss()
    if kind is LossKind.TRACE:
        return TraceLoss()
    return LogisticLoss(num_classes)


def loss_value(loss: Loss, w, dataset: ClientDataset) -> float:
    return loss.value(np.asarray(w, dtype=np.float64), dataset.features, dataset.responses)


def grad_oracle(loss: Loss, w, dataset: ClientDataset, batch=None) -> np.ndarray:
    """Mean gradient over ``batch`` (sample indices; ``None`` = all samples)."""
    w = np.asarray(w, dtype=np.float64)
    if batch is None:
        return loss.grad(w, dataset.features, dataset.responses)
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("empty minibatch")
    return loss.grad(w, dataset.features[batch], dataset.responses[batch])


# --------------------------------------------------------------------------
# Synthetic generators
# --------------------------------------------------------------------------

def ar_covariance(p: int, rho: float = 0.5) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _sizes(n_k, K) -> List[int]:
    if np.isscalar(n_k):
        sizes = [int(n_k)] * K
    else:
        sizes = [int(n) for n in n_k]
        if len(sizes) != K:
            raise ValueError("need one sample size per client")
    if any(n < 1 for n in sizes):
        raise ValueError("every client needs at least one sample")
    return sizes


def gen_sparse_linear(
    p: int,
    s: int,
    K: int,
    n_k,
    seed: int,
    heterogeneous: bool = True,
    noise_std: float = 1.0,
) -> Tuple[List[ClientDataset], np.ndarray]:
    """Federated sparse linear regression data.

    Client ``k`` draws a shift ``delta_k ~ N(0, I)`` (zero when
    ``heterogeneous`` is false); covariates are ``delta_k + z`` with
    ``z ~ N(0, Sigma)``, ``Sigma_ij = 0.5**|i-j|``, and responses are
    ``x^T w* + eps`` where ``w* = (1_s, 0_{p-s})``.
    """
    if p < 1 or K < 1 or not 0 <= s <= p:
        raise ValueError("invalid dimensions: need p >= 1, K >= 1, 0 <= s <= p")
    sizes = _sizes(n_k, K)
    w_star = np.zeros(p)
    w_star[:s] = 1.0
    chol = np.linalg.cholesky(ar_covariance(p))
    clients = []
    for k, n in enumerate(sizes):
        rng = stream(seed, "data", 0, k)
        delta = rng.standard_normal(p) if heterogeneous else np.zeros(p)
        Z = rng.standard_normal((n, p)) @ chol.T
        X = delta + Z
        y = X @ w_star + noise_std * rng.standard_normal(n)
        clients.append(ClientDataset(X, y))
    return clients, w_star


def gen_low_rank(
    p1: int,
    p2: int,
    r_star: int,
    K: int,
    n_k,
    seed: int,
    heterogeneous: bool = True,
    noise_std: float = 1.0,
) -> Tuple[List[ClientDataset], np.ndarray]:
    """Federated trace regression data with ``W* = diag(1_r, 0)``.

    Covariates are ``Z_k + A_i`` with iid standard normal entries in both the
    client shift ``Z_k`` and the per-sample part ``A_i``.
    """
    if p1 < 1 or p2 < 1 or K < 1 or not 0 <= r_star <= min(p1, p2):
        raise ValueError("invalid dimensions: need 0 <= r_star <= min(p1, p2)")
    sizes = _sizes(n_k, K)
    W_star = np.zeros((p1, p2))
    W_star[np.arange(r_star), np.arange(r_star)] = 1.0
    clients = []
    for k, n in enumerate(sizes):
        rng = stream(seed, "data", 0, k)
        Zk = rng.standard_normal((p1, p2)) if heterogeneous else np.zeros((p1, p2))
        X = Zk + rng.standard_normal((n, p1, p2))
        y = np.einsum("nij,ij->n", X, W_star) + noise_std * rng.standard_normal(n)
        clients.append(ClientDataset(X, y))
    return clients, W_star


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a client CSV file.

    ``feature_columns=None`` takes every column except the label, in file
    order. ``matrix_shape`` reshapes each row's features for trace regression.
    """

    label_column: str = "y"
    feature_columns: Optional[Tuple[str, ...]] = None
    matrix_shape: Optional[Tuple[int, int]] = None


def load_csv(path, schema: CsvSchema = CsvSchema()) -> ClientDataset:
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DatasetError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise DatasetError(f"{path}: label column {schema.label_column!r} not in header")
        label_idx = header.index(schema.label_column)
        if schema.feature_columns is None:
            feat_idx = [i for i, h in enumerate(header) if i != label_idx]
        else:
            missing = [c for c in schema.feature_columns if c not in header]
            if missing:
                raise DatasetError(f"{path}: missing feature columns {missing}")
            feat_idx = [header.index(c) for c in schema.feature_columns]
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                labels.append(float(row[label_idx]))
                rows.append([float(row[i]) for i in feat_idx])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric cell in row {lineno}") from None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    X = np.array(rows, dtype=np.float64)
    y = np.array(labels, dtype=np.float64)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DatasetError(f"{path}: non-finite values")
    if schema.matrix_shape is not None:
        p1, p2 = schema.matrix_shape
        if X.shape[1] != p1 * p2:
            raise DatasetError(f"{path}: {X.shape[1]} features cannot form a {p1}x{p2} matrix")
        X = X.reshape(-1, p1, p2)
    return ClientDataset(X, y)


def feature_names(dataset: ClientDataset) -> List[str]:
    if dataset.features.ndim == 3:
        p1, p2 = dataset.features.shape[1:]
        return [f"x_{i}_{j}" for i in range(p1) for j in range(p2)]
    return [f"x_{j}" for j in range(dataset.features.shape[1])]


def save_csv(dataset: ClientDataset, path, label_column: str = "y") -> None:
    """Write a dataset with shortest round-trip float text (``repr``)."""
    X = dataset.features.reshape(dataset.n, -1)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([label_column] + feature_names(dataset))
        for y, row in zip(dataset.responses, X):
            writer.writerow([repr(float(y))] + [repr(float(x)) for x in row])


def save_truth(w, path) -> None:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(-1, 1)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"col_{j}" for j in range(w.shape[1])])
        for row in w:
            writer.writerow([repr(float(x)) for x in row])


def load_truth(path, vector: bool = True) -> np.ndarray:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        W = np.array([[float(x) for x in row] for row in reader if row])
    return W[:, 0].copy() if vector and W.shape[1] == 1 else W
