"""Recovery metrics, statistical error diagnostics and run records."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from fedrecover.core import Regularizer, check_same_shape
from fedrecover.data import ClientDataset, Loss, loss_value

SUPPORT_THRESHOLD = 1e-3
RANK_THRESHOLD = 1e-3
CSV_HEADER = ("round", "iter", "algorithm", "metric", "value")


def _diff(w, w_star):
    w = np.asarray(w, dtype=np.float64)
    w_star = np.asarray(w_star, dtype=np.float64)
    check_same_shape(w, w_star)
    return w - w_star


def l2_error(w, w_star) -> float:
    return float(np.linalg.norm(_diff(w, w_star).ravel()))


def l1_error(w, w_star) -> float:
    return float(np.sum(np.abs(_diff(w, w_star))))


def frob_error(W, W_star) -> float:
    return float(np.linalg.norm(_diff(W, W_star), "fro"))


def op_error(W, W_star) -> float:
    return float(np.linalg.norm(_diff(W, W_star), 2))


def support_f1(w, w_star, threshold: float = SUPPORT_THRESHOLD) -> float:
    """F1 score of ``{|w_i| > threshold}`` against the nonzeros of ``w_star``."""
    w, w_star = np.asarray(w), np.asarray(w_star)
    check_same_shape(w, w_star)
    pred = np.abs(w) > threshold
    true = w_star != 0
    tp = int(np.sum(pred & true))
    n_pred, n_true = int(pred.sum()), int(true.sum())
    if n_pred == 0 and n_true == 0:
        return 1.0
    if n_pred == 0 or n_true == 0 or tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_true
    return 2 * precision * recall / (precision + recall)


def recovered_rank(W, threshold_rel: float = RANK_THRESHOLD) -> int:
    s = np.linalg.svd(np.asarray(W, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > threshold_rel * s[0]))


def stat_precision_bounds(reg: Regularizer, lam_opt: float, mu: float) -> Tuple[float, float, float]:
    """Return ``(l2 bound, R-norm bound, eps_stat)`` for the regularized estimator.

    ``l2 <= 3 psi lam / mu``, ``R <= 12 psi^2 lam / mu`` and the target
    precision ``psi lam / mu`` with ``psi`` the subspace constant of ``reg``.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    psi = reg.subspace_constant()
    return 3 * psi * lam_opt / mu, 12 * psi**2 * lam_opt / mu, psi * lam_opt / mu


def training_loss(w, datasets: Sequence[ClientDataset], weights: Sequence[float], loss: Loss,
                  reg: Regularizer, lam: float) -> float:
    """Composite objective ``sum_k pi_k L_k(w) + lam R(w)`` on the full client data."""
    smooth = math.fsum(pi * loss_value(loss, w, ds) for pi, ds in zip(weights, datasets))
    return smooth + lam * reg.norm(w)


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    iter: int
    algorithm: str
    metric: str
    value: float


@dataclass
class RunRecord:
    """Ordered collection of metric rows for one run."""

    rows: List[MetricsRecord] = field(default_factory=list)

    def add(self, round, iter, algorithm, metric, value):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"metric {metric} is not finite at round {round}")
        self.rows.append(MetricsRecord(int(round), int(iter), algorithm, metric, value))

    def extend(self, other: "RunRecord"):
        self.rows.extend(other.rows)

    def series(self, metric: str, algorithm=None) -> List[Tuple[int, float]]:
        return [
            (r.round, r.value)
            for r in self.rows
            if r.metric == metric and (algorithm is None or r.algorithm == algorithm)
        ]

    def final(self, metric: str, algorithm=None) -> float:
        s = self.series(metric, algorithm)
        if not s:
            raise KeyError(metric)
        return s[-1][1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_HEADER) + "\n")
        for r in self.rows:
            buf.write(f"{r.round},{r.iter},{r.algorithm},{r.metric},{r.value!r}\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def read_csv_rows(path) -> Iterable[MetricsRecord]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        for line in fh:
            rnd, it, algo, metric, value = line.rstrip("\n").split(",")
            yield MetricsRecord(int(rnd), int(it), algo, metric, float(value))
