"""Parameters, regularizers, domains and hyperparameter records.

Model parameters are plain ``float64`` numpy arrays: a 1-D array for vector
models (Lasso) and a 2-D array for matrix models (trace regression, the
``p x C`` weight matrix of multinomial logistic regression).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from fedrecover.errors import NonFiniteError, ShapeMismatchError


def as_param(x, name="w") -> np.ndarray:
    """Coerce ``x`` to a finite float64 vector or matrix."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ShapeMismatchError(f"{name} must be a vector or matrix, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def weight_alpha(t: int, a: int) -> float:
    """Averaging weight ``(t + a)**2``."""
    return float((t + a) ** 2)


def weight_sum(T: int, a: int) -> float:
    """Sum of ``weight_alpha(t, a)`` for ``t = 0..T``; zero when ``T < 0``."""
    if T < 0:
        return 0.0

    def sq(n):
        return n * (n + 1) * (2 * n + 1) // 6

    # exact integer arithmetic, so the float result is exact below 2**53
    return float(sq(T + a) - sq(a - 1))


class RegKind(str, enum.Enum):
    L1 = "l1"
    NUCLEAR = "nuclear"
    ZERO = "zero"


@dataclass(frozen=True)
class Regularizer:
    """A decomposable norm penalty.

    ``subspace_dim`` is the sparsity ``s`` for L1 or the rank ``r*`` for the
    nuclear norm; it only enters through :meth:`subspace_constant`.
    """

    kind: RegKind = RegKind.L1
    subspace_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", RegKind(self.kind))
        if self.subspace_dim < 1:
            raise ValueError("subspace_dim must be a positive integer")

    def _check(self, w):
        w = np.asarray(w, dtype=np.float64)
        if self.kind is RegKind.NUCLEAR and w.ndim != 2:
            raise ShapeMismatchError("nuclear norm requires a matrix")
        return w

    def norm(self, w) -> float:
        w = self._check(w)
        if self.kind is RegKind.L1:
            return float(np.sum(np.abs(w)))
        if self.kind is RegKind.NUCLEAR:
            return float(np.sum(np.linalg.svd(w, compute_uv=False)))
        return 0.0

    def dual_norm(self, w) -> float:
        w = self._check(w)
        if self.kind is RegKind.L1:
            return float(np.max(np.abs(w))) if w.size else 0.0
        if self.kind is RegKind.NUCLEAR:
            return float(np.linalg.svd(w, compute_uv=False)[0])
        # the zero penalty has no finite dual; only the origin is dual-feasible
        return 0.0 if not np.any(w) else math.inf

    def subspace_constant(self) -> float:
        if self.kind is RegKind.ZERO:
            return 1.0
        return math.sqrt(self.subspace_dim)


@dataclass(frozen=True)
class DomainSpec:
    """Euclidean (Frobenius) ball of radius ``radius`` centred at the origin."""

    radius: float = math.inf

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("domain radius must be positive")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.radius)


@dataclass(frozen=True)
class AlgoHyperparams:
    """Hyperparameters shared by the dual-averaging algorithms and baselines.

    ``a`` defaults to ``ceil(4 L / mu)`` and ``gamma`` to ``2 mu a**3`` when not
    given. ``client_weights`` may be omitted and filled in later from client
    sample sizes with :meth:`with_weights`.
    """

    mu: float = 0.1
    L: float = 550.0
    a: Optional[int] = None
    gamma: Optional[float] = None
    lam: float = 0.0
    local_steps: int = 1
    rounds: int = 1
    client_weights: Optional[tuple] = None
    eta_c: float = 0.001
    eta_s: float = 1.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.L >= self.mu:
            raise ValueError("L must satisfy L >= mu")
        if self.a is None:
            object.__setattr__(self, "a", int(math.ceil(4.0 * self.L / self.mu - 1e-12)))
        if self.a < 1:
            raise ValueError("a must be a positive integer")
        object.__setattr__(self, "a", int(self.a))
        if self.gamma is None:
            object.__setattr__(self, "gamma", 2.0 * self.mu * float(self.a) ** 3)
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.local_steps < 1 or self.rounds < 1:
            raise ValueError("local_steps and rounds must be positive")
        if self.eta_c < 0 or self.eta_s < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.client_weights is not None:
            wts = tuple(float(x) for x in self.client_weights)
            if any(x < 0 for x in wts):
                raise ValueError("client weights must be nonnegative")
            if abs(math.fsum(wts) - 1.0) > 1e-12:
                raise ValueError("client weights must sum to 1")
            object.__setattr__(self, "client_weights", wts)

    def with_weights(self, weights: Sequence[float]) -> "AlgoHyperparams":
        return replace(self, client_weights=tuple(weights))

    def alpha(self, t: int) -> float:
        return weight_alpha(t, self.a)

    def A(self, t: int) -> float:
        return weight_sum(t, self.a)


def weights_from_sizes(sizes: Sequence[int]) -> tuple:
    """Client weights ``n_k / N``, corrected so they sum to one exactly in fsum."""
    sizes = [int(n) for n in sizes]
    total = sum(sizes)
    w = [n / total for n in sizes]
    drift = 1.0 - math.fsum(w)
    w[int(np.argmax(sizes))] += drift
    return tuple(w)
