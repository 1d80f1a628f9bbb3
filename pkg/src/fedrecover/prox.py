"""Proximal subproblem solvers.

Both operators minimise

    <w, z - gamma*E*w0> + E*(mu*A/2 + gamma)*||w||^2/2 + A*E*lam*R(w)

over the Euclidean ball of the domain; the constrained variant additionally
restricts ``R(w - center) <= radius``. Writing ``c = E*(mu*A/2 + gamma)`` and
``v = (gamma*E*w0 - z)/c`` the objective equals ``c/2 ||w - v||^2 + kappa R(w)``
up to a constant, with ``kappa = A*E*lam``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fedrecover.core import DomainSpec, Regularizer, RegKind, as_param, check_same_shape
from fedrecover.errors import FedRecoverError, NonFiniteError, ProxConvergenceError

FEAS_TOL = 1e-8
INNER_TOL = 1e-9
MAX_INNER_ITER = 10_000


@dataclass(frozen=True)
class ProxProblem:
    z: np.ndarray
    w0: np.ndarray
    A: float
    mu: float
    gamma: float
    lam: float
    reg: Regularizer
    domain: DomainSpec = DomainSpec()
    scale_E: float = 1.0
    radius: float = math.inf
    center: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.w0))):
            raise NonFiniteError("prox inputs must be finite")
        check_same_shape(np.asarray(self.z), np.asarray(self.w0))
        if self.center is not None:
            check_same_shape(np.asarray(self.z), np.asarray(self.center))
        if not self.c > 0:
            raise ValueError("quadratic coefficient must be positive")

    @property
    def c(self) -> float:
        return self.scale_E * (self.mu * self.A / 2 + self.gamma)

    @property
    def kappa(self) -> float:
        return self.A * self.scale_E * self.lam

    @property
    def v(self) -> np.ndarray:
        return (self.gamma * self.scale_E * self.w0 - self.z) / self.c

    @property
    def threshold(self) -> float:
        return self.kappa / self.c

    @property
    def constrained(self) -> bool:
        return math.isfinite(self.radius)


def objective(prob: ProxProblem, w) -> float:
    """Exact prox objective (without the feasibility indicator)."""
    w = np.asarray(w, dtype=np.float64)
    lin = prob.z - prob.gamma * prob.scale_E * prob.w0
    return float(
        np.sum(w * lin) + prob.c * np.sum(w * w) / 2 + prob.kappa * prob.reg.norm(w)
    )


def constraint_residual(prob: ProxProblem, w) -> float:
    """Largest violation of the R-ball and domain constraints (0 when feasible)."""
    res = 0.0
    if prob.constrained:
        center = prob.w0 if prob.center is None else prob.center
        res = max(res, prob.reg.norm(np.asarray(w) - center) - prob.radius)
    if prob.domain.bounded:
        res = max(res, float(np.linalg.norm(w)) - prob.domain.radius)
    return max(res, 0.0)


def soft_threshold(v, t: float) -> np.ndarray:
    """Elementwise ``sign(v) * max(|v| - t, 0)``; exact zero at the kink."""
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    if t == 0:
        return v.copy()
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def svt(V, t: float) -> np.ndarray:
    """Singular value soft-thresholding."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError("svt expects a matrix")
    if t == 0:
        return V.copy()
    try:
        U, s, Vt = np.linalg.svd(V, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise FedRecoverError(f"SVD failed in svt: {exc}") from exc
    s = np.maximum(s - t, 0.0)
    return (U * s) @ Vt


def shrink_reg(reg: Regularizer, v, t: float) -> np.ndarray:
    """Prox of ``t * R`` at ``v``."""
    if reg.kind is RegKind.L1:
        return soft_threshold(v, t)
    if reg.kind is RegKind.NUCLEAR:
        return svt(v, t)
    return np.array(v, dtype=np.float64, copy=True)


def project_l2_ball(w, radius: float) -> np.ndarray:
    if not math.isfinite(radius):
        return w
    n = float(np.linalg.norm(w))
    if n <= radius:
        return w
    return w * (radius / n)


def project_l1_ball(x, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{x : ||x||_1 <= radius}`` (sort-based)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    if np.sum(np.abs(flat)) <= radius:
        return x.copy()
    if radius <= 0:
        return np.zeros_like(x)
    u = np.sort(np.abs(flat))[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, u.size + 1)
    rho = np.nonzero(u * idx > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return (np.sign(flat) * np.maximum(np.abs(flat) - theta, 0.0)).reshape(x.shape)


def project_reg_ball(reg: Regularizer, x, center, radius: float) -> np.ndarray:
    """Projection onto ``{w : R(w - center) <= radius}``."""
    d = np.asarray(x, dtype=np.float64) - center
    if reg.kind is RegKind.L1:
        return center + project_l1_ball(d, radius)
    if reg.kind is RegKind.NUCLEAR:
        U, s, Vt = np.linalg.svd(d, full_matrices=False)
        if np.sum(s) <= radius:
            return np.asarray(x, dtype=np.float64).copy()
        s = project_l1_ball(s, radius)
        return center + (U * s) @ Vt
    return np.asarray(x, dtype=np.float64).copy()


def prox_solve(prob: ProxProblem) -> np.ndarray:
    """Unconstrained (apart from the domain ball) strongly convex prox.

    Shrinks ``v`` by the regularizer and rescales radially onto the domain
    ball; radial shrinkage keeps the sign/singular-vector pattern so the
    composition is the exact prox of the sum.
    """
    w = shrink_reg(prob.reg, prob.v, prob.threshold)
    return project_l2_ball(w, prob.domain.radius)


def _l1_lagrangian_point(v, w0, c, kappa, eta):
    """Exact minimiser of ``c/2 (w-v)^2 + kappa|w| + eta|w - w0|`` per coordinate."""
    neg = w0 < 0
    b1 = np.where(neg, w0, 0.0)
    b2 = np.where(neg, 0.0, w0)
    k1 = np.where(neg, eta, kappa)
    k2 = np.where(neg, kappa, eta)
    left = np.minimum(v + (k1 + k2) / c, b1)
    mid = np.clip(v + (k2 - k1) / c, b1, b2)
    right = np.maximum(v - (k1 + k2) / c, b2)
    cands = np.stack([left, mid, right])
    vals = c / 2 * (cands - v) ** 2 + kappa * np.abs(cands) + eta * np.abs(cands - w0)
    pick = np.argmin(vals, axis=0)
    return np.take_along_axis(cands, pick[None], axis=0)[0]


def _cprox_l1_bisect(prob: ProxProblem, center, feas_tol):
    v, c, kappa, eps0 = prob.v, prob.c, prob.kappa, prob.radius

    def g(eta):
        w = _l1_lagrangian_point(v, center, c, kappa, eta)
        return w, float(np.sum(np.abs(w - center)))

    lo, g_lo = 0.0, float("inf")
    hi = c * float(np.max(np.abs(v - center))) + kappa
    hi = max(hi, 1e-300)
    w_hi, g_hi = g(hi)
    while g_hi > eps0:
        lo, g_lo = hi, g_hi
        hi *= 2.0
        w_hi, g_hi = g(hi)
    slack = 1e-12 * max(1.0, eps0)
    # refine to machine precision; feas_tol only bounds what is acceptable
    while eps0 - g_hi > 1e-15 * eps0 and hi - lo > 1e-15 * hi:
        mid = 0.5 * (lo + hi)
        w_mid, g_mid = g(mid)
        if g_mid > g_lo + slack or g_mid < g_hi - slack:
            raise FedRecoverError("bisection residual is not monotone in the multiplier")
        if g_mid > eps0:
            lo, g_lo = mid, g_mid
        else:
            hi, w_hi, g_hi = mid, w_mid, g_mid
    if g_hi > eps0 * (1 + feas_tol):
        raise FedRecoverError("bisection ended outside the constraint set")
    return w_hi


def _cprox_davis_yin(prob: ProxProblem, center, start, inner_tol, max_iter):
    """Three-operator splitting for ``c/2||w-v||^2 + [kappa R + ball] + [R-ball]``.

    Step size ``1/c``; the smooth block's gradient step then collapses to
    ``x_g - zeta + v``.
    """
    v, t = prob.v, prob.threshold
    rho = prob.domain.radius
    zeta = np.array(start, dtype=np.float64, copy=True)
    best, best_res = None, float("inf")
    for _ in range(max_iter):
        x_g = project_l2_ball(shrink_reg(prob.reg, zeta, t), rho)
        x_h = project_reg_ball(prob.reg, x_g - zeta + v, center, prob.radius)
        step = x_h - x_g
        zeta = zeta + step
        res = float(np.linalg.norm(step))
        if res < best_res:
            best, best_res = x_h, res
        if res <= inner_tol * max(1.0, float(np.linalg.norm(zeta))):
            return x_h
    raise ProxConvergenceError(
        f"Davis-Yin did not converge in {max_iter} iterations (residual {best_res:.3e})",
        best=best,
        residual=best_res,
    )


def cprox_solve(
    prob: ProxProblem,
    feas_tol: float = FEAS_TOL,
    inner_tol: float = INNER_TOL,
    max_iter: int = MAX_INNER_ITER,
) -> np.ndarray:
    """Prox restricted to the R-norm ball ``R(w - center) <= radius``."""
    w = prox_solve(prob)
    if not prob.constrained:
        return w
    center = prob.w0 if prob.center is None else np.asarray(prob.center, dtype=np.float64)
    if prob.reg.norm(w - center) <= prob.radius:
        return w
    if prob.radius == 0:
        return center.copy()
    if prob.reg.kind is RegKind.ZERO:
        # R is identically zero, so the R-ball constraint is vacuous
        return w
    if prob.reg.kind is RegKind.L1:
        w = _cprox_l1_bisect(prob, center, feas_tol)
        if not prob.domain.bounded or np.linalg.norm(w) <= prob.domain.radius:
            return w
    return _cprox_davis_yin(prob, center, prob.v, inner_tol, max_iter)


def _tiny_reg_norm(reg: Regularizer, W: np.ndarray) -> np.ndarray:
    """R evaluated on a batch ``W`` of shape (N, *param_shape), closed forms only."""
    if reg.kind is RegKind.ZERO:
        return np.zeros(W.shape[0])
    if reg.kind is RegKind.L1:
        return np.abs(W).reshape(W.shape[0], -1).sum(axis=1)
    p1, p2 = W.shape[1:]
    if min(p1, p2) == 1:
        return np.sqrt((W * W).reshape(W.shape[0], -1).sum(axis=1))
    if (p1, p2) == (2, 2):
        fro2 = (W * W).reshape(W.shape[0], -1).sum(axis=1)
        det = W[:, 0, 0] * W[:, 1, 1] - W[:, 0, 1] * W[:, 1, 0]
        # (s1 + s2)^2 = s1^2 + s2^2 + 2 s1 s2
        return np.sqrt(fro2 + 2 * np.abs(det))
    raise ValueError(f"oracle has no closed-form nuclear norm for shape {(p1, p2)}")


def prox_oracle(prob: ProxProblem, points: Optional[int] = None, levels: int = 40, tol: float = 1e-9):
    """Brute-force grid minimiser of the exact (constrained) objective.

    A full tensor grid is laid over a box that provably contains the
    minimiser, then repeatedly re-centred on the best grid point and shrunk.
    Only meant for tests; total dimension must be at most 4.
    """
    shape = np.shape(prob.z)
    dim = int(np.prod(shape))
    if dim > 4:
        raise ValueError("prox_oracle supports at most 4 parameters")
    if points is None:
        points = {1: 2001, 2: 201, 3: 41, 4: 21}[dim]
    v = prob.v
    c, kappa = prob.c, prob.kappa
    center = prob.w0 if prob.center is None else np.asarray(prob.center, dtype=np.float64)
    anchor = center if prob.constrained else np.zeros(shape)
    if prob.domain.bounded and np.linalg.norm(anchor) > prob.domain.radius:
        anchor = np.zeros(shape)
    # any feasible anchor bounds the minimiser: c/2||w*-v||^2 <= c/2||anchor-v||^2 + kappa R(anchor)
    half = math.sqrt(float(np.sum((anchor - v) ** 2)) + 2 * kappa * prob.reg.norm(anchor) / c) + 1e-9
    mid = v.ravel().copy()
    lin = (prob.z - prob.gamma * prob.scale_E * prob.w0).ravel()
    best, best_val = anchor.ravel().copy(), None

    def evaluate(W):
        Wm = W.reshape((W.shape[0],) + shape)
        val = W @ lin + c * np.sum(W * W, axis=1) / 2 + kappa * _tiny_reg_norm(prob.reg, Wm)
        ok = np.ones(W.shape[0], dtype=bool)
        if prob.constrained:
            ok &= _tiny_reg_norm(prob.reg, Wm - center) <= prob.radius
        if prob.domain.bounded:
            ok &= np.sqrt(np.sum(W * W, axis=1)) <= prob.domain.radius
        return np.where(ok, val, np.inf)

    best_val = float(evaluate(best[None])[0])
    for _ in range(levels):
        axes = [np.linspace(m - half, m + half, points) for m in mid]
        W = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
        vals = evaluate(W)
        i = int(np.argmin(vals))
        if vals[i] <= best_val:
            best, best_val = W[i].copy(), float(vals[i])
        step = 2 * half / (points - 1)
        mid = best
        half = 3 * step
        if step < tol:
            break
    return best.reshape(shape)
