"""Federated simulation engine.

Implements Fast-FedDA, C-FedDA, multi-stage C-FedDA (MC-FedDA) and the
FedDA / FedMiD baselines on top of a :class:`FederatedProblem`. Clients of a
round run as independent tasks (optionally on a thread pool); the server
aggregation is the only barrier and always sums in client-index order, and
every client draws its minibatches from a stream keyed by (seed, round,
client), so results do not depend on how the tasks are scheduled.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fedrecover.core import (
    AlgoHyperparams,
    DomainSpec,
    Regularizer,
    weight_alpha,
    weight_sum,
    weights_from_sizes,
)
from fedrecover.data import ClientDataset, Loss, grad_oracle, sample_batch, stream
from fedrecover.errors import FedRecoverError, RunError
from fedrecover.metrics import RunRecord
from fedrecover.prox import ProxProblem, cprox_solve, project_l2_ball, prox_solve, shrink_reg

EvalHook = Callable[[int, int, Mapping[str, np.ndarray]], Mapping[str, float]]
StepHook = Callable[[int, int, int, "ClientState"], None]


@dataclass
class FederatedProblem:
    datasets: List[ClientDataset]
    loss: Loss
    reg: Regularizer
    domain: DomainSpec = DomainSpec()
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if not self.datasets:
            raise ValueError("need at least one client")
        if self.weights is None:
            self.weights = weights_from_sizes([ds.n for ds in self.datasets])
        else:
            self.weights = tuple(float(x) for x in self.weights)
            if len(self.weights) != len(self.datasets):
                raise ValueError("one weight per client required")
            if abs(math.fsum(self.weights) - 1.0) > 1e-12:
                raise ValueError("client weights must sum to 1")
        for ds in self.datasets:
            self.loss.check_labels(ds)

    @property
    def K(self) -> int:
        return len(self.datasets)

    @property
    def param_shape(self) -> tuple:
        return self.loss.param_shape(self.datasets[0])

    def zeros(self) -> np.ndarray:
        return np.zeros(self.param_shape)


@dataclass(frozen=True)
class ParticipationPolicy:
    """``clients_per_round=None`` means every client participates each round."""

    clients_per_round: Optional[int] = None

    @property
    def full(self) -> bool:
        return self.clients_per_round is None


def participation_sample(policy: ParticipationPolicy, round: int, weights: Sequence[float], seed: int):
    """Pick the clients of one round and renormalise their weights.

    Returns ``(indices, weights)`` with indices sorted ascending.
    """
    K = len(weights)
    weights = np.asarray(weights, dtype=np.float64)
    if policy.full:
        return np.arange(K), weights
    m = policy.clients_per_round
    if not 1 <= m <= K:
        raise ValueError(f"cannot sample {m} clients out of {K}")
    rng = stream(seed, "participation", round, 0)
    idx = np.sort(rng.choice(K, size=m, replace=False))
    sub = weights[idx]
    total = sub.sum()
    if total <= 0:
        sub = np.full(m, 1.0 / m)
    else:
        sub = sub / total
    return idx, sub


def aggregate(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted sum in the given order (deterministic, exact for one term)."""
    acc = weights[0] * arrays[0]
    for wk, x in zip(weights[1:], arrays[1:]):
        acc = acc + wk * x
    return acc


@dataclass
class ClientState:
    w: np.ndarray
    g: np.ndarray
    wtilde: Optional[np.ndarray] = None


@dataclass
class ServerState:
    w: np.ndarray
    g: np.ndarray
    wtilde: Optional[np.ndarray]
    avg_sum: np.ndarray
    avg_mass: float = 0.0
    round: int = 0
    iter: int = 0

    @property
    def average(self) -> np.ndarray:
        if self.avg_mass == 0:
            return self.w.copy()
        return self.avg_sum / self.avg_mass


@dataclass
class RunResult:
    last: np.ndarray
    average: Optional[np.ndarray]
    record: RunRecord
    server: Optional[ServerState] = None
    clients: List[ClientState] = field(default_factory=list)
    stages: List[np.ndarray] = field(default_factory=list)

    @property
    def estimate(self) -> np.ndarray:
        return self.average if self.average is not None else self.last


@dataclass
class RunOptions:
    """Execution settings shared by all algorithms.

    ``batch_size=None`` uses full local gradients. ``workers > 1`` runs the
    clients of a round on a thread pool. ``step_hook(round, step, client, state)``
    sees the client state after every local step (it may be called from
    worker threads).
    """

    seed: int = 0
    batch_size: Optional[int] = None
    policy: ParticipationPolicy = ParticipationPolicy()
    eval_hook: Optional[EvalHook] = None
    eval_every: int = 1
    workers: int = 1
    step_hook: Optional[StepHook] = None


class _Executor:
    def __init__(self, workers):
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)


def _client_batches(problem, opts, round, k, E):
    rng = stream(opts.seed, "batch", round, k)
    n = problem.datasets[k].n
    return [sample_batch(rng, n, opts.batch_size) for _ in range(E)]


def _evaluate(record, name, opts, round_done, iter_done, total_rounds, estimates):
    if opts.eval_hook is None:
        return
    if round_done % opts.eval_every and round_done != total_rounds and round_done != 0:
        return
    for metric, value in opts.eval_hook(round_done, iter_done, estimates).items():
        if not math.isfinite(value):
            raise RunError(f"metric {metric} is not finite (diverged run)",
                           round=round_done, step=iter_done)
        record.add(round_done, iter_done, name, metric, value)


def _wrap(exc, round, step=None, stage=None):
    if isinstance(exc, RunError):
        return exc
    return RunError(f"{type(exc).__name__}: {exc}", round=round, step=step, stage=stage)


def _check_finite(w, round, step, stage=None):
    if not np.all(np.isfinite(w)):
        raise RunError("iterate diverged (non-finite values)", round=round, step=step, stage=stage)


def fast_linear_term(g, wtilde, mu):
    """Dual-averaging linear term ``g - mu * wtilde / 2``."""
    return g - mu * wtilde / 2


# --------------------------------------------------------------------------
# Fast-FedDA
# --------------------------------------------------------------------------

def fast_fedda_run(
    problem: FederatedProblem,
    hyper: AlgoHyperparams,
    opts: RunOptions = RunOptions(),
    w0=None,
    track_average: bool = True,
    name: str = "fast_fedda",
) -> RunResult:
    """Fast federated dual averaging.

    Each local step accumulates ``alpha_t`` weighted gradients in ``g`` and
    weighted iterates in ``wtilde``; rounds end with a weighted aggregation of
    both and a server prox step. With ``track_average`` the engine also forms
    the weighted average of the virtual global sequence (the prox of the
    aggregated dual state at every step), which only a simulator can see.
    """
    E, R = hyper.local_steps, hyper.rounds
    mu, gamma, lam, a = hyper.mu, hyper.gamma, hyper.lam, hyper.a
    w0 = problem.zeros() if w0 is None else np.asarray(w0, dtype=np.float64)
    weights = hyper.client_weights or problem.weights

    def prox(z, t):
        return prox_solve(ProxProblem(z=z, w0=w0, A=weight_sum(t, a), mu=mu, gamma=gamma,
                                      lam=lam, reg=problem.reg, domain=problem.domain))

    server = ServerState(w=w0.copy(), g=np.zeros_like(w0), wtilde=weight_alpha(0, a) * w0,
                         avg_sum=np.zeros_like(w0))
    clients = [ClientState(server.w, server.g, server.wtilde) for _ in range(problem.K)]
    record = RunRecord()
    pool = _Executor(opts.workers)
    est0 = {"last": server.w, "avg": server.average} if track_average else {"last": server.w}
    _evaluate(record, name, opts, 0, 0, R, est0)
    try:
        for r in range(R):
            t_r = r * E
            idx, pis = participation_sample(opts.policy, r, weights, opts.seed)
            start = ClientState(server.w, server.g, server.wtilde)

            def work(k, start=start, r=r, t_r=t_r):
                w, g, wt = start.w, start.g, start.wtilde
                trace = []
                t = t_r
                try:
                    for j, batch in enumerate(_client_batches(problem, opts, r, k, E)):
                        t = t_r + j
                        G = grad_oracle(problem.loss, w, problem.datasets[k], batch)
                        g = g + weight_alpha(t, a) * G
                        if j < E - 1:
                            w = prox(fast_linear_term(g, wt, mu), t)
                            wt = wt + weight_alpha(t + 1, a) * w
                        if opts.step_hook is not None:
                            opts.step_hook(r, t, k, ClientState(w, g, wt))
                        if track_average:
                            trace.append((g, wt))
                except FedRecoverError as exc:
                    raise _wrap(exc, r, t) from exc
                return ClientState(w, g, wt), trace

            outs = pool.map(work, idx)
            t_end = t_r + E - 1
            try:
                g_agg = aggregate([o[0].g for o in outs], pis)
                wt_agg = aggregate([o[0].wtilde for o in outs], pis)
                w_new = prox(fast_linear_term(g_agg, wt_agg, mu), t_end)
                if track_average:
                    for j in range(E - 1):
                        gj = aggregate([o[1][j][0] for o in outs], pis)
                        wj = aggregate([o[1][j][1] for o in outs], pis)
                        server.avg_sum = server.avg_sum + weight_alpha(t_r + j, a) * prox(
                            fast_linear_term(gj, wj, mu), t_r + j)
                        server.avg_mass += weight_alpha(t_r + j, a)
                    server.avg_sum = server.avg_sum + weight_alpha(t_end, a) * w_new
                    server.avg_mass += weight_alpha(t_end, a)
            except FedRecoverError as exc:
                raise _wrap(exc, r, t_end) from exc
            _check_finite(w_new, r, t_end)
            server.w = w_new
            server.g = g_agg
            server.wtilde = wt_agg + weight_alpha(t_end + 1, a) * w_new
            server.round, server.iter = r + 1, t_end + 1
            for k, o in zip(idx, outs):
                # synchronisation: participating clients take the server state
                clients[k] = ClientState(server.w, server.g, server.wtilde)
            est = {"last": server.w}
            if track_average:
                est["avg"] = server.average
            _evaluate(record, name, opts, r + 1, t_end + 1, R, est)
    finally:
        pool.close()
    return RunResult(last=server.w, average=server.average if track_average else None,
                     record=record, server=server, clients=clients)


# --------------------------------------------------------------------------
# C-FedDA and MC-FedDA
# --------------------------------------------------------------------------

def cfedda_run(
    problem: FederatedProblem,
    hyper: AlgoHyperparams,
    opts: RunOptions = RunOptions(),
    w0=None,
    eps0: float = math.inf,
    name: str = "cfedda",
    round_offset: int = 0,
    stage: Optional[int] = None,
    record: Optional[RunRecord] = None,
    total_rounds: Optional[int] = None,
) -> RunResult:
    """Constrained federated dual averaging.

    All local and server steps use the constrained prox around the stage
    starting point ``w0`` with R-ball radius ``eps0``; gradients within round
    ``r`` share the weight ``alpha_r``. Returns the ``alpha_r``-weighted
    average of server iterates as ``average``.

    ``round_offset`` shifts the RNG and record round counters so that
    consecutive stages of MC-FedDA never reuse minibatch draws.
    """
    E, R = hyper.local_steps, hyper.rounds
    mu, gamma, lam, a = hyper.mu, hyper.gamma, hyper.lam, hyper.a
    w0 = problem.zeros() if w0 is None else np.asarray(w0, dtype=np.float64)
    weights = hyper.client_weights or problem.weights
    record = RunRecord() if record is None else record
    total_rounds = round_offset + R if total_rounds is None else total_rounds

    def cprox(z, r):
        return cprox_solve(ProxProblem(z=z, w0=w0, A=weight_sum(r, a), mu=mu, gamma=gamma, lam=lam,
                                       reg=problem.reg, domain=problem.domain, scale_E=float(E),
                                       radius=eps0, center=w0))

    server = ServerState(w=w0.copy(), g=np.zeros_like(w0), wtilde=weight_alpha(0, a) * w0,
                         avg_sum=np.zeros_like(w0))
    clients = [ClientState(server.w, server.g) for _ in range(problem.K)]
    pool = _Executor(opts.workers)
    if round_offset == 0:
        _evaluate(record, name, opts, 0, 0, total_rounds, {"last": server.w, "avg": server.average})
    try:
        for r in range(R):
            gr = round_offset + r
            alpha_r = weight_alpha(r, a)
            shift = mu * E * server.wtilde / 2
            idx, pis = participation_sample(opts.policy, gr, weights, opts.seed)
            w_start, g_start = server.w, server.g

            def work(k, gr=gr, alpha_r=alpha_r, shift=shift, r=r, w_start=w_start, g_start=g_start):
                w, g = w_start, g_start
                j = 0
                try:
                    for j, batch in enumerate(_client_batches(problem, opts, gr, k, E)):
                        G = grad_oracle(problem.loss, w, problem.datasets[k], batch)
                        g = g + alpha_r * G
                        if j < E - 1:
                            w = cprox(g - shift, r)
                        if opts.step_hook is not None:
                            opts.step_hook(gr, gr * E + j, k, ClientState(w, g))
                except FedRecoverError as exc:
                    raise _wrap(exc, gr, gr * E + j, stage) from exc
                return ClientState(w, g)

            outs = pool.map(work, idx)
            try:
                g_agg = aggregate([o.g for o in outs], pis)
                w_new = cprox(g_agg - shift, r)
            except FedRecoverError as exc:
                raise _wrap(exc, gr, gr * E + E - 1, stage) from exc
            _check_finite(w_new, gr, gr * E + E - 1, stage)
            server.w = w_new
            server.g = g_agg
            server.wtilde = server.wtilde + weight_alpha(r + 1, a) * w_new
            server.avg_sum = server.avg_sum + alpha_r * w_new
            server.avg_mass += alpha_r
            server.round, server.iter = r + 1, (r + 1) * E
            for k in idx:
                clients[k] = ClientState(server.w, server.g)
            _evaluate(record, name, opts, gr + 1, (gr + 1) * E, total_rounds,
                      {"last": server.w, "avg": server.average})
    finally:
        pool.close()
    return RunResult(last=server.w, average=server.average, record=record, server=server,
                     clients=clients)


@dataclass(frozen=True)
class StageSchedule:
    """Per-stage regularization, R-ball radius and iteration budget."""

    lambdas: Tuple[float, ...]
    epsilons: Tuple[float, ...]
    rounds: Tuple[int, ...]
    local_steps: Tuple[int, ...]

    def __post_init__(self):
        M = len(self.lambdas)
        if M == 0:
            raise ValueError("schedule needs at least one stage")
        for name in ("epsilons", "rounds", "local_steps"):
            if len(getattr(self, name)) != M:
                raise ValueError(f"schedule.{name} must have {M} entries")
        if any(x < 0 for x in self.lambdas) or any(not e > 0 for e in self.epsilons):
            raise ValueError("stage lambdas must be >= 0 and radii > 0")
        if any(r < 1 for r in self.rounds) or any(e < 1 for e in self.local_steps):
            raise ValueError("stage budgets must be positive")

    @property
    def M(self) -> int:
        return len(self.lambdas)

    @staticmethod
    def radius_for(lam: float, psi: float, mu: float) -> float:
        return 108.0 * psi**2 * lam / mu

    @classmethod
    def auto(cls, lambda0, stages, psi, mu, rounds, local_steps) -> "StageSchedule":
        """Halving schedule ``lambda_m = 2**-m lambda0`` with matching radii."""
        lambdas = tuple(lambda0 * 2.0**-m for m in range(stages))
        return cls.from_lambdas(lambdas, psi, mu, rounds, local_steps)

    @classmethod
    def from_lambdas(cls, lambdas, psi, mu, rounds, local_steps, epsilons=None) -> "StageSchedule":
        lambdas = tuple(float(x) for x in lambdas)
        M = len(lambdas)
        if epsilons is None:
            epsilons = tuple(cls.radius_for(lam, psi, mu) for lam in lambdas)
        return cls(
            lambdas=lambdas,
            epsilons=tuple(float(e) for e in epsilons),
            rounds=_per_stage(rounds, M),
            local_steps=_per_stage(local_steps, M),
        )


def _per_stage(x, M):
    if np.isscalar(x):
        return (int(x),) * M
    return tuple(int(v) for v in x)


def mc_fedda_run(
    problem: FederatedProblem,
    hyper: AlgoHyperparams,
    schedule: StageSchedule,
    opts: RunOptions = RunOptions(),
    w0=None,
    name: str = "mc_fedda",
) -> RunResult:
    """Homotopy continuation over C-FedDA stages.

    Stage ``m`` runs C-FedDA from the previous stage's averaged output, with
    that output as the R-ball centre. ``hyper.lam``, ``rounds`` and
    ``local_steps`` are overridden per stage.
    """
    w_hat = problem.zeros() if w0 is None else np.asarray(w0, dtype=np.float64)
    record = RunRecord()
    offset = 0
    total = sum(schedule.rounds)
    stages = []
    last = None
    for m in range(schedule.M):
        h = replace(hyper, lam=schedule.lambdas[m], rounds=schedule.rounds[m],
                    local_steps=schedule.local_steps[m])
        try:
            res = cfedda_run(problem, h, eps0=schedule.epsilons[m], opts=opts, w0=w_hat, name=name,
                             round_offset=offset, stage=m, record=record, total_rounds=total)
        except RunError as exc:
            if exc.stage is None:
                exc.stage = m
            raise
        except FedRecoverError as exc:
            raise RunError(str(exc), stage=m) from exc
        w_hat = res.average
        last = res.last
        stages.append(w_hat)
        offset += schedule.rounds[m]
    return RunResult(last=last, average=w_hat, record=record, server=res.server,
                     clients=res.clients, stages=stages)


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------

def _reg_prox(problem, v, t):
    return project_l2_ball(shrink_reg(problem.reg, v, t), problem.domain.radius)


def _server_mix(avg, current, eta_s):
    if eta_s == 1.0:
        return avg
    return current + eta_s * (avg - current)


def fedmid_run(
    problem: FederatedProblem,
    hyper: AlgoHyperparams,
    opts: RunOptions = RunOptions(),
    w0=None,
    name: str = "fedmid",
) -> RunResult:
    """Federated mirror descent: local proximal SGD, server model averaging."""
    E, R = hyper.local_steps, hyper.rounds
    eta_c, eta_s, lam = hyper.eta_c, hyper.eta_s, hyper.lam
    w = problem.zeros() if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    weights = hyper.client_weights or problem.weights
    record = RunRecord()
    pool = _Executor(opts.workers)
    _evaluate(record, name, opts, 0, 0, R, {"last": w})
    try:
        for r in range(R):
            idx, pis = participation_sample(opts.policy, r, weights, opts.seed)

            def work(k, r=r, w_start=w):
                wk = w_start
                for j, batch in enumerate(_client_batches(problem, opts, r, k, E)):
                    try:
                        G = grad_oracle(problem.loss, wk, problem.datasets[k], batch)
                        wk = _reg_prox(problem, wk - eta_c * G, eta_c * lam)
                        if opts.step_hook is not None:
                            opts.step_hook(r, r * E + j, k, ClientState(wk, None))
                    except FedRecoverError as exc:
                        raise _wrap(exc, r, r * E + j) from exc
                return wk

            outs = pool.map(work, idx)
            w = _server_mix(aggregate(outs, pis), w, eta_s)
            _check_finite(w, r, (r + 1) * E - 1)
            _evaluate(record, name, opts, r + 1, (r + 1) * E, R, {"last": w})
    finally:
        pool.close()
    return RunResult(last=w, average=None, record=record)


def fedda_run(
    problem: FederatedProblem,
    hyper: AlgoHyperparams,
    opts: RunOptions = RunOptions(),
    w0=None,
    name: str = "fedda",
) -> RunResult:
    """Federated dual averaging baseline with the squared-Euclidean mirror map.

    The dual state ``z`` starts at ``w0`` and takes ``-eta_c * G`` steps; the
    primal point is ``prox_{eta_tilde * lam * R}(z)`` where ``eta_tilde``
    counts the effective number of steps folded into ``z``.
    """
    E, R = hyper.local_steps, hyper.rounds
    eta_c, eta_s, lam = hyper.eta_c, hyper.eta_s, hyper.lam
    w0 = problem.zeros() if w0 is None else np.asarray(w0, dtype=np.float64)
    z, w = w0.copy(), w0.copy()
    weights = hyper.client_weights or problem.weights
    record = RunRecord()
    pool = _Executor(opts.workers)
    _evaluate(record, name, opts, 0, 0, R, {"last": w})
    try:
        for r in range(R):
            idx, pis = participation_sample(opts.policy, r, weights, opts.seed)

            def work(k, r=r, z_start=z, w_start=w):
                zk, wk = z_start, w_start
                for j, batch in enumerate(_client_batches(problem, opts, r, k, E)):
                    try:
                        G = grad_oracle(problem.loss, wk, problem.datasets[k], batch)
                        zk = zk - eta_c * G
                        # effective number of steps folded into zk, times eta_c
                        eta_tilde = eta_c * (eta_s * r * E + j + 1)
                        wk = _reg_prox(problem, zk, eta_tilde * lam)
                        if opts.step_hook is not None:
                            opts.step_hook(r, r * E + j, k, ClientState(wk, zk))
                    except FedRecoverError as exc:
                        raise _wrap(exc, r, r * E + j) from exc
                return zk

            outs = pool.map(work, idx)
            z = _server_mix(aggregate(outs, pis), z, eta_s)
            w = _reg_prox(problem, z, eta_c * (eta_s * (r + 1) * E) * lam)
            _check_finite(w, r, (r + 1) * E - 1)
            _evaluate(record, name, opts, r + 1, (r + 1) * E, R, {"last": w})
    finally:
        pool.close()
    return RunResult(last=w, average=None, record=record)


ALGORITHMS = {
    "fast_fedda": fast_fedda_run,
    "cfedda": cfedda_run,
    "mc_fedda": mc_fedda_run,
    "fedda": fedda_run,
    "fedmid": fedmid_run,
}
