"""Build federated problems from an :class:`ExperimentConfig` and run algorithms on them."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from fedrecover.config import ExperimentConfig
from fedrecover.core import AlgoHyperparams, DomainSpec, Regularizer
from fedrecover.data import (
    ClientDataset,
    CsvSchema,
    LogisticLoss,
    SquaredLoss,
    TraceLoss,
    gen_low_rank,
    gen_sparse_linear,
    load_csv,
)
from fedrecover.errors import ConfigError, DatasetError
from fedrecover import fedsim, metrics
from fedrecover.fedsim import FederatedProblem, ParticipationPolicy, RunOptions, StageSchedule


@dataclass
class Experiment:
    config: ExperimentConfig
    seed: int
    problem: FederatedProblem
    truth: Optional[np.ndarray] = None
    test: Optional[ClientDataset] = None


def synthetic_data(cfg: ExperimentConfig, seed: int):
    """Client datasets and ground truth for the synthetic experiment kinds."""
    v = cfg.values
    if v["experiment"] == "sparse_linear":
        return gen_sparse_linear(v["data.p"], v["data.s"], v["data.clients"], v["data.samples_per_client"],
                                 seed, heterogeneous=v["data.heterogeneous"], noise_std=v["data.noise_std"])
    if v["experiment"] == "low_rank":
        return gen_low_rank(v["data.p1"], v["data.p2"], v["data.rank"], v["data.clients"],
                            v["data.samples_per_client"], seed, heterogeneous=v["data.heterogeneous"],
                            noise_std=v["data.noise_std"])
    raise ConfigError(f"experiment {v['experiment']} has no synthetic generator")


def _csv_clients(directory: str, label: str) -> List[ClientDataset]:
    files = sorted(Path(directory).glob("*.csv"))
    files = [f for f in files if f.name != "truth.csv"]
    if not files:
        raise DatasetError(f"no client CSV files in {directory}")
    return [load_csv(f, CsvSchema(label_column=label)) for f in files]


def _regularizer(cfg: ExperimentConfig) -> Regularizer:
    v = cfg.values
    kind = v["reg.kind"]
    dim = v["reg.subspace_dim"]
    if v["experiment"] == "sparse_linear":
        kind, dim = kind or "l1", dim or v["data.s"]
    elif v["experiment"] == "low_rank":
        kind, dim = kind or "nuclear", dim or v["data.rank"]
    else:
        kind, dim = kind or "l1", dim or 1
    return Regularizer(kind, dim)


def build_experiment(cfg: ExperimentConfig, seed: int) -> Experiment:
    v = cfg.values
    reg = _regularizer(cfg)
    domain = DomainSpec(v["domain.radius"])
    if v["experiment"] == "logistic_csv":
        datasets = _csv_clients(v["data.csv_dir"], v["data.label_column"])
        loss = LogisticLoss(v["data.num_classes"])
        test = None
        if v["data.test_dir"]:
            parts = _csv_clients(v["data.test_dir"], v["data.label_column"])
            test = ClientDataset(np.concatenate([d.features for d in parts]),
                                 np.concatenate([d.responses for d in parts]))
        problem = FederatedProblem(datasets, loss, reg, domain)
        return Experiment(cfg, seed, problem, None, test)
    datasets, truth = synthetic_data(cfg, seed)
    loss = SquaredLoss() if v["experiment"] == "sparse_linear" else TraceLoss()
    return Experiment(cfg, seed, FederatedProblem(datasets, loss, reg, domain), truth)


def hyperparams(cfg: ExperimentConfig, algorithm: str) -> AlgoHyperparams:
    v = cfg.values
    L = v["algo.L"]
    if algorithm in ("cfedda", "mc_fedda") and v["algo.L_constrained"] is not None:
        L = v["algo.L_constrained"]
    try:
        return AlgoHyperparams(mu=v["algo.mu"], L=L, a=v["algo.a"], gamma=v["algo.gamma"], lam=v["algo.lam"],
                               local_steps=v["run.local_steps"], rounds=v["run.rounds"],
                               eta_c=v["algo.eta_c"], eta_s=v["algo.eta_s"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def stage_schedule(cfg: ExperimentConfig, reg: Regularizer) -> StageSchedule:
    """MC-FedDA schedule: explicit ``schedule.lambdas`` or a halving schedule ending at ``algo.lam``."""
    v = cfg.values
    psi = reg.subspace_constant()
    if v["schedule.lambdas"]:
        M = len(v["schedule.lambdas"])
    else:
        M = v["schedule.stages"]
    rounds = v["schedule.rounds"] or _split(v["run.rounds"], M)
    local = v["schedule.local_steps"] or v["run.local_steps"]
    try:
        if v["schedule.lambdas"]:
            return StageSchedule.from_lambdas(v["schedule.lambdas"], psi, v["algo.mu"], rounds, local,
                                              epsilons=v["schedule.epsilons"] or None)
        lambda0 = v["schedule.lambda0"]
        if lambda0 is None:
            lambda0 = v["algo.lam"] * 2.0 ** (M - 1)
        sched = StageSchedule.auto(lambda0, M, psi, v["algo.mu"], rounds, local)
        if v["schedule.epsilons"]:
            sched = StageSchedule(sched.lambdas, tuple(v["schedule.epsilons"]), sched.rounds, sched.local_steps)
        return sched
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _split(total: int, M: int) -> List[int]:
    """Split ``total`` rounds over ``M`` stages, earlier stages taking the remainder."""
    base, extra = divmod(total, M)
    if base == 0:
        raise ConfigError(f"run.rounds={total} is too small for {M} stages")
    return [base + (1 if m < extra else 0) for m in range(M)]


def metric_hook(exp: Experiment, lam: float) -> Callable:
    """Evaluation hook computing the experiment's metrics for every tracked estimate."""
    v = exp.config.values
    prob = exp.problem
    kind = v["experiment"]
    sup_thr, rank_thr = v["metrics.support_threshold"], v["metrics.rank_threshold"]

    def one(w) -> Dict[str, float]:
        out = {}
        if kind == "sparse_linear":
            out["l2_error"] = metrics.l2_error(w, exp.truth)
            out["l1_error"] = metrics.l1_error(w, exp.truth)
            out["support_f1"] = metrics.support_f1(w, exp.truth, sup_thr)
        elif kind == "low_rank":
            out["frob_error"] = metrics.frob_error(w, exp.truth)
            out["op_error"] = metrics.op_error(w, exp.truth)
            out["recovered_rank"] = metrics.recovered_rank(w, rank_thr)
        else:
            X = np.concatenate([d.features for d in prob.datasets])
            y = np.concatenate([d.responses for d in prob.datasets])
            out["accuracy"] = float(np.mean(prob.loss.predict(w, X) == y))
            if exp.test is not None:
                out["test_accuracy"] = float(np.mean(prob.loss.predict(w, exp.test.features) == exp.test.responses))
        out["training_loss"] = metrics.training_loss(w, prob.datasets, prob.weights, prob.loss, prob.reg, lam)
        return out

    def hook(round_done, iter_done, estimates):
        out = one(estimates["last"])
        if "avg" in estimates:
            out.update({f"{k}_avg": val for k, val in one(estimates["avg"]).items()})
        return out

    return hook


def run_options(cfg: ExperimentConfig, seed: int, hook=None, workers: Optional[int] = None) -> RunOptions:
    v = cfg.values
    cpr = v["run.clients_per_round"] or None
    return RunOptions(seed=seed, batch_size=v["run.batch_size"], policy=ParticipationPolicy(cpr),
                      eval_hook=hook, eval_every=v["run.eval_every"],
                      workers=v["run.workers"] if workers is None else workers)


@dataclass
class RunOutcome:
    algorithm: str
    seed: int
    result: fedsim.RunResult
    wall_time: float


def run_algorithm(cfg: ExperimentConfig, algorithm: str, seed: int, exp: Optional[Experiment] = None,
                  workers: Optional[int] = None) -> RunOutcome:
    """Run one algorithm on one seed, evaluating metrics every ``run.eval_every`` rounds."""
    exp = build_experiment(cfg, seed) if exp is None else exp
    hyper = hyperparams(cfg, algorithm)
    opts = run_options(cfg, seed, metric_hook(exp, cfg["algo.lam"]), workers)
    start = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        if algorithm == "mc_fedda":
            schedule = stage_schedule(cfg, exp.problem.reg)
            result = fedsim.mc_fedda_run(exp.problem, hyper, schedule, opts, name=algorithm)
        elif algorithm == "cfedda":
            result = fedsim.cfedda_run(exp.problem, hyper, eps0=cfg["algo.epsilon0"], opts=opts, name=algorithm)
        else:
            result = fedsim.ALGORITHMS[algorithm](exp.problem, hyper, opts, name=algorithm)
    return RunOutcome(algorithm, seed, result, time.perf_counter() - start)
