import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedrecover.core import Regularizer
from fedrecover.data import ClientDataset, SquaredLoss, gen_low_rank, gen_sparse_linear
from fedrecover.errors import ShapeMismatchError
from fedrecover.metrics import (
    CSV_HEADER,
    RunRecord,
    frob_error,
    l1_error,
    l2_error,
    op_error,
    read_csv_rows,
    recovered_rank,
    stat_precision_bounds,
    support_f1,
    training_loss,
)


def test_error_examples():
    w_star = np.zeros(5)
    w = np.array([3.0, 4.0, 0, 0, 0])
    assert l2_error(w_star, w_star) == 0.0
    assert l2_error(w, w_star) == 5.0
    assert l1_error(w, w_star) == 7.0
    with pytest.raises(ShapeMismatchError):
        l2_error(np.zeros(3), np.zeros(4))


@given(st.integers(0, 2**31 - 1))
def test_op_below_frob(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert op_error(A, B) <= frob_error(A, B) + 1e-12


def test_support_f1_examples():
    w_star = np.zeros(16)
    w_star[:8] = 1
    w = np.zeros(16)
    w[:4] = 1
    assert support_f1(w, w_star) == pytest.approx(2 / 3)
    assert support_f1(w_star, w_star) == 1.0
    assert support_f1(np.zeros(3), np.zeros(3)) == 1.0
    assert support_f1(np.zeros(3), np.ones(3)) == 0.0
    with pytest.raises(ShapeMismatchError):
        support_f1(np.zeros(2), np.zeros(3))


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 2.0))
def test_support_f1_matches_set_arithmetic(seed, thr):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=12)
    w_star = np.where(rng.random(12) < 0.4, 1.0, 0.0)
    pred = {i for i in range(12) if abs(w[i]) > thr}
    true = {i for i in range(12) if w_star[i] != 0}
    if not pred and not true:
        expected = 1.0
    elif not pred or not true or not pred & true:
        expected = 0.0
    else:
        p, r = len(pred & true) / len(pred), len(pred & true) / len(true)
        expected = 2 * p * r / (p + r)
    assert support_f1(w, w_star, thr) == pytest.approx(expected)
    perm = rng.permutation(12)
    assert support_f1(w[perm], w_star[perm], thr) == support_f1(w, w_star, thr)


def test_recovered_rank():
    assert recovered_rank(np.diag([1.0, 1.0, 0.0, 0.0])) == 2
    assert recovered_rank(np.zeros((3, 3))) == 0
    _, W = gen_low_rank(8, 8, 5, 1, 2, seed=0)
    assert recovered_rank(W) == 5


def test_stat_precision_bounds():
    l2, rb, eps = stat_precision_bounds(Regularizer("l1", 8), 0.1, 0.1)
    assert l2 == pytest.approx(3 * math.sqrt(8))
    assert eps == pytest.approx(math.sqrt(8))
    assert stat_precision_bounds(Regularizer("l1", 8), 0.0, 0.1) == (0.0, 0.0, 0.0)
    assert stat_precision_bounds(Regularizer("nuclear", 4), 0.05, 0.1)[1] == pytest.approx(24.0)


def test_training_loss_examples():
    clients, w_star = gen_sparse_linear(5, 2, 2, 6, seed=0, noise_std=0.0)
    reg = Regularizer("l1")
    assert training_loss(w_star, clients, (0.5, 0.5), SquaredLoss(), reg, 0.0) == pytest.approx(0, abs=1e-28)
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    one = training_loss(w, clients, (1.0, 0.0), SquaredLoss(), reg, 0.3)
    assert one == pytest.approx(SquaredLoss().value(w, clients[0].features, clients[0].responses) + 0.3 * reg.norm(w))


def test_training_loss_matches_pooled_sum():
    clients, _ = gen_sparse_linear(5, 2, 3, [4, 7, 9], seed=9)
    N = sum(c.n for c in clients)
    weights = tuple(c.n / N for c in clients)
    w = np.random.default_rng(1).normal(size=5)
    X = np.concatenate([c.features for c in clients])
    y = np.concatenate([c.responses for c in clients])
    pooled = float(np.sum((y - X @ w) ** 2) / (2 * N))
    assert training_loss(w, clients, weights, SquaredLoss(), Regularizer("zero"), 0.0) == pytest.approx(pooled, rel=1e-10)


def test_training_loss_bounded_by_grid_minimum():
    rng = np.random.default_rng(4)
    ds = ClientDataset(rng.normal(size=(6, 2)), rng.normal(size=6))
    reg, lam = Regularizer("l1"), 0.2
    X, y = ds.features, ds.responses
    # proximal gradient to (numerical) optimality
    H, b = X.T @ X / 6, X.T @ y / 6
    step = 1 / np.linalg.eigvalsh(H)[-1]
    w_hat = np.zeros(2)
    for _ in range(20_000):
        u = w_hat - step * (H @ w_hat - b)
        w_hat = np.sign(u) * np.maximum(np.abs(u) - step * lam, 0)
    f_hat = training_loss(w_hat, [ds], (1.0,), SquaredLoss(), reg, lam)
    g = np.linspace(-3, 3, 1201)
    W = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    grid = np.sum((y[None] - W @ X.T) ** 2, axis=1) / 12 + lam * np.abs(W).sum(axis=1)
    assert f_hat <= grid.min() + 1e-12
    assert f_hat >= grid.min() - 1e-4
    for w in rng.normal(size=(20, 2)):
        assert training_loss(w, [ds], (1.0,), SquaredLoss(), reg, lam) >= f_hat - 1e-6


def test_run_record_csv(tmp_path):
    rec = RunRecord()
    rec.add(0, 0, "fedda", "l2_error", 1.5)
    rec.add(1, 5, "fedda", "l2_error", 0.1 + 0.2)
    with pytest.raises(ValueError):
        rec.add(2, 10, "fedda", "l2_error", math.inf)
    text = rec.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert "\r" not in text
    assert rec.final("l2_error") == 0.1 + 0.2
    assert rec.series("l2_error") == [(0, 1.5), (1, 0.1 + 0.2)]
    rec.write_csv(tmp_path / "m.csv")
    rows = list(read_csv_rows(tmp_path / "m.csv"))
    assert rows == rec.rows
    with pytest.raises(KeyError):
        rec.final("missing")
