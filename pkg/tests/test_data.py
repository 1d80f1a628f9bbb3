import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedrecover.data import (
    ClientDataset,
    CsvSchema,
    LogisticLoss,
    SquaredLoss,
    TraceLoss,
    ar_covariance,
    gen_low_rank,
    gen_sparse_linear,
    grad_oracle,
    load_csv,
    load_truth,
    loss_value,
    make_loss,
    sample_batch,
    save_csv,
    save_truth,
    stream,
)
from fedrecover.errors import DatasetError, ShapeMismatchError


def fd_grad(loss, w, ds, h=1e-6):
    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = h
        g[idx] = (loss_value(loss, w + e, ds) - loss_value(loss, w - e, ds)) / (2 * h)
    return g


def random_instance(kind, rng):
    n = int(rng.integers(1, 20))
    if kind == "squared":
        p = int(rng.integers(1, 6))
        return SquaredLoss(), ClientDataset(rng.normal(size=(n, p)), rng.normal(size=n)), rng.normal(size=p)
    if kind == "trace":
        p1, p2 = (int(x) for x in rng.integers(1, 4, size=2))
        return TraceLoss(), ClientDataset(rng.normal(size=(n, p1, p2)), rng.normal(size=n)), rng.normal(size=(p1, p2))
    C = int(rng.integers(2, 5))
    p = int(rng.integers(1, 5))
    y = rng.integers(0, C, size=n).astype(float)
    return LogisticLoss(C), ClientDataset(rng.normal(size=(n, p)), y), rng.normal(size=(p, C))


# -- rng streams ---------------------------------------------------------------

def test_streams_are_keyed():
    a = stream(7, "batch", 3, 1).standard_normal(5)
    assert np.array_equal(a, stream(7, "batch", 3, 1).standard_normal(5))
    assert not np.array_equal(a, stream(7, "batch", 3, 2).standard_normal(5))
    assert not np.array_equal(a, stream(7, "batch", 4, 1).standard_normal(5))
    assert not np.array_equal(a, stream(7, "data", 3, 1).standard_normal(5))
    assert not np.array_equal(a, stream(8, "batch", 3, 1).standard_normal(5))


def test_sample_batch():
    rng = stream(0, "batch")
    b = sample_batch(rng, 5, 1000)
    assert b.min() >= 0 and b.max() < 5
    assert len(np.unique(b)) == 5  # with replacement, all indices show up
    assert np.array_equal(sample_batch(rng, 4, None), np.arange(4))
    with pytest.raises(ValueError):
        sample_batch(rng, 4, 0)


# -- generators ----------------------------------------------------------------

def test_ar_covariance_entries():
    S = ar_covariance(5)
    assert S[0, 2] == 0.25
    assert S[3, 3] == 1.0
    assert np.array_equal(S, S.T)


def test_sparse_truth_and_shapes():
    clients, w_star = gen_sparse_linear(10, 4, 3, [5, 6, 7], seed=1)
    assert w_star.tolist() == [1.0] * 4 + [0.0] * 6
    assert [c.n for c in clients] == [5, 6, 7]
    assert clients[0].features.shape == (5, 10)


def test_sparse_client_mean_tracks_shift():
    n, p = 100_000, 4
    clients, _ = gen_sparse_linear(p, 2, 1, n, seed=3)
    delta = stream(3, "data", 0, 0).standard_normal(p)  # the generator's first draw
    se = 1 / math.sqrt(n)  # Sigma has unit diagonal
    assert np.all(np.abs(clients[0].features.mean(axis=0) - delta) <= 3 * se)


def test_generation_is_deterministic():
    a, _ = gen_sparse_linear(8, 3, 2, 10, seed=5)
    b, _ = gen_sparse_linear(8, 3, 2, 10, seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.responses, y.responses)
    assert not np.array_equal(a[0].features, a[1].features)
    c, _ = gen_sparse_linear(8, 3, 2, 10, seed=6)
    assert not np.array_equal(a[0].features, c[0].features)


def test_homogeneous_clients_share_distribution_not_draws():
    a, _ = gen_sparse_linear(6, 2, 2, 50_000, seed=0, heterogeneous=False)
    assert np.all(np.abs(a[0].features.mean(axis=0)) <= 3 / math.sqrt(50_000))


def test_low_rank_truth():
    clients, W = gen_low_rank(6, 5, 3, 2, 4, seed=0)
    assert np.linalg.matrix_rank(W) == 3
    assert clients[0].features.shape == (4, 6, 5)
    X = np.eye(6, 5)
    assert float(np.sum(X * W)) == 3.0


def test_low_rank_response_variance():
    r = 3
    clients, W = gen_low_rank(5, 5, r, 1, 40_000, seed=2, heterogeneous=False)
    var = clients[0].responses.var()
    target = float(np.sum(W**2)) + 1
    # Var of a sample variance of Gaussians is 2 sigma^4 / n
    assert abs(var - target) <= 4 * target * math.sqrt(2 / 40_000)


def test_generator_validation():
    with pytest.raises(ValueError):
        gen_sparse_linear(4, 5, 1, 3, seed=0)
    with pytest.raises(ValueError):
        gen_low_rank(3, 3, 4, 1, 3, seed=0)
    with pytest.raises(ValueError):
        gen_sparse_linear(4, 2, 2, [3], seed=0)


# -- losses ----------------------------------------------------------------------

def test_loss_examples():
    ds = ClientDataset(np.array([[1.0, 0.0]]), np.array([2.0]))
    sq = SquaredLoss()
    assert loss_value(sq, np.zeros(2), ds) == 2.0
    assert grad_oracle(sq, np.zeros(2), ds).tolist() == [-2.0, 0.0]
    X = np.zeros((1, 2, 2))
    X[0, 0, 0] = 1.0
    tr = TraceLoss()
    g = grad_oracle(tr, np.zeros((2, 2)), ClientDataset(X, np.array([1.0])))
    assert g.tolist() == [[-1.0, 0.0], [0.0, 0.0]]


def test_squared_noiseless_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 3))
    w = rng.normal(size=3)
    assert loss_value(SquaredLoss(), w, ClientDataset(X, X @ w)) == pytest.approx(0.0, abs=1e-28)


def test_logistic_at_zero_is_log_c():
    rng = np.random.default_rng(0)
    for C in (2, 3, 10):
        ds = ClientDataset(rng.normal(size=(7, 4)), rng.integers(0, C, size=7).astype(float))
        assert loss_value(LogisticLoss(C), np.zeros((4, C)), ds) == pytest.approx(math.log(C), abs=1e-15)


@pytest.mark.parametrize("kind", ["squared", "trace", "logistic"])
def test_finite_difference_gradients(kind):
    rng = np.random.default_rng({"squared": 1, "trace": 2, "logistic": 3}[kind])
    for _ in range(50):
        loss, ds, w = random_instance(kind, rng)
        g, fd = grad_oracle(loss, w, ds), fd_grad(loss, w, ds)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), 1e-3)


@given(st.sampled_from(["squared", "trace", "logistic"]), st.integers(0, 2**31 - 1))
def test_singleton_batches_average_to_full_gradient(kind, seed):
    loss, ds, w = random_instance(kind, np.random.default_rng(seed))
    full = grad_oracle(loss, w, ds)
    avg = sum(grad_oracle(loss, w, ds, [i]) for i in range(ds.n)) / ds.n
    assert np.allclose(avg, full, rtol=1e-12, atol=1e-12)


def test_loss_shape_and_label_checks():
    with pytest.raises(ShapeMismatchError):
        SquaredLoss().value(np.zeros(3), np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(DatasetError):
        LogisticLoss(3).check_labels(ClientDataset(np.zeros((2, 2)), np.array([0.0, 3.0])))
    with pytest.raises(ValueError):
        LogisticLoss(1)
    assert isinstance(make_loss("trace"), TraceLoss)


def test_dataset_validation():
    with pytest.raises(Exception):
        ClientDataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(Exception):
        ClientDataset(np.array([[np.nan]]), np.zeros(1))


# -- CSV -------------------------------------------------------------------------

def test_load_small_csv(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("y,a,b\n1,0.5,2\n0,1,1\n3,-1,0\n")
    ds = load_csv(path)
    assert ds.n == 3
    assert ds.features.tolist() == [[0.5, 2.0], [1.0, 1.0], [-1.0, 0.0]]
    sub = load_csv(path, CsvSchema(label_column="a", feature_columns=("b",)))
    assert sub.responses.tolist() == [0.5, 1.0, -1.0]


def test_csv_errors_name_the_row(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,a\n1,2\n1,oops\n")
    with pytest.raises(DatasetError, match="row 3"):
        load_csv(bad)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("y,a\n1,2,3\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_csv(ragged)
    with pytest.raises(DatasetError):
        load_csv(tmp_path / "missing.csv")
    nolabel = tmp_path / "nolabel.csv"
    nolabel.write_text("a,b\n1,2\n")
    with pytest.raises(DatasetError, match="label"):
        load_csv(nolabel)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(DatasetError):
        load_csv(empty)


def test_csv_round_trip(tmp_path):
    clients, w_star = gen_sparse_linear(6, 2, 2, 9, seed=4)
    save_csv(clients[0], tmp_path / "c0.csv")
    back = load_csv(tmp_path / "c0.csv")
    assert np.array_equal(back.features, clients[0].features)
    assert np.array_equal(back.responses, clients[0].responses)
    save_truth(w_star, tmp_path / "truth.csv")
    assert np.array_equal(load_truth(tmp_path / "truth.csv"), w_star)


def test_csv_round_trip_matrix(tmp_path):
    clients, W = gen_low_rank(3, 4, 2, 1, 5, seed=4)
    save_csv(clients[0], tmp_path / "m.csv")
    back = load_csv(tmp_path / "m.csv", CsvSchema(matrix_shape=(3, 4)))
    assert np.array_equal(back.features, clients[0].features)
    save_truth(W, tmp_path / "truth.csv")
    assert np.array_equal(load_truth(tmp_path / "truth.csv", vector=False), W)
    with pytest.raises(DatasetError):
        load_csv(tmp_path / "m.csv", CsvSchema(matrix_shape=(5, 5)))
