import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedrecover.core import (
    AlgoHyperparams,
    DomainSpec,
    Regularizer,
    as_param,
    weight_alpha,
    weight_sum,
    weights_from_sizes,
)
from fedrecover.errors import NonFiniteError, ShapeMismatchError

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 8), elements=finite)
matrices = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite)


@pytest.mark.parametrize("t,a,expected", [(0, 4, 16.0), (2, 4, 36.0), (0, 1, 1.0)])
def test_weight_alpha_examples(t, a, expected):
    assert weight_alpha(t, a) == expected


@pytest.mark.parametrize("T,a,expected", [(2, 4, 77.0), (0, 1, 1.0)])
def test_weight_sum_examples(T, a, expected):
    assert weight_sum(T, a) == expected


def test_weight_sum_matches_loop():
    assert weight_sum(10, 5) == sum((t + 5) ** 2 for t in range(11))
    assert weight_sum(-1, 3) == 0.0


@given(st.integers(0, 10_000), st.integers(1, 10_000))
def test_weight_sum_increments(T, a):
    assert weight_alpha(T + 1, a) > weight_alpha(T, a)
    assert weight_sum(T, a) - weight_sum(T - 1, a) == weight_alpha(T, a)


def test_norm_examples():
    assert Regularizer("l1").norm([1.0, -2.0, 0.0]) == 3.0
    assert Regularizer("l1").dual_norm([1.0, -2.0, 0.0]) == 2.0
    D = np.diag([3.0, 4.0])
    assert Regularizer("nuclear").norm(D) == pytest.approx(7.0, abs=1e-12)
    assert Regularizer("nuclear").dual_norm(D) == pytest.approx(4.0, abs=1e-12)


def test_nuclear_norm_matches_eigen_route():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(4, 4))
    via_eig = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(W.T @ W), 0, None)))
    assert Regularizer("nuclear").norm(W) == pytest.approx(via_eig, abs=1e-8)


def test_subspace_constants():
    assert Regularizer("l1", 8).subspace_constant() == pytest.approx(math.sqrt(8))
    assert Regularizer("nuclear", 4).subspace_constant() == 2.0
    assert Regularizer("zero").subspace_constant() == 1.0


def test_nuclear_requires_matrix():
    with pytest.raises(ShapeMismatchError):
        Regularizer("nuclear").norm(np.ones(3))


@given(vectors)
def test_l1_norm_chain(w):
    reg = Regularizer("l1")
    e = float(np.linalg.norm(w))
    assert reg.dual_norm(w) <= e + 1e-9 * (1 + e)
    assert e <= reg.norm(w) + 1e-9 * (1 + e)
    assert (reg.norm(w) == 0) == (not np.any(w))


@given(matrices)
def test_nuclear_norm_chain(W):
    reg = Regularizer("nuclear")
    e = float(np.linalg.norm(W))
    assert reg.dual_norm(W) <= e * (1 + 1e-9) + 1e-9
    assert e <= reg.norm(W) * (1 + 1e-9) + 1e-9


@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_triangle_inequality(n, seed):
    rng = np.random.default_rng(seed)
    for kind, shape in (("l1", (n,)), ("nuclear", (n, n + 1))):
        reg = Regularizer(kind)
        x, y = rng.normal(size=shape), rng.normal(size=shape)
        tol = 1e-9 * (reg.norm(x) + reg.norm(y) + 1)
        assert reg.norm(x + y) <= reg.norm(x) + reg.norm(y) + tol
        assert reg.norm(x + y) >= abs(reg.norm(x) - reg.norm(y)) - tol
        assert reg.dual_norm(x + y) <= reg.dual_norm(x) + reg.dual_norm(y) + tol


def test_decomposability():
    rng = np.random.default_rng(0)
    w = np.zeros(10)
    v = np.zeros(10)
    w[:4], v[6:] = rng.normal(size=4), rng.normal(size=4)
    reg = Regularizer("l1")
    assert reg.norm(w + v) == reg.norm(w) + reg.norm(v)
    W = np.zeros((5, 5))
    V = np.zeros((5, 5))
    W[:2, :2], V[2:, 2:] = rng.normal(size=(2, 2)), rng.normal(size=(3, 3))
    nuc = Regularizer("nuclear")
    assert nuc.norm(W + V) == pytest.approx(nuc.norm(W) + nuc.norm(V), abs=1e-8)


def test_hyper_defaults():
    h = AlgoHyperparams(mu=0.1, L=550.0)
    assert h.a == 22000
    assert h.gamma == pytest.approx(2 * 0.1 * 22000.0**3)
    assert h.alpha(0) == 22000.0**2
    assert h.A(1) == 22000.0**2 + 22001.0**2


def test_hyper_validation():
    with pytest.raises(ValueError):
        AlgoHyperparams(mu=0.0)
    with pytest.raises(ValueError):
        AlgoHyperparams(mu=1.0, L=0.5)
    with pytest.raises(ValueError):
        AlgoHyperparams(client_weights=(0.5, 0.4))
    h = AlgoHyperparams(client_weights=(0.25, 0.75))
    assert h.with_weights([0.5, 0.5]).client_weights == (0.5, 0.5)


def test_weights_from_sizes_sum_exactly():
    w = weights_from_sizes([3, 7, 11, 13])
    assert math.fsum(w) == 1.0
    assert w[0] == pytest.approx(3 / 34)


def test_domain_and_params():
    assert not DomainSpec().bounded
    assert DomainSpec(2.0).bounded
    with pytest.raises(ValueError):
        DomainSpec(0.0)
    with pytest.raises(NonFiniteError):
        as_param([1.0, np.nan])
    with pytest.raises(ShapeMismatchError):
        as_param(np.ones((2, 2, 2)))
