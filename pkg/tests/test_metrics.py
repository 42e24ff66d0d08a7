import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adi.datapool import Dataset
from adi.errors import DegenerateClassCount, SinkhornNonConvergence
from adi.hierarchy import LeafProb
from adi.metrics import (
    COV_FLOOR,
    GaussianSummary,
    SinkhornConfig,
    access_cost_model,
    class_w2,
    exact_ot,
    leaf_recovery,
    normalized_entropy,
    otdd,
    otdd_cost_matrix,
    otdd_plan,
    sinkhorn,
    summarize,
)


def test_entropy_examples():
    assert normalized_entropy(np.full(7, 1 / 7)) == pytest.approx(1.0)
    assert normalized_entropy([0, 0, 1, 0]) == 0.0
    assert normalized_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 / math.log2(3), abs=1e-12)
    assert normalized_entropy([0.5, 0.25, 0.25]) == pytest.approx(0.94639, abs=1e-5)
    assert normalized_entropy([0.5, 0.5, 0, 0]) == pytest.approx(0.5)


def test_entropy_needs_two_classes():
    with pytest.raises(DegenerateClassCount):
        normalized_entropy([1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12).filter(lambda v: sum(v) > 1e-6),
       st.randoms())
def test_property_entropy_bounded_and_permutation_invariant(v, rnd):
    p = np.array(v) / sum(v)
    h = normalized_entropy(p)
    assert 0.0 <= h <= 1.0
    assert h <= normalized_entropy(np.full(len(p), 1 / len(p))) + 1e-12
    q = list(p)
    rnd.shuffle(q)
    assert normalized_entropy(q) == pytest.approx(h, abs=1e-12)


def gauss(mean, cov, cid=0):
    mean = np.atleast_1d(np.asarray(mean, float))
    return GaussianSummary(cid, mean, np.atleast_2d(np.asarray(cov, float)), 10)


def test_w2_examples():
    assert class_w2(gauss(0, 1), gauss(1, 4)) == pytest.approx(2.0, abs=1e-12)
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert class_w2(gauss([0, 0], S), gauss([3, 4], S)) == pytest.approx(25.0, abs=1e-9)
    assert class_w2(gauss([1, 2], S), gauss([1, 2], S)) == pytest.approx(0.0, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_property_w2_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = summarize(rng.normal(size=(20, 4)) @ rng.normal(size=(4, 4)))
    b = summarize(rng.normal(size=(15, 4)) + 2)
    assert class_w2(a, b) == pytest.approx(class_w2(b, a), rel=1e-8, abs=1e-8)
    assert class_w2(a, a) == pytest.approx(0.0, abs=1e-8)


def test_summary_covariance_shrunk_and_floored():
    s = summarize(np.zeros((1, 3)))
    np.testing.assert_allclose(s.cov, COV_FLOOR * np.eye(3))
    X = np.random.default_rng(0).normal(size=(4, 6))
    s = summarize(X)
    assert np.allclose(s.cov, s.cov.T, atol=1e-10)
    assert np.linalg.eigvalsh(s.cov).min() >= COV_FLOOR


def random_instance(rng, n1, n2, d=2):
    X, Y = rng.normal(size=(n1, d)), rng.normal(size=(n2, d)) + 1
    C = ((X[:, None] - Y[None]) ** 2).sum(-1)
    a = rng.dirichlet(np.ones(n1))
    b = rng.dirichlet(np.ones(n2))
    return a, b, C


def test_sinkhorn_close_to_exact_on_small_instances():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b, C = random_instance(rng, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        eps = 1e-3 * float(np.median(C))
        plan = sinkhorn(a, b, C, eps, max_iter=100_000, tol=1e-6, anneal_from=float(C.max()))
        exact = exact_ot(a, b, C)
        assert plan.cost == pytest.approx(exact, rel=0.02)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_property_sinkhorn_marginals(seed):
    rng = np.random.default_rng(seed)
    a, b, C = random_instance(rng, int(rng.integers(1, 12)), int(rng.integers(1, 12)))
    plan = sinkhorn(a, b, C, 0.05 * max(float(np.median(C)), 1e-3), anneal_from=float(C.max()))
    assert np.all(plan.plan >= 0)
    np.testing.assert_allclose(plan.plan.sum(1), a, atol=1e-6)
    np.testing.assert_allclose(plan.plan.sum(0), b, atol=1e-6)


def test_sinkhorn_reports_non_convergence():
    rng = np.random.default_rng(1)
    a, b, C = random_instance(rng, 8, 8)
    with pytest.raises(SinkhornNonConvergence):
        sinkhorn(a, b, C, 1e-4 * float(np.median(C)), max_iter=3)


def two_class(rng, shift=0.0, n=40):
    return Dataset("d", {0: rng.normal(size=(n, 3)) + shift, 1: rng.normal(size=(n, 3)) + 5 + shift})


def test_otdd_symmetric():
    rng = np.random.default_rng(2)
    A, B = two_class(rng), two_class(rng, 1.0)
    assert abs(otdd(A, B) - otdd(B, A)) < 1e-6


def test_otdd_self_distance_small():
    rng = np.random.default_rng(3)
    D = two_class(rng)
    X, y = D.arrays()
    scrambled = Dataset.from_arrays("s", X, rng.permutation(y))
    cfg = SinkhornConfig(eps_rel=1e-3, max_iter=20000)
    assert otdd(D, D, cfg) < 0.05 * otdd(D, scrambled, cfg)


def test_otdd_single_points():
    x1, x2 = np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])
    A, B = Dataset("a", {0: x1}), Dataset("b", {0: x2})
    cost = otdd_cost_matrix(A, B)
    w = class_w2(summarize(x1), summarize(x2))
    assert cost[0, 0] == pytest.approx(25.0 + w)
    dist, plan = otdd_plan(A, B)
    assert plan.plan[0, 0] == pytest.approx(1.0)
    assert dist == pytest.approx(math.sqrt(50.0), rel=1e-9)


def snap(concepts):
    n = len(concepts)
    return [LeafProb(i, d, c, (n - i) / n) for i, (d, c) in enumerate(concepts)]


def test_leaf_recovery():
    targets = [(0, c) for c in range(10)]
    assert leaf_recovery(snap(targets + [(1, 0)]), targets, 10) == (1.0, 1.0)
    s = snap([(1, 0), (0, 0)] + [(2, c) for c in range(8)])
    assert leaf_recovery(s, targets, 10) == (0.1, 0.1)


def test_leaf_recovery_uniform_expectation():
    rng = np.random.default_rng(0)
    concepts = [(d, c) for d in range(7) for c in range(10)]
    targets = set(concepts[:10])
    recalls = []
    for _ in range(4000):
        order = rng.permutation(70)
        recalls.append(leaf_recovery(snap([concepts[i] for i in order]), targets, 10)[1])
    assert np.mean(recalls) == pytest.approx(1 / 7, abs=0.01)


def test_access_cost_model():
    c = access_cost_model(240_000, 50, 1000, 40)
    assert (c.gdi, c.adi, c.ratio) == (12_000_000, 40_000, 300.0)
    assert access_cost_model(7000, 50, 200, 100).adi == 20_000
    assert access_cost_model(7000, 50, 200, 40).ratio == 43.75
