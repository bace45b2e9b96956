import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macv.data import WeightVector
from macv.errors import DomainError, MaxItersReached
from macv.losses import LossSpec
from conftest import grid_min, random_instance
from macv.weights import (Method, OptimizerConfig, criterion_cn, criterion_gradient,
                          minimize_weights, simplex_project)

SQ = LossSpec.parse("squared")
LOSSES = ["squared", "bernoulli", "poisson", "check:0.3"]


def test_criterion_examples():
    y = np.array([0.0, 1.0])
    f = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert criterion_cn([0.5, 0.5], (y, f), SQ) == pytest.approx(0.5)
    # unit weight equals -2 sum of subject kernels over the column
    rng = np.random.default_rng(0)
    y, f = random_instance("bernoulli", 12, 3, rng)
    from macv.losses import q_bernoulli
    assert criterion_cn([0, 1, 0], (y, f), LossSpec.parse("bernoulli")) == \
        pytest.approx(-2 * np.sum(q_bernoulli(y, f[:, 1])))
    # S = 1: constant
    assert criterion_cn([1.0], (y, f[:, :1]), LossSpec.parse("bernoulli")) == \
        pytest.approx(-2 * np.sum(q_bernoulli(y, f[:, 0])))


def test_minimize_exact_column():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(20)
    f = np.column_stack([y + 1, y, y - rng.standard_normal(20)])
    w, val = minimize_weights((y, f), SQ)
    np.testing.assert_allclose(np.asarray(w), [0, 1, 0], atol=1e-6)
    assert val == pytest.approx(0.0, abs=1e-10)


def test_identical_columns_give_uniform():
    y = np.arange(6.0)
    f = np.tile((y + 0.3)[:, None], (1, 4))
    w, _ = minimize_weights((y, f), SQ)
    np.testing.assert_array_equal(np.asarray(w), np.full(4, 0.25))


def test_squared_grid_oracle_example():
    rng = np.random.default_rng(20)
    y, f = random_instance("squared", 20, 3, rng)
    assert minimize_weights((y, f), SQ).value <= grid_min(y, f, SQ) + 1e-4


@pytest.mark.parametrize("loss", LOSSES)
def test_grid_oracle_fifty_instances(loss):
    spec = LossSpec.parse(loss)
    rng = np.random.default_rng(hash(loss) % 2**32)
    for _ in range(50):
        y, f = random_instance(loss, 30, 3, rng)
        t0 = time.perf_counter()
        res = minimize_weights((y, f), spec)
        dt = time.perf_counter() - t0
        best = grid_min(y, f, spec)
        assert res.value <= best + 1e-4
        assert dt < 1.0


def test_frank_wolfe_agrees_with_projected_gradient():
    rng = np.random.default_rng(5)
    y, f = random_instance("bernoulli", 40, 5, rng)
    loss = LossSpec.parse("bernoulli")
    a = minimize_weights((y, f), loss, OptimizerConfig(method=Method.PROJECTED_GRADIENT))
    with pytest.warns(MaxItersReached):
        b = minimize_weights((y, f), loss, OptimizerConfig(method="frank_wolfe", max_iters=2000))
    # sublinear on faces: close to, never below, the projected-gradient optimum
    assert a.value - 1e-8 <= b.value <= a.value * (1 + 1e-4)


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(9)
    y, f = random_instance("poisson", 25, 4, rng)
    loss = LossSpec.parse("poisson")
    w = np.array([0.1, 0.2, 0.3, 0.4])
    g = criterion_gradient(w, (y, f), loss)
    h = 1e-6
    num = [(criterion_cn(w + h * e, (y, f), loss) - criterion_cn(w - h * e, (y, f), loss)) / (2 * h)
           for e in np.eye(4)]
    np.testing.assert_allclose(g, num, rtol=1e-5)


def test_poisson_blend_domain():
    y = np.array([1.0, 2.0])
    with pytest.raises(DomainError):
        criterion_cn([0.5, 0.5], (y, np.array([[1.0, -3.0], [1.0, 1.0]])), LossSpec.parse("poisson"))


@settings(max_examples=60, deadline=None)
@given(loss=st.sampled_from(LOSSES), seed=st.integers(0, 2**31), s=st.integers(2, 6),
       n=st.integers(5, 40))
def test_descent_property(loss, seed, s, n):
    spec = LossSpec.parse(loss)
    y, f = random_instance(loss, n, s, np.random.default_rng(seed))
    res = minimize_weights((y, f), spec)
    vertex = min(criterion_cn(e, (y, f), spec) for e in np.eye(s))
    uniform = criterion_cn(np.full(s, 1 / s), (y, f), spec)
    assert res.value <= vertex + 1e-12 * max(1, abs(vertex))
    assert res.value <= uniform + 1e-12 * max(1, abs(uniform))
    assert res.value == pytest.approx(criterion_cn(res.weights, (y, f), spec))


@settings(max_examples=60, deadline=None)
@given(loss=st.sampled_from(LOSSES), seed=st.integers(0, 2**31), t=st.floats(0, 1))
def test_criterion_convex(loss, seed, t):
    spec = LossSpec.parse(loss)
    rng = np.random.default_rng(seed)
    y, f = random_instance(loss, 15, 4, rng)
    a, b = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    mid = criterion_cn(t * a + (1 - t) * b, (y, f), spec)
    assert mid <= t * criterion_cn(a, (y, f), spec) + (1 - t) * criterion_cn(b, (y, f), spec) + 1e-9


@settings(max_examples=30, deadline=None)
@given(loss=st.sampled_from(LOSSES), seed=st.integers(0, 2**31))
def test_permutation_invariance(loss, seed):
    spec = LossSpec.parse(loss)
    rng = np.random.default_rng(seed)
    y, f = random_instance(loss, 20, 4, rng)
    perm = rng.permutation(4)
    a = minimize_weights((y, f), spec)
    b = minimize_weights((y, f[:, perm]), spec)
    assert b.value == pytest.approx(a.value, rel=1e-6, abs=1e-6)


# ---------------------------------------------------------------------------
# simplex projection

def test_projection_examples():
    np.testing.assert_allclose(np.asarray(simplex_project([0.2, 0.8])), [0.2, 0.8])
    np.testing.assert_allclose(np.asarray(simplex_project([2, 0])), [1, 0])
    np.testing.assert_allclose(np.asarray(simplex_project([0.5, 0.5, 0.5])), [1 / 3] * 3)
    assert isinstance(simplex_project([3.0]), WeightVector)


def _project_brute(v):
    """Exact projection by enumerating supports and their KKT points."""
    m, s = v.shape
    best = np.full(m, np.inf)
    out = np.zeros_like(v)
    for k in range(1, s + 1):
        for supp in itertools.combinations(range(s), k):
            supp = list(supp)
            tau = (v[:, supp].sum(axis=1) - 1.0) / k
            w = np.zeros_like(v)
            w[:, supp] = v[:, supp] - tau[:, None]
            ok = np.all(w[:, supp] >= -1e-15, axis=1)
            dist = np.sum((w - v) ** 2, axis=1)
            take = ok & (dist < best)
            best[take] = dist[take]
            out[take] = w[take]
    return out


def test_projection_matches_brute_force_qp():
    rng = np.random.default_rng(2024)
    pts = rng.standard_normal((10_000, 4)) * rng.uniform(0.1, 3, (10_000, 1))
    want = _project_brute(pts)
    got = np.array([np.asarray(simplex_project(v)) for v in pts])
    np.testing.assert_allclose(got, want, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(v=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10))
def test_projection_properties(v):
    w = np.asarray(simplex_project(v))
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-10
    # idempotent
    np.testing.assert_allclose(np.asarray(simplex_project(w)), w, atol=1e-10)
