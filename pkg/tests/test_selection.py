import numpy as np
import pytest

from macv.data import CandidateSpec, ClusteredDataset, Family, WeightVector
from macv.errors import ImoriStubWarning
from macv.estimators import fit
from macv.losses import LossSpec
from macv.selection import (MethodKind, MethodResult, cv_select, equal_weights,
                            independence_quasi_likelihood, qic_from_parts, qic_imori, qic_pan,
                            qic_select, robust_covariance)
from macv.weights import criterion_cn

from conftest import binary_data, gee_spec, linear_data, ols_spec, random_instance

SQ = LossSpec.parse("squared")


@pytest.mark.parametrize("s", [1, 4, 32])
def test_equal_weights(s):
    np.testing.assert_array_equal(np.asarray(equal_weights(s)), np.full(s, 1 / s))
    assert equal_weights(32)[0] == 0.03125


def test_cv_select_examples():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(20)
    f = np.column_stack([y + 1, y, y - 0.5])
    assert cv_select((y, f), SQ).chosen == 1
    tied = np.tile(y[:, None] + 0.1, (1, 3))
    res = cv_select((y, tied), SQ)
    assert res.chosen == 0 and res.method is MethodKind.CV_SELECT
    np.testing.assert_array_equal(np.asarray(res.weights), [1, 0, 0])


@pytest.mark.parametrize("loss", ["squared", "bernoulli", "poisson", "check:0.7"])
def test_cv_select_brute_force(loss):
    spec = LossSpec.parse(loss)
    rng = np.random.default_rng(3)
    for _ in range(20):
        y, f = random_instance(loss, 20, 3, rng)
        want = int(np.argmin([criterion_cn(e, (y, f), spec) for e in np.eye(3)]))
        assert cv_select((y, f), spec).chosen == want


def test_method_result_checks_selectors():
    with pytest.raises(ValueError):
        MethodResult(MethodKind.QIC_PAN, WeightVector([0.5, 0.5]), chosen=0)
    ok = MethodResult("equal", WeightVector([0.5, 0.5]))
    assert not ok.method.is_selector


def _logistic_singletons(n, beta, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2))
    eta = beta[0] + beta[1] * x[:, 0]
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return ClusteredDataset.from_arrays(y, x)


def test_qic_identity_case():
    omega = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert qic_from_parts(-10.0, omega, np.linalg.inv(omega)) == pytest.approx(20.0 + 4.0)


def test_qic_close_to_aic_on_independent_logistic():
    ratios = []
    for seed in range(20):
        d = _logistic_singletons(500, (0.3, 0.8), seed)
        f = fit(CandidateSpec(Family.GEE_BERNOULLI, (0,), working_correlation="independence"), d)
        aic = -2 * independence_quasi_likelihood(f, d) + 2 * 2
        ratios.append(qic_pan(f, d) / aic)
    assert np.max(np.abs(np.array(ratios) - 1)) < 0.05


def test_robust_covariance_shapes():
    d = binary_data(n=50, seed=1)
    f = fit(gee_spec(), d)
    v, omega = robust_covariance(f, d)
    assert v.shape == omega.shape == (3, 3)
    assert np.all(np.linalg.eigvalsh(v) > 0)


@pytest.mark.slow
def test_qic_prefers_smaller_over_noise_covariate():
    small_wins = 0
    for seed in range(200):
        d = _logistic_singletons(500, (0.3, 0.8), seed)
        small = fit(CandidateSpec(Family.GEE_BERNOULLI, (0,), working_correlation="independence"), d)
        big = fit(CandidateSpec(Family.GEE_BERNOULLI, (0, 1), working_correlation="independence"), d)
        small_wins += qic_select([small, big], d).chosen == 0
    assert small_wins >= 120


def test_qic_imori_stub_warns_and_matches_pan():
    d = binary_data(n=40, seed=2)
    f = fit(gee_spec(), d)
    with pytest.warns(ImoriStubWarning):
        v = qic_imori(f, d)
    assert v == qic_pan(f, d)
    fits = [f, fit(gee_spec(cov=(0,)), d)]
    with pytest.warns(ImoriStubWarning):
        a = qic_select(fits, d, "qic_imori")
    assert a.chosen == qic_select(fits, d).chosen


def test_qic_select_not_applicable_to_sar():
    d = linear_data(n=20)
    res = qic_select([fit(ols_spec(d), d)], d)
    assert not res.applicable and res.weights is None
    with pytest.raises(ValueError):
        qic_pan(fit(ols_spec(d), d), d)
