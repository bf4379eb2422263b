import numpy as np
import pytest

from fellnerschall.likelihoods import (FAMILY_LINKS, NoEventsError, SupportViolation,
                                       cox_partial_bundle, glm_loglik_bundle)

from fd import check_derivatives, random_model


def test_poisson_single_observation():
    m = glm_loglik_bundle("poisson", np.ones((1, 1)), [2.0])
    beta = np.zeros(1)
    assert m.loglik(beta) == pytest.approx(-1.0 - np.log(2.0))
    assert m.grad(beta)[0] == pytest.approx(1.0)
    assert m.hessian(beta)[0, 0] == pytest.approx(1.0)


def test_cox_two_subjects_one_event():
    m = cox_partial_bundle(np.array([[0.3], [-1.2]]), [1.0, 2.0], [1, 0])
    assert m.loglik(np.zeros(1)) == pytest.approx(-np.log(2.0))


def test_cox_gradient_at_zero():
    rng = np.random.default_rng(0)
    n = 25
    X = rng.normal(size=(n, 2))
    time = rng.permutation(np.arange(1.0, n + 1))
    status = rng.integers(0, 2, n)
    status[0] = 1
    m = cox_partial_bundle(X, time, status)
    expected = np.zeros(2)
    for i in np.flatnonzero(status):
        at_risk = time >= time[i]
        expected += X[i] - X[at_risk].mean(axis=0)
    np.testing.assert_allclose(m.grad(np.zeros(2)), expected, rtol=1e-12, atol=1e-12)


def test_cox_breslow_ties():
    X = np.array([[1.0], [0.0], [2.0]])
    m = cox_partial_bundle(X, [1.0, 1.0, 3.0], [1, 1, 0])
    beta = np.array([0.7])
    r = np.exp(X[:, 0] * beta[0])
    # both tied events see the full risk set
    expected = X[0, 0] * 0.7 + X[1, 0] * 0.7 - 2 * np.log(r.sum())
    assert m.loglik(beta) == pytest.approx(expected)


def test_cox_shift_invariance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 2))
    t = rng.exponential(size=30) + 0.1
    s = rng.integers(0, 2, 30)
    s[0] = 1
    beta = np.array([0.4, -0.2])
    a, b = cox_partial_bundle(X, t, s), cox_partial_bundle(X, t + 5.0, s)
    assert a.loglik(beta) == pytest.approx(b.loglik(beta), rel=1e-13)
    np.testing.assert_allclose(a.grad(beta), b.grad(beta), rtol=1e-12)


def test_cox_errors():
    with pytest.raises(NoEventsError):
        cox_partial_bundle(np.ones((3, 1)), [1.0, 2.0, 3.0], [0, 0, 0])
    with pytest.raises(SupportViolation):
        cox_partial_bundle(np.ones((2, 1)), [1.0, -2.0], [1, 0])


@pytest.mark.parametrize("family,y", [("poisson", [-1.0, 2.0]), ("binomial", [0.5, 1.2]),
                                      ("gamma", [0.0, 1.0])])
def test_support_violations(family, y):
    with pytest.raises(SupportViolation):
        glm_loglik_bundle(family, np.ones((2, 1)), y)


CASES = [(f, l) for f, links in FAMILY_LINKS.items() for l in links] + [("cox", None)]


@pytest.mark.parametrize("family,link", CASES)
def test_derivatives_match_finite_differences(family, link):
    for seed in range(10):
        model, beta = random_model(family, link, seed)
        check_derivatives(model, beta)


@pytest.mark.parametrize("family", ["gaussian", "poisson", "binomial"])
def test_canonical_observed_equals_expected(family):
    model, beta = random_model(family, FAMILY_LINKS[family][0], 3)
    np.testing.assert_allclose(model.hessian(beta), model.expected_hessian(beta), rtol=1e-12)


def test_noncanonical_expected_differs():
    model, beta = random_model("gamma", "log", 4)
    assert not np.allclose(model.hessian(beta), model.expected_hessian(beta))


def test_scale_estimate_gaussian():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 2))
    y = X @ [1.0, -1.0] + rng.normal(scale=0.5, size=40)
    m = glm_loglik_bundle("gaussian", X, y)
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    assert m.estimate_scale(beta, 2.0) == pytest.approx(np.sum((y - X @ beta) ** 2) / 38)
