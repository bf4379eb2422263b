"""Seeded likelihood instances and finite-difference derivative checks."""

import numpy as np

from fellnerschall.likelihoods import cox_partial_bundle, glm_loglik_bundle


def random_model(family, link, seed, n=30, p=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) / np.sqrt(p)
    beta = rng.normal(scale=0.5, size=p)
    if family == "cox":
        eta = X @ beta
        t = rng.exponential(size=n) / np.exp(eta)
        s = (rng.uniform(size=n) < 0.75).astype(float)
        s[0] = 1.0
        return cox_partial_bundle(X, t, s), beta
    # keep the mean inside the support for identity links
    if link == "identity" and family in ("poisson", "gamma"):
        X = np.hstack([np.ones((n, 1)), np.abs(X[:, 1:])])
        beta = np.abs(beta) + np.r_[2.0, np.zeros(p - 1)]
    eta = X @ beta
    mu = {"identity": lambda e: e, "log": np.exp, "logit": lambda e: 1 / (1 + np.exp(-e))}[link](eta)
    if family == "gaussian":
        y = mu + rng.normal(scale=0.5, size=n)
    elif family == "poisson":
        y = rng.poisson(mu).astype(float)
    elif family == "binomial":
        y = rng.binomial(1, mu).astype(float)
    else:
        y = rng.gamma(2.0, mu / 2.0)
    scale = 0.7 if family in ("gaussian", "gamma") else 1.0
    model = glm_loglik_bundle(family, X, y, link=link, scale=scale)
    # evaluate away from the truth so the score is not near zero
    return model, beta + rng.normal(scale=0.1, size=p)


def check_derivatives(model, beta, grad_rtol=1e-5, hess_rtol=1e-4):
    """Central differences of loglik against grad and of grad against -hessian."""
    p = beta.size
    g = model.grad(beta)
    H = model.hessian(beta)
    fd_g = np.empty(p)
    fd_H = np.empty((p, p))
    for i in range(p):
        h = 1e-5 * max(1.0, abs(beta[i]))
        e = np.zeros(p)
        e[i] = h
        fd_g[i] = (model.loglik(beta + e) - model.loglik(beta - e)) / (2 * h)
        fd_H[:, i] = -(model.grad(beta + e) - model.grad(beta - e)) / (2 * h)
    gscale = max(np.linalg.norm(g), 1e-3)
    Hscale = max(np.linalg.norm(H), 1e-3)
    assert np.linalg.norm(g - fd_g) <= grad_rtol * gscale, (g, fd_g)
    assert np.linalg.norm(H - fd_H) <= hess_rtol * Hscale, (H, fd_H)
