"""Log likelihoods exposing value, gradient and Hessian in the coefficients.

``hessian`` always returns ``H = -d2l/dbeta dbeta'`` (the observed
information), so that ``H + S_lambda`` is the penalized Hessian of the
negative log likelihood.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln


class SupportViolation(ValueError):
    pass


class NoEventsError(ValueError):
    pass


class LikelihoodModel(abc.ABC):
    has_scale: bool = False
    scale: float = 1.0

    @property
    @abc.abstractmethod
    def n_obs(self) -> int: ...

    @abc.abstractmethod
    def loglik(self, beta: np.ndarray) -> float: ...

    @abc.abstractmethod
    def grad(self, beta: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def hessian(self, beta: np.ndarray) -> np.ndarray: ...

    def expected_hessian(self, beta: np.ndarray) -> np.ndarray | None:
        return None

    def estimate_scale(self, beta: np.ndarray, edf: float) -> float:
        return 1.0


# --- links ------------------------------------------------------------------

@dataclass(frozen=True)
class Link:
    name: str

    def inverse(self, eta):
        if self.name == "identity":
            return eta
        if self.name == "log":
            return np.exp(eta)
        return expit(eta)

    def d1(self, eta):
        """d mu / d eta"""
        if self.name == "identity":
            return np.ones_like(eta)
        if self.name == "log":
            return np.exp(eta)
        mu = expit(eta)
        return mu * (1 - mu)

    def d2(self, eta):
        if self.name == "identity":
            return np.zeros_like(eta)
        if self.name == "log":
            return np.exp(eta)
        mu = expit(eta)
        return mu * (1 - mu) * (1 - 2 * mu)


# --- families -----------------------------------------------------------------

FAMILY_LINKS = {
    "gaussian": ("identity", "log"),
    "poisson": ("log", "identity"),
    "binomial": ("logit",),
    "gamma": ("log", "identity"),
}
CANONICAL = {"gaussian": "identity", "poisson": "log", "binomial": "logit", "gamma": None}


class GlmLikelihood(LikelihoodModel):
    """Exponential family log likelihood with a link function.

    ``weights`` are prior weights (binomial trials for grouped binomial data,
    in which case ``y`` is the observed proportion).
    """

    def __init__(self, family: str, X, y, link: str | None = None, offset=None,
                 weights=None, scale: float = 1.0):
        if family not in FAMILY_LINKS:
            raise ValueError(f"unknown family {family!r}")
        link = link or FAMILY_LINKS[family][0]
        if link not in FAMILY_LINKS[family]:
            raise ValueError(f"link {link!r} not available for family {family!r}")
        self.family = family
        self.link = Link(link)
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        n = self.y.size
        self.offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
        self.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        self.has_scale = family in ("gaussian", "gamma")
        self.scale = float(scale)
        self._check_support()

    def _check_support(self):
        y, f = self.y, self.family
        if not np.all(np.isfinite(y)):
            raise SupportViolation("response has non-finite values")
        if f == "poisson" and np.any(y < 0):
            raise SupportViolation("poisson response must be non-negative")
        if f == "binomial" and np.any((y < 0) | (y > 1)):
            raise SupportViolation("binomial response must lie in [0, 1]")
        if f == "gamma" and np.any(y <= 0):
            raise SupportViolation("gamma response must be positive")
        if np.any(self.weights < 0):
            raise SupportViolation("prior weights must be non-negative")

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def canonical(self) -> bool:
        return CANONICAL[self.family] == self.link.name

    def eta(self, beta):
        return self.X @ beta + self.offset

    def mu(self, beta):
        return self.link.inverse(self.eta(beta))

    def variance(self, mu):
        f = self.family
        if f == "gaussian":
            return np.ones_like(mu)
        if f == "poisson":
            return mu
        if f == "binomial":
            return mu * (1 - mu)
        return mu ** 2

    def dvariance(self, mu):
        f = self.family
        if f == "gaussian":
            return np.zeros_like(mu)
        if f == "poisson":
            return np.ones_like(mu)
        if f == "binomial":
            return 1 - 2 * mu
        return 2 * mu

    def _valid_mu(self, mu):
        f = self.family
        if f in ("poisson", "gamma"):
            return np.all(mu > 0)
        if f == "binomial":
            return np.all((mu > 0) & (mu < 1))
        return True

    def loglik(self, beta) -> float:
        mu = self.mu(beta)
        if not self._valid_mu(mu):
            return -np.inf
        y, w, phi = self.y, self.weights, self.scale
        f = self.family
        if f == "gaussian":
            return float(np.sum(-w * (y - mu) ** 2 / (2 * phi) - 0.5 * np.log(2 * np.pi * phi / np.where(w > 0, w, 1))))
        if f == "poisson":
            return float(np.sum(w * (y * np.log(mu) - mu - gammaln(y + 1))))
        if f == "binomial":
            m = w
            ll = m * (np.where(y > 0, y * np.log(mu), 0.0) + np.where(y < 1, (1 - y) * np.log1p(-mu), 0.0))
            ll += gammaln(m + 1) - gammaln(m * y + 1) - gammaln(m * (1 - y) + 1)
            return float(np.sum(ll))
        nu = w / phi
        return float(np.sum((nu - 1) * np.log(y) - nu * y / mu + nu * np.log(nu / mu) - gammaln(nu)))

    def _derivs(self, beta):
        eta = self.eta(beta)
        mu = self.link.inverse(eta)
        V = self.variance(mu)
        h1 = self.link.d1(eta)
        h2 = self.link.d2(eta)
        w = self.weights / self.scale
        r = self.y - mu
        dl = w * r * h1 / V
        expected = w * h1 ** 2 / V
        d2 = -expected + w * r * (h2 / V - h1 ** 2 * self.dvariance(mu) / V ** 2)
        return dl, d2, expected

    def grad(self, beta) -> np.ndarray:
        dl, _, _ = self._derivs(beta)
        return self.X.T @ dl

    def hessian(self, beta) -> np.ndarray:
        _, d2, _ = self._derivs(beta)
        return self.X.T @ (-d2[:, None] * self.X)

    def expected_hessian(self, beta) -> np.ndarray:
        return self.X.T @ (self.working_weights(beta)[:, None] * self.X) / self.scale

    def working_weights(self, beta) -> np.ndarray:
        """IRLS weights ``W`` at unit scale."""
        eta = self.eta(beta)
        mu = self.link.inverse(eta)
        return self.weights * self.link.d1(eta) ** 2 / self.variance(mu)

    def pearson(self, beta) -> float:
        mu = self.mu(beta)
        return float(np.sum(self.weights * (self.y - mu) ** 2 / self.variance(mu)))

    def estimate_scale(self, beta, edf) -> float:
        if not self.has_scale:
            return 1.0
        denom = self.n_obs - edf
        if denom <= 0:
            raise ValueError(f"n - edf = {denom:.3g} is not positive")
        return self.pearson(beta) / denom


def glm_loglik_bundle(family: str, X, y, offset=None, link: str | None = None,
                      weights=None, scale: float = 1.0) -> GlmLikelihood:
    return GlmLikelihood(family, X, y, link=link, offset=offset, weights=weights, scale=scale)


class CoxPartialLikelihood(LikelihoodModel):
    """Cox proportional hazards partial likelihood, Breslow ties.

    Risk-set sums are reverse cumulative sums over subjects sorted by time;
    tied times share the sum taken at the first subject of the tie group.
    """

    def __init__(self, X, time, status, ties: str = "breslow"):
        if ties != "breslow":
            raise ValueError("only Breslow tie handling is implemented")
        X = np.asarray(X, dtype=float)
        time = np.asarray(time, dtype=float).reshape(-1)
        status = np.asarray(status).reshape(-1)
        if np.any(~np.isfinite(time)) or np.any(time <= 0):
            raise SupportViolation("survival times must be positive and finite")
        if not np.all(np.isin(status, (0, 1))):
            raise SupportViolation("status must be 0 or 1")
        if not np.any(status == 1):
            raise NoEventsError("no events in the data")
        order = np.argsort(time, kind="stable")
        self.X = X[order]
        self.time = time[order]
        self.status = status[order].astype(float)
        self._order = order
        # first index of each tie group in sorted order
        first = np.searchsorted(self.time, self.time, side="left")
        self._first = first

    @property
    def n_obs(self) -> int:
        return self.time.size

    def _risk(self, beta):
        eta = self.X @ beta
        shift = eta.max()
        e = np.exp(eta - shift)
        return eta, e, shift

    @staticmethod
    def _revcumsum(a):
        return np.cumsum(a[::-1], axis=0)[::-1]

    def loglik(self, beta) -> float:
        eta, e, shift = self._risk(beta)
        s0 = self._revcumsum(e)[self._first]
        d = self.status == 1
        return float(np.sum(eta[d] - np.log(s0[d]) - shift))

    def grad(self, beta) -> np.ndarray:
        eta, e, _ = self._risk(beta)
        s0 = self._revcumsum(e)[self._first]
        s1 = self._revcumsum(e[:, None] * self.X)[self._first]
        d = self.status == 1
        return np.sum(self.X[d] - s1[d] / s0[d, None], axis=0)

    def hessian(self, beta) -> np.ndarray:
        eta, e, _ = self._risk(beta)
        d = self.status == 1
        s0 = self._revcumsum(e)[self._first][d]
        s1 = self._revcumsum(e[:, None] * self.X)[self._first][d]
        outer = e[:, None, None] * self.X[:, :, None] * self.X[:, None, :]
        s2 = self._revcumsum(outer)[self._first][d]
        xbar = s1 / s0[:, None]
        H = np.sum(s2 / s0[:, None, None], axis=0) - xbar.T @ xbar
        return 0.5 * (H + H.T)


def cox_partial_bundle(X, time, status, ties: str = "breslow") -> CoxPartialLikelihood:
    return CoxPartialLikelihood(X, time, status, ties)
