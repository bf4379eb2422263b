"""Single smoothing parameter comparison of EM, accelerated EM and
Fellner-Schall steps for Gaussian additive models.

For a block ``S_j`` that shares no coefficients with other blocks,
``tr(S^- S_j) = k / lambda_j`` with ``k = rank(S_j)``, and with
``gamma(lambda) = tr((X'X + S)^{-1} S_j)`` and ``b = beta' S_j beta / sigma2``
(both at the current ``lambda'``) the three updates solve

* EM:              ``k / lambda = b + gamma(lambda')``
* accelerated EM:  ``k / lambda = b + gamma(lambda)``
* Fellner-Schall:  ``k / lambda = b + gamma(lambda') lambda' / lambda``

``gamma`` has the closed form ``sum_i L_i / (1 + lambda L_i)`` with ``L_i``
the eigenvalues of ``R^{-T} S_j R^{-1}``, ``R`` from the QR decomposition of
``X`` stacked on a square root of the other penalties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.optimize import brentq, minimize_scalar

from .gaussian import GaussianFit, GaussianProblem, evaluate
from .penalties import assemble


class RankMismatchError(ValueError):
    pass


class DegenerateBError(ValueError):
    pass


class NoRootError(ValueError):
    pass


@dataclass
class SingleBlockProblem:
    k: int
    b: float
    Lambda: np.ndarray
    lambda_prime: float
    context: GaussianProblem
    lam: np.ndarray
    j: int
    sigma2: float

    def with_lambda(self, value: float) -> np.ndarray:
        lam = self.lam.copy()
        lam[self.j] = value
        return lam


def _isolated(pset, j) -> bool:
    for g in pset.groups:
        if j in g.members:
            return len(g.members) == 1
    return False


def single_block_problem(problem: GaussianProblem, lam, j: int, sigma2: float,
                         rank_tol: float = 1e-7) -> SingleBlockProblem:
    """Collect ``k``, ``b`` and the spectral constants for block ``j`` at ``lam``."""
    pset = problem.penalties
    lam = np.asarray(lam, dtype=float).copy()
    if not _isolated(pset, j):
        raise ValueError(f"block {j} overlaps other penalty blocks")
    blk = pset.blocks[j]
    vals = np.linalg.eigvalsh(blk.matrix)
    k = int(np.sum(vals > rank_tol * vals.max()))

    others = lam.copy()
    others[j] = 0.0
    S_other = sum((l * E for l, E in zip(others, pset.embedded)), np.zeros((pset.p, pset.p)))
    ev, evec = np.linalg.eigh(S_other)
    keep = ev > rank_tol * max(ev.max(), 0.0) if ev.max() > 0 else np.zeros(ev.size, bool)
    B = (evec[:, keep] * np.sqrt(ev[keep])).T
    R = np.linalg.qr(np.vstack([problem.X, B]), mode="r")
    if np.any(np.abs(np.diag(R)) <= 1e-12 * np.abs(np.diag(R)).max()):
        raise RankMismatchError("X'X + S_{-j} is singular")
    Sj = pset.embedded[j]
    Rinv_Sj = sla.solve_triangular(R, Sj, trans="T")
    M = sla.solve_triangular(R, Rinv_Sj.T, trans="T")
    Lam = np.sort(np.linalg.eigvalsh(0.5 * (M + M.T)))[::-1]
    n_pos = int(np.sum(Lam > rank_tol * Lam[0])) if Lam[0] > 0 else 0
    if n_pos != k:
        raise RankMismatchError(f"{n_pos} positive eigenvalues for a rank {k} block")
    fit = evaluate(problem, lam, sigma2)
    return SingleBlockProblem(k, float(fit.quad[j] / sigma2), Lam[:k], float(lam[j]),
                              problem, lam, j, sigma2)


def spectral_gamma(problem: SingleBlockProblem, lam: float) -> float:
    """``tr((X'X + S)^{-1} S_j)`` as a function of ``lambda_j`` alone."""
    L = problem.Lambda
    return float(np.sum(L / (1.0 + lam * L)))


def q_function(state: GaussianFit, lam) -> float:
    """EM Q-function anchored at ``state`` (the fit at ``lambda'``)."""
    lam = np.asarray(lam, dtype=float)
    pset = state.problem.penalties
    s2 = state.sigma2
    pen = float(lam @ state.quad)
    r = pset.rank
    return float(-(state.rss + pen) / (2 * s2)
                 + 0.5 * (pset.log_det(lam) - r * np.log(s2))
                 - 0.5 * float(lam @ state.trace_inv))


def em_step(problem: SingleBlockProblem) -> float:
    denom = problem.b + spectral_gamma(problem, problem.lambda_prime)
    if denom <= 0:
        raise DegenerateBError("b + gamma is zero")
    return problem.k / denom


def fs_step(problem: SingleBlockProblem) -> float:
    if problem.b <= 0:
        raise DegenerateBError("b is zero")
    lp = problem.lambda_prime
    return (problem.k - spectral_gamma(problem, lp) * lp) / problem.b


def _alpha(problem, lam):
    L = problem.Lambda
    return float(np.sum(1.0 / (lam * (1.0 + lam * L))) + (problem.k - L.size) / lam)


def accelerated_em_step(problem: SingleBlockProblem, rtol: float = 1e-10) -> float:
    """Root of ``k / lambda - gamma(lambda) = b``, found by Brent's method on log lambda."""
    b = problem.b
    if b <= 0 or not np.any(problem.Lambda > 0) and b == 0:
        raise NoRootError("k/lambda - gamma(lambda) = b has no positive root when b = 0")

    def f(t):
        return _alpha(problem, np.exp(t)) - b

    lo = hi = np.log(problem.lambda_prime)
    step = 1.0
    while f(lo) < 0:
        lo -= step
        step *= 2
        if lo < -800:
            raise NoRootError("could not bracket the root from below")
    step = 1.0
    while f(hi) > 0:
        hi += step
        step *= 2
        if hi > 800:
            raise NoRootError("could not bracket the root from above")
    if lo == hi:
        return float(np.exp(lo))
    t = brentq(f, lo, hi, xtol=rtol * 1e-2, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(np.exp(t))


def reml_1d(problem: SingleBlockProblem, lam_j: float) -> float:
    return evaluate(problem.context, problem.with_lambda(lam_j), problem.sigma2).reml


def reml_optimum_1d(problem: SingleBlockProblem, lo: float | None = None,
                    hi: float | None = None, n_grid: int = 121, xtol: float = 1e-8) -> float:
    """Maximizer of REML in ``lambda_j`` (others and sigma2 fixed).

    A log-spaced scan over ``[lo, hi]`` (default ``lambda' / 1e6`` to
    ``lambda' * 1e6``) is refined by bounded Brent/golden search on
    ``log lambda`` between the neighbours of the best grid point.
    """
    lp = problem.lambda_prime
    lo = lp / 1e6 if lo is None else lo
    hi = lp * 1e6 if hi is None else hi
    grid = np.linspace(np.log(lo), np.log(hi), n_grid)
    vals = np.array([reml_1d(problem, np.exp(t)) for t in grid])
    i = int(np.argmax(vals))
    a, c = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = minimize_scalar(lambda t: -reml_1d(problem, np.exp(t)), bounds=(a, c),
                          method="bounded", options={"xatol": xtol})
    best = res.x if -res.fun >= vals[i] else grid[i]
    return float(np.exp(best))


def step_ordering_experiment(problem: GaussianProblem, lam, j: int, grid, sigma2: float,
                             reml_opt: float | None = None) -> list[dict]:
    """One row per ``lambda'`` in ``grid``: the EM, accelerated EM and FS
    proposals for block ``j``, the 1-d REML optimum and REML at each."""
    grid = np.asarray(grid, dtype=float)
    base = single_block_problem(problem, lam, j, sigma2)
    if reml_opt is None:
        reml_opt = reml_optimum_1d(base, grid.min() / 1e6, grid.max() * 1e6)
    rows = []
    for lp in grid:
        sb = single_block_problem(problem, base.with_lambda(lp), j, sigma2)
        em, acc, fs = em_step(sb), accelerated_em_step(sb), fs_step(sb)
        rows.append({
            "lambda_prime": float(lp),
            "em": em,
            "acc_em": acc,
            "fs": fs,
            "reml_opt": reml_opt,
            "b": sb.b,
            "lr_prime": reml_1d(sb, lp),
            "lr_em": reml_1d(sb, em),
            "lr_acc_em": reml_1d(sb, acc),
            "lr_fs": reml_1d(sb, fs),
            "lr_opt": reml_1d(sb, reml_opt),
        })
    return rows


def root_curves(problem: GaussianProblem, lam, j: int, sigma2: float, lambda_prime: float,
                grid) -> list[dict]:
    """Left-hand sides of the root-finding problems as functions of lambda.

    Each update's proposal is where its curve crosses the constant ``b``
    (evaluated at ``lambda'``). The ``reml`` curve is
    ``k/lambda - gamma(lambda) - b(lambda) + b(lambda')``, crossing ``b`` at the
    1-d REML stationary point.
    """
    sb = single_block_problem(problem, np.where(np.arange(len(lam)) == j, lambda_prime, lam),
                              j, sigma2)
    g0 = spectral_gamma(sb, lambda_prime)
    out = []
    for l in np.asarray(grid, dtype=float):
        fit = evaluate(problem, sb.with_lambda(l), sigma2)
        bl = fit.quad[j] / sigma2
        gl = spectral_gamma(sb, l)
        out.append({
            "lambda": float(l),
            "b": sb.b,
            "em": sb.k / l - g0,
            "acc_em": sb.k / l - gl,
            "fs": sb.k / l - g0 * lambda_prime / l,
            "reml": sb.k / l - gl - bl + sb.b,
        })
    return out


def overshoots(lambda_prime: float, proposal: float, optimum: float, tol: float = 1e-6) -> bool:
    """True when the step lands further from the optimum than it started (log scale).

    ``tol`` absorbs the error in the located optimum.
    """
    start = abs(np.log(lambda_prime) - np.log(optimum))
    return abs(np.log(proposal) - np.log(optimum)) > start + tol
