"""Exact REML smoothing parameter estimation for Gaussian additive models.

The model is ``y = X beta + e`` with ``e ~ N(0, sigma2 I)`` and penalty
``beta' S_lambda beta / (2 sigma2)``. Given lambda the coefficients solve a
penalized least squares problem; lambda is then moved by the generalized
Fellner-Schall update

    lambda_j <- sigma2 * [tr(S^- S_j) - tr((X'X + S)^-1 S_j)] / (b' S_j b) * lambda_j

optionally with step halving on the restricted log likelihood.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import linalg
from .penalties import GradedPenalty, PenaltySet, PenalizedSystem, assemble
from .report import FitReport
from .smooths import Design, ModelSpec, assemble_design


# relative lambda change below which a proposal is treated as no change
STATIONARY_STEP = 1e-8


class DegenerateEDFError(ValueError):
    pass


class MaxIterExceeded(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


NotPDError = linalg.NotPDError


@dataclass
class FitOptions:
    lambda_init: float | np.ndarray = 1.0
    tol_rel: float = 1e-8
    tol_lambda: float = 1e-6
    max_iter: int = 200
    k_max: int = 30
    lambda_cap: float = 1e12
    eps_beta: float = 1e-12
    step_control: str = "halving"
    raise_on_maxiter: bool = False

    def __post_init__(self):
        if self.step_control not in ("halving", "off"):
            raise ValueError(f"step_control must be 'halving' or 'off', got {self.step_control!r}")


@dataclass
class GaussianProblem:
    X: np.ndarray
    y: np.ndarray
    penalties: PenaltySet
    XtX: np.ndarray = field(init=False, repr=False)
    Xty: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y have different numbers of rows")
        if self.X.shape[1] != self.penalties.p:
            raise ValueError(f"X has {self.X.shape[1]} columns, penalties expect {self.penalties.p}")
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.y

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class GaussianFit:
    """Everything the outer iteration needs at one value of lambda."""

    problem: GaussianProblem
    lam: np.ndarray
    beta: np.ndarray
    system: PenalizedSystem
    rss: float
    quad: np.ndarray
    trace_pinv: np.ndarray
    trace_inv: np.ndarray
    logdet_A: float
    logdet_S: float
    sigma2: float = 1.0
    reml: float = float("nan")
    trajectory: list = field(default_factory=list)
    converged: bool = False
    stalled: bool = False

    @property
    def penalty(self) -> float:
        return float(self.lam @ self.quad)

    @property
    def edf(self) -> float:
        return float(self.problem.p - self.lam @ self.trace_inv)

    def reml_at(self, sigma2: float) -> float:
        return _reml(self, sigma2)

    def gradient(self, sigma2: float | None = None) -> np.ndarray:
        """Analytic derivative of the REML criterion with respect to lambda."""
        s2 = self.sigma2 if sigma2 is None else sigma2
        return 0.5 * (self.trace_pinv - self.trace_inv) - 0.5 * self.quad / s2


def solve_pls(X, y, S_lambda):
    """Penalized least squares ``(X'X + S)^{-1} X'y`` via Cholesky.

    Returns ``(beta, chol)``; raises :class:`NotPDError` when ``X'X + S`` is
    not positive definite.
    """
    X = np.asarray(X, dtype=float)
    A = X.T @ X + np.asarray(S_lambda, dtype=float)
    chol = linalg.cholesky(A)
    beta = linalg.chol_solve(chol, X.T @ np.asarray(y, dtype=float))
    return beta, chol


def evaluate(problem: GaussianProblem, lam, sigma2: float = 1.0) -> GaussianFit:
    """Solve for beta at ``lam`` and cache the traces and determinants."""
    pset = problem.penalties
    lam = np.asarray(lam, dtype=float).reshape(-1).copy()
    if len(pset):
        system = pset.graded(lam)
        sys_ = system.system(problem.XtX)
        logdet_S, trace_pinv = system.log_det, system.trace_pinv
        beta = sys_.solve(problem.Xty)
        trace_inv = sys_.block_traces()
    else:
        sys_ = GradedPenalty(np.eye(problem.p), np.zeros((problem.p, problem.p)), (),
                             0.0, np.zeros(0)).system(problem.XtX)
        logdet_S, trace_pinv, trace_inv = 0.0, np.zeros(0), np.zeros(0)
        beta = sys_.solve(problem.Xty)
    r = problem.y - problem.X @ beta
    fit = GaussianFit(problem, lam, beta, sys_, float(r @ r), pset.quadratics(beta),
                      trace_pinv, trace_inv, sys_.log_det, logdet_S, sigma2)
    fit.reml = _reml(fit, sigma2)
    return fit


def _reml(fit: GaussianFit, sigma2: float) -> float:
    prob = fit.problem
    m = prob.penalties.null_dim
    return float(-(fit.rss + fit.penalty) / (2 * sigma2)
                 + 0.5 * fit.logdet_S - 0.5 * fit.logdet_A
                 - 0.5 * (prob.n - m) * np.log(2 * np.pi * sigma2))


def reml_gaussian(X, y, pset: PenaltySet, lam, sigma2: float) -> float:
    """Restricted log likelihood at fixed ``sigma2``.

    The additive constant is the full Gaussian one,
    ``-(n - M) log(2 pi sigma2) / 2`` with ``M`` the penalty null space
    dimension, so the value is the exact log restricted likelihood.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    return evaluate(GaussianProblem(X, y, pset), lam, sigma2).reml


def reml_gradient(X, y, pset: PenaltySet, lam, sigma2: float) -> np.ndarray:
    return evaluate(GaussianProblem(X, y, pset), lam, sigma2).gradient()


def sigma2_update(state: GaussianFit) -> float:
    """``||y - X beta||^2 / (n - edf)``."""
    denom = state.problem.n - state.edf
    if denom <= 1e-8 * state.problem.n:
        raise DegenerateEDFError(f"n - edf = {denom:.3g} is not positive")
    return state.rss / denom


def fs_update(state: GaussianFit, pset: PenaltySet | None = None, lambda_cap: float = 1e12,
              eps_beta: float = 1e-12, scale: float | None = None) -> np.ndarray:
    """Generalized Fellner-Schall proposal for every smoothing parameter.

    Where ``beta' S_j beta`` is negligible, or the proposal would exceed
    ``lambda_cap``, the proposal is set to ``lambda_cap``.
    """
    pset = state.problem.penalties if pset is None else pset
    s2 = state.sigma2 if scale is None else scale
    return _fs_proposal(state.lam, state.trace_pinv, state.trace_inv, state.quad,
                        state.beta, pset, s2, lambda_cap, eps_beta)


def _fs_proposal(lam, trace_pinv, trace_inv, quad, beta, pset, scale, cap, eps_beta):
    num = trace_pinv - trace_inv
    thresh = eps_beta * (beta @ beta + 1.0) * pset.traces()
    out = np.empty_like(lam)
    for j in range(lam.size):
        if quad[j] <= thresh[j]:
            out[j] = cap
        elif num[j] <= 0:
            # numerator should be positive; round-off can break that
            out[j] = lam[j]
        else:
            out[j] = min(scale * num[j] / quad[j] * lam[j], cap)
    return out


def step_halving(state: GaussianFit, lambda_star, k_max: int = 30, sigma2: float | None = None):
    """Shrink ``lambda_star - lambda`` by powers of two until REML increases.

    Returns ``(lambda, fit, k, stalled)``; on failure after ``k_max`` halvings
    the original lambda and fit are returned with ``stalled=True``.
    """
    s2 = state.sigma2 if sigma2 is None else sigma2
    lam = state.lam
    delta = np.asarray(lambda_star, dtype=float) - lam
    base = state.reml_at(s2)
    if np.all(np.abs(delta) <= STATIONARY_STEP * lam):
        return lam.copy(), state, 0, False
    for k in range(k_max + 1):
        trial = lam + delta / 2 ** k
        try:
            fit = evaluate(state.problem, trial, s2)
        except linalg.LinalgError:
            continue
        if fit.reml > base:
            return trial, fit, k, False
    return lam.copy(), state, k_max, True


def fit_gaussian(problem: GaussianProblem, options: FitOptions | None = None) -> GaussianFit:
    """Alternate coefficient solves, sigma2 updates and lambda updates."""
    opts = options or FitOptions()
    m = len(problem.penalties)
    lam = np.broadcast_to(np.asarray(opts.lambda_init, dtype=float), (m,)).copy()
    state = evaluate(problem, lam)
    if m == 0:
        state.sigma2 = sigma2_update(state)
        state.reml = state.reml_at(state.sigma2)
        state.converged = True
        return state
    state.sigma2 = sigma2_update(state)
    state.reml = state.reml_at(state.sigma2)
    trajectory = []
    for it in range(1, opts.max_iter + 1):
        s2 = state.sigma2
        proposal = fs_update(state, lambda_cap=opts.lambda_cap, eps_beta=opts.eps_beta)
        ascent = float((proposal - state.lam) @ state.gradient(s2))
        before = state.reml_at(s2)
        if opts.step_control == "halving":
            new_lam, new, k, stalled = step_halving(state, proposal, opts.k_max, s2)
        else:
            new_lam, k, stalled = proposal, 0, False
            new = evaluate(problem, new_lam, s2)
        after = new.reml_at(s2)
        new.sigma2 = sigma2_update(new)
        new.reml = new.reml_at(new.sigma2)
        trajectory.append({
            "iteration": it,
            "lambda": new_lam.tolist(),
            "scale": new.sigma2,
            "reml": new.reml,
            "reml_before_step": before,
            "reml_after_step": after,
            "step_halvings": k,
            "ascent": ascent,
            "stalled": stalled,
        })
        dl = abs(new.reml - state.reml)
        dlog = np.abs(np.log(new_lam) - np.log(state.lam))
        # a parameter drifting to a boundary never settles in log scale;
        # it counts as converged once l_r is flat along its log direction
        flat = np.abs(new_lam * new.gradient(new.sigma2)) < opts.tol_rel * (abs(new.reml) + 0.1)
        dlog = float(np.max(np.where(flat, 0.0, dlog)))
        new.trajectory = trajectory
        state = new
        if stalled:
            state.stalled = True
            state.converged = True
            break
        if dl < opts.tol_rel * (abs(state.reml) + 0.1) and dlog < opts.tol_lambda:
            state.converged = True
            break
    state.trajectory = trajectory
    if not state.converged and opts.raise_on_maxiter:
        raise MaxIterExceeded(f"no convergence in {opts.max_iter} iterations", state)
    return state


def edf_per_coefficient(state: GaussianFit) -> np.ndarray:
    Ainv = state.system.inverse()
    return np.einsum("ij,ji->i", Ainv, state.problem.XtX)


def build_report(design: Design, state: GaussianFit, wall_time: float = 0.0,
                 family: str = "gaussian", link: str = "identity", step_control: str = "halving",
                 edf_diag: np.ndarray | None = None, scale: float | None = None,
                 lam: np.ndarray | None = None, hessian_modes=None,
                 reml: float | None = None) -> FitReport:
    edf = edf_per_coefficient(state) if edf_diag is None else edf_diag
    per_term = {lab: float(edf[sl].sum()) for lab, sl in design.term_slices.items()}
    block_terms = design.block_terms()
    lam = state.lam if lam is None else lam
    return FitReport(
        family=family,
        link=link,
        converged=bool(state.converged),
        iterations=len(state.trajectory),
        coefficients=[{"label": l, "value": float(v)} for l, v in zip(design.column_labels, state.beta)],
        smoothing_parameters=[
            {"block": b.label, "term": t, "value": float(v)}
            for b, t, v in zip(design.penalties.blocks, block_terms, lam)
        ],
        scale=float(state.sigma2 if scale is None else scale),
        edf_total=float(edf.sum()),
        edf_per_term=per_term,
        reml=float(state.reml if reml is None else reml),
        trajectory=state.trajectory,
        message="stalled: no REML increase found by step halving" if state.stalled else "",
        step_control=step_control,
        hessian_modes=list(hessian_modes or []),
        wall_time=wall_time,
    )


def fit(spec: ModelSpec, data: Mapping[str, np.ndarray], opts: FitOptions | None = None,
        design: Design | None = None) -> FitReport:
    """Fit a Gaussian additive model described by ``spec`` to ``data``."""
    opts = opts or FitOptions()
    t0 = time.perf_counter()
    design = design or assemble_design(spec, data)
    y = np.asarray(data[spec.response], dtype=float)
    state = fit_gaussian(GaussianProblem(design.X, y, design.penalties), opts)
    return build_report(design, state, time.perf_counter() - t0, step_control=opts.step_control)
