"""Fellner-Schall smoothing parameter estimation for general likelihoods.

Coefficients maximize ``l(beta) - beta' S_lambda beta / 2`` by safeguarded
Newton. The smoothing parameters follow

    lambda_j <- [tr(S^- S_j) - tr(V S_j)] / (b' S_j b) * lambda_j,

with ``V = (H + S_lambda)^{-1}``, which ignores the dependence of the
log-likelihood Hessian on lambda. ``H`` may be the observed Hessian, the
expected Hessian, or the observed Hessian with small and negative
eigenvalues clamped.

For families with a scale parameter the reported smoothing parameters are
``rho = phi * lambda``, so that ``beta`` depends on ``rho`` alone, matching
the parameterization of :mod:`fellnerschall.gaussian`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import linalg
from .gaussian import STATIONARY_STEP, FitOptions, MaxIterExceeded, _fs_proposal, build_report
from .likelihoods import GlmLikelihood, LikelihoodModel, cox_partial_bundle, glm_loglik_bundle
from .penalties import GradedPenalty, PenalizedSystem, PenaltySet, assemble
from .report import FitReport
from .smooths import Design, ModelSpec, assemble_design

HESSIAN_MODES = ("observed", "expected", "observed_with_pd_repair")


class NewtonDiverged(RuntimeError):
    pass


@dataclass
class GeneralOptions(FitOptions):
    hessian_mode: str = "observed_with_pd_repair"
    newton_max_iter: int = 200
    newton_tol: float = 1e-8
    repair_floor: float = 1e-10
    switch_fraction: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        if self.hessian_mode not in HESSIAN_MODES:
            raise ValueError(f"hessian_mode must be one of {HESSIAN_MODES}")


def _objective(model, S, beta):
    ll = model.loglik(beta)
    return ll - 0.5 * beta @ S @ beta if np.isfinite(ll) else -np.inf


def newton_fit(model: LikelihoodModel, S_lambda, beta0, max_iter: int = 200,
               tol: float = 1e-8, floor: float = 1e-10, history: list | None = None,
               graded: GradedPenalty | None = None):
    """Maximize the penalized log likelihood by Newton's method.

    The penalized Hessian is replaced by :func:`linalg.nearest_pd` when it is
    not positive definite, and steps are halved until the penalized
    objective does not decrease. Returns ``(beta, H, system)`` with ``H`` the
    observed Hessian at the optimum and ``system`` a factorization of
    ``H + S``. Passing the penalty's ``graded`` frame makes the solves
    accurate when smoothing parameters differ by many orders of magnitude.
    """
    S = np.asarray(S_lambda, dtype=float)
    if graded is None:
        p = S.shape[0]
        graded = GradedPenalty(np.eye(p), S, (), 0.0, np.zeros(0))
    beta = np.asarray(beta0, dtype=float).copy()
    obj = _objective(model, S, beta)
    if not np.isfinite(obj):
        beta = np.zeros_like(beta)
        obj = _objective(model, S, beta)
        if not np.isfinite(obj):
            raise NewtonDiverged("penalized objective is not finite at the start")
    if history is not None:
        history.append(obj)
    for _ in range(max_iter):
        g = model.grad(beta) - S @ beta
        H = model.hessian(beta)
        if np.linalg.norm(g) <= tol * (abs(obj) + 1.0):
            break
        step = graded.system(H, repair_floor=floor).solve(g)
        t = 1.0
        for _ in range(60):
            trial = beta + t * step
            new = _objective(model, S, trial)
            if new >= obj:
                break
            t *= 0.5
        else:
            # no ascent left at machine precision
            if np.linalg.norm(g) <= 1e3 * tol * (abs(obj) + 1.0):
                break
            raise NewtonDiverged("step halving failed to increase the penalized objective")
        if new == obj and t < 1e-12:
            break
        beta, obj = trial, new
        if history is not None:
            history.append(obj)
    else:
        g = model.grad(beta) - S @ beta
        if np.linalg.norm(g) > 1e3 * tol * (abs(obj) + 1.0):
            raise NewtonDiverged(f"no convergence in {max_iter} Newton iterations")
    H = model.hessian(beta)
    return beta, H, graded.system(H, repair_floor=floor)


@dataclass
class GeneralFit:
    model: LikelihoodModel
    penalties: PenaltySet
    lam: np.ndarray
    beta: np.ndarray
    hessian: np.ndarray
    system: PenalizedSystem
    quad: np.ndarray
    trace_pinv: np.ndarray
    trace_inv: np.ndarray
    laml: float
    hessian_mode: str
    repaired: bool = False
    trajectory: list = field(default_factory=list)
    converged: bool = False
    stalled: bool = False
    rho: np.ndarray | None = None

    @property
    def edf(self) -> float:
        return float(self.beta.size - self.lam @ self.trace_inv)

    def pql_gradient(self) -> np.ndarray:
        """REML derivative with the ``tr(V dH/dlambda)`` term dropped."""
        return 0.5 * (self.trace_pinv - self.trace_inv - self.quad)

    @property
    def sigma2(self) -> float:
        return self.model.scale

    @property
    def reml(self) -> float:
        return self.laml


def _working_hessian(model, beta, H, mode, floor):
    if mode == "expected":
        E = model.expected_hessian(beta)
        if E is not None:
            return E, False
        mode = "observed_with_pd_repair"
    if mode == "observed":
        return H, False
    vals = np.linalg.eigvalsh(H)
    top = np.max(np.abs(vals)) if vals.size else 0.0
    if vals.size and vals.min() <= floor * top:
        return linalg.nearest_pd(H, floor), True
    return H, False


def general_state(model: LikelihoodModel, pset: PenaltySet, lam, beta0=None,
                  hessian_mode: str = "observed_with_pd_repair", newton_max_iter: int = 200,
                  newton_tol: float = 1e-8, floor: float = 1e-10) -> GeneralFit:
    lam = np.asarray(lam, dtype=float).reshape(-1).copy()
    p = pset.p
    S = assemble(pset, lam) if len(pset) else np.zeros((p, p))
    gp = pset.graded(lam) if len(pset) else GradedPenalty(np.eye(p), S, (), 0.0, np.zeros(0))
    beta0 = np.zeros(p) if beta0 is None else beta0
    beta, H, _ = newton_fit(model, S, beta0, newton_max_iter, newton_tol, floor, graded=gp)
    Hw, repaired = _working_hessian(model, beta, H, hessian_mode, floor)
    system = gp.system(Hw)
    trace_inv = system.block_traces()
    quad = pset.quadratics(beta)
    laml = (model.loglik(beta) - 0.5 * lam @ quad + 0.5 * gp.log_det
            - 0.5 * system.log_det + 0.5 * pset.null_dim * np.log(2 * np.pi))
    return GeneralFit(model, pset, lam, beta, Hw, system, quad, gp.trace_pinv, trace_inv,
                      float(laml), hessian_mode, repaired)


def laml(model: LikelihoodModel, pset: PenaltySet, lam, beta0=None,
         hessian_mode: str = "observed") -> float:
    """Laplace approximate restricted log likelihood.

    ``l(b) - b'S b/2 + log|S|_+/2 - log|H + S|/2 + M log(2 pi)/2`` with ``M``
    the penalty null space dimension. For a Gaussian likelihood this equals
    the exact restricted log likelihood.
    """
    return general_state(model, pset, lam, beta0, hessian_mode).laml


def laml_gradient(model: LikelihoodModel, pset: PenaltySet, lam, full: bool = True,
                  h: float = 1e-5) -> np.ndarray:
    """Derivative of :func:`laml` in lambda (observed Hessian).

    With ``full`` the ``tr(V dH/dlambda_j)`` term is included; ``dH`` is
    obtained by central differences of the Hessian along ``dbeta/dlambda_j``.
    """
    st = general_state(model, pset, lam, hessian_mode="observed")
    g = st.pql_gradient()
    if not full:
        return g
    V = st.system.inverse()
    out = g.copy()
    for j, E in enumerate(pset.embedded):
        db = -V @ (E @ st.beta)
        scale = h / max(np.linalg.norm(db), 1e-300)
        dH = (model.hessian(st.beta + scale * db) - model.hessian(st.beta - scale * db)) / (2 * scale)
        out[j] -= 0.5 * np.sum(V * dH)
    return out


def fs_update_general(state: GeneralFit, pset: PenaltySet | None = None,
                      lambda_cap: float = 1e12, eps_beta: float = 1e-12) -> np.ndarray:
    pset = state.penalties if pset is None else pset
    return _fs_proposal(state.lam, state.trace_pinv, state.trace_inv, state.quad,
                        state.beta, pset, 1.0, lambda_cap, eps_beta)


def fs_update_glm(model: GlmLikelihood, pset: PenaltySet, lam, beta,
                  lambda_cap: float = 1e12, eps_beta: float = 1e-12) -> np.ndarray:
    """GLM form: ``phi [tr(S^- S_j) - tr((X'WX + S)^{-1} S_j)] / (b'S_j b) lambda_j``.

    ``lam`` is in the scale-free parameterization and ``W`` are the IRLS
    weights at ``beta``.
    """
    lam = np.asarray(lam, dtype=float)
    W = model.working_weights(beta)
    gp = pset.graded(lam)
    trace_inv = gp.system(model.X.T @ (W[:, None] * model.X)).block_traces()
    return _fs_proposal(lam, gp.trace_pinv, trace_inv, pset.quadratics(beta),
                        beta, pset, model.scale, lambda_cap, eps_beta)


def _step(model, pset, state, proposal, opts, mode):
    delta = proposal - state.lam
    if np.all(np.abs(delta) <= STATIONARY_STEP * state.lam):
        return state.lam.copy(), state, 0, False
    for k in range(opts.k_max + 1):
        trial = state.lam + delta / 2 ** k
        try:
            new = general_state(model, pset, trial, state.beta, mode,
                                opts.newton_max_iter, opts.newton_tol, opts.repair_floor)
        except (linalg.LinalgError, NewtonDiverged):
            continue
        if new.laml > state.laml:
            return trial, new, k, False
    return state.lam.copy(), state, opts.k_max, True


def fit_general_model(model: LikelihoodModel, pset: PenaltySet,
                      options: GeneralOptions | None = None, beta0=None) -> GeneralFit:
    """Outer iteration for a likelihood model and penalty set.

    The returned state's ``rho`` holds the smoothing parameters in the
    scale-free parameterization (``phi * lambda``); ``lam`` stays internal.
    """
    opts = options or GeneralOptions()
    m = len(pset)
    rho = np.broadcast_to(np.asarray(opts.lambda_init, dtype=float), (m,)).copy()
    mode = opts.hessian_mode
    kw = dict(newton_max_iter=opts.newton_max_iter, newton_tol=opts.newton_tol,
              floor=opts.repair_floor)

    def at(rho, beta):
        return general_state(model, pset, rho / model.scale, beta, mode, **kw)

    model.scale = 1.0
    state = at(rho, beta0)
    if model.has_scale:
        model.scale = model.estimate_scale(state.beta, state.edf)
        state = at(rho, state.beta)
    trajectory = []
    repairs = 0
    for it in range(1, opts.max_iter + 1):
        phi = model.scale
        cap = opts.lambda_cap / phi
        proposal = fs_update_general(state, pset, cap, opts.eps_beta)
        ascent = float((proposal - state.lam) @ state.pql_gradient())
        before = state.laml
        if opts.step_control == "halving":
            lam_new, new, k, stalled = _step(model, pset, state, proposal, opts, mode)
        else:
            lam_new, k, stalled = proposal, 0, False
            new = general_state(model, pset, lam_new, state.beta, mode, **kw)
        after = new.laml
        used_mode = mode
        repairs += int(new.repaired)
        rho_new = lam_new * phi
        if model.has_scale:
            model.scale = model.estimate_scale(new.beta, new.edf)
            new = at(rho_new, new.beta)
        trajectory.append({
            "iteration": it,
            "lambda": rho_new.tolist(),
            "scale": model.scale,
            "reml": new.laml,
            "reml_before_step": before,
            "reml_after_step": after,
            "step_halvings": k,
            "ascent": ascent,
            "stalled": stalled,
            "hessian_mode": used_mode,
            "repaired": bool(new.repaired),
        })
        dl = abs(new.laml - state.laml)
        dlog = np.abs(np.log(rho_new) - np.log(state.lam * phi))
        flat = np.abs(new.lam * new.pql_gradient()) < opts.tol_rel * (abs(new.laml) + 0.1)
        dlog = float(np.max(np.where(flat, 0.0, dlog)))
        state = new
        if (mode == "observed_with_pd_repair" and it >= 2
                and repairs > opts.switch_fraction * it
                and model.expected_hessian(state.beta) is not None):
            mode = "expected"
            state = at(rho_new, state.beta)
        if stalled:
            state.stalled = state.converged = True
            break
        if dl < opts.tol_rel * (abs(state.laml) + 0.1) and dlog < opts.tol_lambda:
            state.converged = True
            break
    state.trajectory = trajectory
    state.rho = state.lam * model.scale
    if not state.converged and opts.raise_on_maxiter:
        raise MaxIterExceeded(f"no convergence in {opts.max_iter} iterations", state)
    return state


def make_model(family: str, X, data: Mapping[str, np.ndarray], response: str, *,
               link: str | None = None, status: str | None = None,
               weights: str | None = None, offset: str | None = None) -> LikelihoodModel:
    y = np.asarray(data[response], dtype=float)
    if family == "cox":
        if status is None:
            raise ValueError("cox family needs a status column")
        return cox_partial_bundle(X, y, np.asarray(data[status]))
    w = None if weights is None else np.asarray(data[weights], dtype=float)
    off = None if offset is None else np.asarray(data[offset], dtype=float)
    return glm_loglik_bundle(family, X, y, offset=off, link=link, weights=w)


def fit_general(spec: ModelSpec, model_kind: str, data: Mapping[str, np.ndarray],
                opts: GeneralOptions | None = None, *, link: str | None = None,
                status: str | None = None, weights: str | None = None,
                offset: str | None = None, design: Design | None = None) -> FitReport:
    """Fit ``spec`` with likelihood ``model_kind`` (a GLM family or ``"cox"``)."""
    opts = opts or GeneralOptions()
    t0 = time.perf_counter()
    design = design or assemble_design(spec, data)
    model = make_model(model_kind, design.X, data, spec.response, link=link, status=status,
                       weights=weights, offset=offset)
    state = fit_general_model(model, design.penalties, opts)
    V = state.system.inverse()
    edf_diag = np.einsum("ij,ji->i", V, state.hessian)
    link_name = "cox-breslow" if model_kind == "cox" else model.link.name
    modes = [t["hessian_mode"] for t in state.trajectory]
    report = build_report(design, state, time.perf_counter() - t0, family=model_kind,
                          link=link_name, step_control=opts.step_control, edf_diag=edf_diag,
                          scale=model.scale, lam=state.rho, hessian_modes=modes,
                          reml=state.laml)
    return report
