"""Spline bases, their penalties, and model matrix assembly.

Term types:

* ``pspline``: B-splines on equally spaced knots with a difference penalty.
* ``adaptive``: the same basis with the difference penalty split into
  overlapping, locally weighted blocks, one smoothing parameter per block.
* ``crs``: cubic regression spline parameterized by its values at knots
  placed on quantiles of the covariate, penalized by the integrated
  squared second derivative.
* ``tensor``: row-wise Kronecker product of two marginal bases, with one
  penalty per margin.
* ``randeffect``: i.i.d. Gaussian random effect for a grouping factor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.interpolate import BSpline

from .penalties import PenaltyBlock, PenaltySet

KINDS = ("crs", "pspline", "adaptive", "tensor", "randeffect")
TENSOR_CAP = 1024


class SmoothError(ValueError):
    pass


class InsufficientBasisError(SmoothError):
    pass


class DegenerateCovariateError(SmoothError):
    pass


class DuplicateKnotsError(SmoothError):
    pass


class DimensionOverflowError(SmoothError):
    pass


class SingleLevelError(SmoothError):
    pass


class MissingCovariateError(KeyError):
    pass


class NonFiniteDataError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothTerm:
    """Specification of one smooth term.

    For ``tensor`` terms ``covariates`` holds the two margin covariates and
    ``margin`` the marginal basis kind (``pspline`` or ``crs``); ``k`` is
    the per-margin basis size.
    """

    kind: str
    covariates: tuple[str, ...]
    k: int = 10
    degree: int = 3
    penalty_order: int = 2
    n_lambda: int = 1
    margin: str = "pspline"
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SmoothError(f"unknown smooth kind {self.kind!r}")
        covs = (self.covariates,) if isinstance(self.covariates, str) else tuple(self.covariates)
        object.__setattr__(self, "covariates", covs)
        want = 2 if self.kind == "tensor" else 1
        if len(covs) != want:
            raise SmoothError(f"{self.kind} term needs {want} covariate(s), got {len(covs)}")
        if not self.label:
            object.__setattr__(self, "label", f"s({','.join(covs)})")


@dataclass
class TermRealization:
    """Evaluated basis columns and penalty blocks for one term.

    Block offsets are relative to the term's first column. ``basis`` maps a
    list of covariate arrays to uncentered columns, and ``transform`` (when
    set) is the identifiability reparameterization applied afterwards.
    """

    columns: np.ndarray
    blocks: list[PenaltyBlock]
    centering: str = "none"
    knots: np.ndarray | None = None
    basis: Callable[[Sequence[np.ndarray]], np.ndarray] | None = None
    transform: np.ndarray | None = None
    null_dim: int = 0
    label: str = ""

    @property
    def k(self) -> int:
        return self.columns.shape[1]

    def evaluate(self, covariates: Sequence[np.ndarray]) -> np.ndarray:
        if self.basis is None:
            raise SmoothError(f"term {self.label!r} cannot be evaluated at new data")
        B = self.basis(covariates)
        return B if self.transform is None else B @ self.transform


def _covariate(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise NonFiniteDataError("covariate contains non-finite values")
    return x


def difference_matrix(k: int, order: int) -> np.ndarray:
    """``(k - order) x k`` matrix of order-``order`` differences."""
    return np.diff(np.eye(k), n=order, axis=0)


def bspline_design(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    lo, hi = knots[degree], knots[-degree - 1]
    xc = np.clip(x, lo, hi)
    return BSpline.design_matrix(xc, knots, degree).toarray()


def _uniform_knots(lo: float, hi: float, k: int, degree: int) -> np.ndarray:
    dx = (hi - lo) / (k - degree)
    return lo + dx * np.arange(-degree, k + 1)


def _pspline_setup(x, k, degree, pen_order):
    x = _covariate(x)
    if pen_order not in (1, 2, 3):
        raise SmoothError(f"penalty order must be 1, 2 or 3, got {pen_order}")
    if k <= degree + 1 or k < pen_order + 2:
        raise InsufficientBasisError(f"k={k} too small for degree {degree}, order {pen_order}")
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        raise DegenerateCovariateError("covariate has zero range")
    knots = _uniform_knots(lo, hi, k, degree)

    def basis(covs, knots=knots, degree=degree):
        return bspline_design(_covariate(covs[0]), knots, degree)

    return basis([x]), knots, basis


def build_pspline(x, k: int = 10, degree: int = 3, pen_order: int = 2,
                  label: str = "") -> TermRealization:
    """B-spline basis with a difference penalty ``D'D``."""
    X, knots, basis = _pspline_setup(x, k, degree, pen_order)
    D = difference_matrix(k, pen_order)
    return TermRealization(X, [PenaltyBlock(D.T @ D, 0, label)], knots=knots,
                           basis=basis, null_dim=pen_order, label=label)


def adaptive_weights(m: int, n_lambda: int) -> np.ndarray:
    """``m x n_lambda`` partition-of-unity weights at equally spaced points.

    Columns are B-splines of degree ``min(2, n_lambda - 1)`` on uniform knots
    over ``[0, 1]``, evaluated at the ``m`` difference locations.
    """
    if n_lambda == 1:
        return np.ones((m, 1))
    deg = min(2, n_lambda - 1)
    s = np.linspace(0.0, 1.0, m)
    knots = _uniform_knots(0.0, 1.0, n_lambda, deg)
    return bspline_design(s, knots, deg)


def build_adaptive(x, k: int = 40, pen_order: int = 2, n_lambda: int = 5,
                   degree: int = 3, label: str = "") -> TermRealization:
    """B-spline basis with ``n_lambda`` overlapping weighted difference penalties.

    Block ``j`` is ``D' diag(w_j) D`` where ``w_j`` is the j-th weight
    column from :func:`adaptive_weights`. The weights sum to one at every
    difference, so the blocks sum to ``D'D``.
    """
    if n_lambda < 1:
        raise SmoothError("n_lambda must be positive")
    if k < n_lambda + pen_order:
        raise InsufficientBasisError(f"k={k} < n_lambda + pen_order = {n_lambda + pen_order}")
    X, knots, basis = _pspline_setup(x, k, degree, pen_order)
    D = difference_matrix(k, pen_order)
    W = adaptive_weights(D.shape[0], n_lambda)
    blocks = []
    for j in range(n_lambda):
        Sj = D.T @ (W[:, j:j + 1] * D)
        blocks.append(PenaltyBlock(Sj, 0, f"{label}[{j}]" if n_lambda > 1 else label))
    return TermRealization(X, blocks, knots=knots, basis=basis, null_dim=pen_order, label=label)


def _crs_matrices(knots: np.ndarray):
    h = np.diff(knots)
    k = knots.size
    D = np.zeros((k - 2, k))
    B = np.zeros((k - 2, k - 2))
    for i in range(k - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        B[i, i] = (h[i] + h[i + 1]) / 3.0
        if i < k - 3:
            B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
    return D, B


def crs_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Cubic regression spline basis: column ``i`` is the natural cubic
    interpolant of the i-th unit vector at ``knots``. Linear beyond the ends."""
    x = np.asarray(x, dtype=float)
    k = knots.size
    D, B = _crs_matrices(knots)
    F = np.zeros((k, k))
    F[1:-1] = np.linalg.solve(B, D)
    h = np.diff(knots)
    X = np.zeros((x.size, k))

    inside = (x >= knots[0]) & (x <= knots[-1])
    xi = x[inside]
    j = np.clip(np.searchsorted(knots, xi, side="right") - 1, 0, k - 2)
    hj = h[j]
    am = (knots[j + 1] - xi) / hj
    ap = (xi - knots[j]) / hj
    cm = ((knots[j + 1] - xi) ** 3 / hj - hj * (knots[j + 1] - xi)) / 6.0
    cp = ((xi - knots[j]) ** 3 / hj - hj * (xi - knots[j])) / 6.0
    rows = np.flatnonzero(inside)
    Xi = cm[:, None] * F[j] + cp[:, None] * F[j + 1]
    Xi[np.arange(xi.size), j] += am
    Xi[np.arange(xi.size), j + 1] += ap
    X[rows] = Xi

    # linear extrapolation using the end slopes
    for side, mask in (("lo", x < knots[0]), ("hi", x > knots[-1])):
        if not mask.any():
            continue
        if side == "lo":
            slope = -np.eye(k)[0] / h[0] + np.eye(k)[1] / h[0] - h[0] * F[1] / 6.0 - h[0] * F[0] / 3.0
            X[mask] = np.eye(k)[0] + (x[mask] - knots[0])[:, None] * slope
        else:
            slope = (np.eye(k)[-1] - np.eye(k)[-2]) / h[-1] + h[-1] * F[-2] / 6.0 + h[-1] * F[-1] / 3.0
            X[mask] = np.eye(k)[-1] + (x[mask] - knots[-1])[:, None] * slope
    return X


def build_crs(x, k: int = 10, label: str = "") -> TermRealization:
    """Cubic regression spline with knots at quantiles of the unique covariate values."""
    x = _covariate(x)
    if k < 3:
        raise InsufficientBasisError(f"cubic regression spline needs k >= 3, got {k}")
    ux = np.unique(x)
    if ux.size < 2:
        raise DegenerateCovariateError("covariate has zero range")
    if ux.size < k:
        raise DuplicateKnotsError(f"only {ux.size} distinct covariate values for k={k} knots")
    knots = np.quantile(ux, np.linspace(0.0, 1.0, k))
    if np.any(np.diff(knots) <= 0):
        raise DuplicateKnotsError("quantile knots coincide")
    D, B = _crs_matrices(knots)
    S = D.T @ np.linalg.solve(B, D)

    def basis(covs, knots=knots):
        return crs_basis(_covariate(covs[0]), knots)

    return TermRealization(basis([x]), [PenaltyBlock(S, 0, label)], knots=knots,
                           basis=basis, null_dim=2, label=label)


def build_tensor(margins: Sequence[TermRealization], cap: int = TENSOR_CAP,
                 label: str = "") -> TermRealization:
    """Tensor product of two singly penalized marginal bases.

    Coefficient ``(i, j)`` sits at index ``i * k_z + j``. The penalties are
    ``S_x kron I`` and ``I kron S_z``.
    """
    if len(margins) != 2:
        raise SmoothError("tensor terms take exactly 2 margins")
    mx, mz = margins
    if len(mx.blocks) != 1 or len(mz.blocks) != 1:
        raise SmoothError("tensor margins must carry exactly one penalty")
    kx, kz = mx.k, mz.k
    if kx * kz > cap:
        raise DimensionOverflowError(f"tensor dimension {kx}*{kz} exceeds cap {cap}")
    if mx.columns.shape[0] != mz.columns.shape[0]:
        raise SmoothError("margins evaluated at different numbers of rows")

    def rowwise(A, B):
        return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)

    X = rowwise(mx.columns, mz.columns)
    Sx = np.kron(mx.blocks[0].matrix, np.eye(kz))
    Sz = np.kron(np.eye(kx), mz.blocks[0].matrix)
    blocks = [PenaltyBlock(Sx, 0, f"{label}[0]"), PenaltyBlock(Sz, 0, f"{label}[1]")]

    basis = None
    if mx.basis is not None and mz.basis is not None:
        def basis(covs, mx=mx, mz=mz):
            return rowwise(mx.basis([covs[0]]), mz.basis([covs[1]]))

    return TermRealization(X, blocks, basis=basis, null_dim=mx.null_dim * mz.null_dim,
                           label=label)


def build_randeffect(levels, label: str = "") -> TermRealization:
    """Indicator columns for a grouping factor with an identity penalty."""
    levels = np.asarray(levels).reshape(-1)
    uniq = np.unique(levels)
    if uniq.size < 2:
        raise SingleLevelError("random effect needs at least 2 levels")

    def basis(covs, uniq=uniq):
        lv = np.asarray(covs[0]).reshape(-1)
        return (lv[:, None] == uniq[None, :]).astype(float)

    return TermRealization(basis([levels]), [PenaltyBlock(np.eye(uniq.size), 0, label)],
                           knots=None, basis=basis, null_dim=0, label=label)


def realize(term: SmoothTerm, data: Mapping[str, np.ndarray]) -> TermRealization:
    covs = [data[c] for c in term.covariates]
    if term.kind == "pspline":
        return build_pspline(covs[0], term.k, term.degree, term.penalty_order, term.label)
    if term.kind == "adaptive":
        return build_adaptive(covs[0], term.k, term.penalty_order, term.n_lambda,
                              term.degree, term.label)
    if term.kind == "crs":
        return build_crs(covs[0], term.k, term.label)
    if term.kind == "randeffect":
        return build_randeffect(covs[0], term.label)
    margins = []
    for x in covs:
        if term.margin == "crs":
            margins.append(build_crs(x, term.k))
        else:
            margins.append(build_pspline(x, term.k, term.degree, term.penalty_order))
    return build_tensor(margins, label=term.label)


def sum_to_zero(term: TermRealization) -> TermRealization:
    """Absorb the constraint ``1'X gamma = 0`` by a QR-based reparameterization.

    The new coefficients are ``gamma = Z delta`` with ``Z`` the last ``k - 1``
    columns of the complete Q factor of ``X'1``. Penalties become ``Z'SZ``.
    """
    C = term.columns.sum(axis=0)[:, None]
    Q, _ = np.linalg.qr(C, mode="complete")
    Z = Q[:, 1:]
    blocks = [PenaltyBlock(Z.T @ b.matrix @ Z, 0, b.label) for b in term.blocks]
    return TermRealization(
        term.columns @ Z, blocks,
        centering="sum-to-zero: QR of X'1, first column dropped",
        knots=term.knots, basis=term.basis, transform=Z,
        null_dim=max(term.null_dim - 1, 0), label=term.label,
    )


@dataclass(frozen=True)
class ModelSpec:
    """Parametric columns plus smooth terms.

    ``center`` applies sum-to-zero constraints to every smooth term except
    random effects; it should stay on whenever the constant is already in the
    model, either through ``intercept`` or implicitly (Cox regression).
    """

    response: str | None = None
    parametric: tuple[str, ...] = ()
    smooths: tuple[SmoothTerm, ...] = ()
    intercept: bool = True
    center: bool = True

    def __post_init__(self):
        object.__setattr__(self, "parametric", tuple(self.parametric))
        object.__setattr__(self, "smooths", tuple(self.smooths))


@dataclass
class Design:
    X: np.ndarray
    penalties: PenaltySet
    column_labels: list[str]
    term_slices: dict[str, slice] = field(default_factory=dict)
    terms: list[TermRealization] = field(default_factory=list)
    spec: ModelSpec | None = None

    def __iter__(self) -> Iterator:
        yield self.X
        yield self.penalties

    def block_terms(self) -> list[str]:
        """Label of the term owning each penalty block."""
        out = []
        for t in self.terms:
            out += [t.label] * len(t.blocks)
        return out

    def predict_matrix(self, data: Mapping[str, np.ndarray]) -> np.ndarray:
        spec = self.spec
        cols = []
        n = None
        for name in spec.parametric:
            v = _column(data, name)
            n = v.size
            cols.append(v[:, None])
        for term, st in zip(self.terms, spec.smooths):
            covs = [_column(data, c) if st.kind != "randeffect" else _raw(data, c)
                    for c in st.covariates]
            n = len(covs[0])
            cols.append(term.evaluate(covs))
        if spec.intercept:
            cols.insert(0, np.ones((n, 1)))
        return np.hstack(cols)


def _raw(data, name):
    if name not in data:
        raise MissingCovariateError(name)
    return np.asarray(data[name]).reshape(-1)


def _column(data, name):
    v = _raw(data, name)
    try:
        v = v.astype(float)
    except (TypeError, ValueError):
        raise NonFiniteDataError(f"column {name!r} is not numeric") from None
    if not np.all(np.isfinite(v)):
        raise NonFiniteDataError(f"column {name!r} contains non-finite values")
    return v


def assemble_design(spec: ModelSpec, data: Mapping[str, np.ndarray]) -> Design:
    """Build the model matrix and penalty set for ``spec``.

    Columns are ordered: intercept, parametric covariates, then each smooth
    term. Unpacks as ``X, penalties = assemble_design(spec, data)``.
    """
    cols, labels = [], []
    n = None
    if spec.response is not None:
        n = _column(data, spec.response).size
    for name in spec.parametric:
        v = _column(data, name)
        cols.append(v[:, None])
        labels.append(name)
        n = v.size
    terms, blocks, slices = [], [], {}
    offset = len(cols) + int(spec.intercept)
    for st in spec.smooths:
        for c in st.covariates:
            v = _raw(data, c) if st.kind == "randeffect" else _column(data, c)
            n = v.size if n is None else n
            if v.size != n:
                raise NonFiniteDataError(f"column {c!r} has {v.size} rows, expected {n}")
        term = realize(st, data)
        if spec.center and st.kind != "randeffect":
            term = sum_to_zero(term)
        terms.append(term)
        slices[st.label] = slice(offset, offset + term.k)
        blocks += [b.shifted(offset) for b in term.blocks]
        cols.append(term.columns)
        labels += [f"{st.label}.{i + 1}" for i in range(term.k)]
        offset += term.k
    if n is None:
        raise MissingCovariateError("model has no columns and no response")
    if spec.intercept:
        cols.insert(0, np.ones((n, 1)))
        labels.insert(0, "(Intercept)")
    X = np.hstack(cols) if cols else np.zeros((n, 0))
    if X.shape[1] > n:
        warnings.warn(f"more coefficients ({X.shape[1]}) than observations ({n})", stacklevel=2)
    pset = PenaltySet(tuple(blocks), X.shape[1])
    return Design(X, pset, labels, slices, terms, spec)
