"""Dense symmetric linear algebra used by the smoothing parameter updates.

Everything here works on small dense ``numpy`` arrays. Eigen-decompositions
go through :func:`numpy.linalg.eigh` and factorizations through
:func:`scipy.linalg.cho_factor`, so results are deterministic for a given
input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

RANK_TOL = 1e-7


class LinalgError(ValueError):
    """Base class for numerical failures in this module."""


class NonPSDError(LinalgError):
    pass


class AllZeroError(LinalgError):
    pass


class NotPDError(LinalgError):
    """Raised when a Cholesky factorization is requested for a non-PD matrix."""


class SingularFactorError(LinalgError):
    pass


@dataclass(frozen=True)
class EigenSystem:
    """Eigen-decomposition with eigenvalues sorted in descending order."""

    values: np.ndarray
    vectors: np.ndarray
    rank: int

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def symmetrize(S: np.ndarray) -> np.ndarray:
    """Return ``S`` with the upper triangle copied onto the lower one."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    upper = np.triu(S)
    return upper + np.triu(S, 1).T


def eigen_system(S: np.ndarray, rank_tol: float = RANK_TOL) -> EigenSystem:
    S = symmetrize(S)
    values, vectors = np.linalg.eigh(S)
    order = np.argsort(values)[::-1]
    values, vectors = values[order], vectors[:, order]
    top = values[0] if values.size else 0.0
    rank = int(np.sum(values > rank_tol * top)) if top > 0 else 0
    return EigenSystem(values, vectors, rank)


def _checked_eigen(S, rank_tol):
    es = eigen_system(S, rank_tol)
    top = es.values[0] if es.values.size else 0.0
    if top <= 0 or es.rank == 0:
        if es.values.size and es.values[-1] < -rank_tol * max(abs(top), abs(es.values[-1])):
            raise NonPSDError("matrix has negative eigenvalues and no positive ones")
        raise AllZeroError("every eigenvalue is below the rank threshold")
    if es.values[-1] < -rank_tol * top:
        raise NonPSDError(
            f"eigenvalue {es.values[-1]:.3e} below -{rank_tol:g} * {top:.3e}"
        )
    return es


def log_pseudo_det(S: np.ndarray, rank_tol: float = RANK_TOL) -> tuple[float, int]:
    """Log of the product of the non-zero eigenvalues of a PSD matrix.

    Parameters
    ----------
    S : numpy.ndarray, shape (n, n)
        Symmetric positive semi-definite matrix. Only the upper triangle is read.
    rank_tol : float
        Eigenvalues at or below ``rank_tol * max(eigenvalue)`` count as zero.

    Returns
    -------
    value : float
        Sum of the logs of the retained eigenvalues.
    rank : int
        Number of retained eigenvalues.

    Raises
    ------
    NonPSDError
        If an eigenvalue is below ``-rank_tol * max(eigenvalue)``.
    AllZeroError
        If no eigenvalue exceeds the threshold.
    """
    es = _checked_eigen(S, rank_tol)
    kept = es.values[: es.rank]
    return float(np.sum(np.log(kept))), es.rank


def pseudo_inverse(S: np.ndarray, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a symmetric PSD matrix."""
    try:
        es = _checked_eigen(S, rank_tol)
    except AllZeroError:
        return np.zeros_like(symmetrize(S))
    V = es.vectors[:, : es.rank]
    out = (V / es.values[: es.rank]) @ V.T
    return 0.5 * (out + out.T)


def cholesky(A: np.ndarray) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor in ``scipy.linalg.cho_factor`` form.

    Raises :class:`NotPDError` if ``A`` is not numerically positive definite.
    """
    A = symmetrize(A)
    if not np.all(np.isfinite(A)):
        raise NotPDError("matrix has non-finite entries")
    try:
        c, lower = sla.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise NotPDError(str(err)) from None
    return c, lower


def chol_logdet(chol) -> float:
    c, _ = chol
    return float(2.0 * np.sum(np.log(np.diag(c))))


def chol_solve(chol, b: np.ndarray) -> np.ndarray:
    return sla.cho_solve(chol, b, check_finite=False)


def chol_inverse(chol) -> np.ndarray:
    c, _ = chol
    inv = chol_solve(chol, np.eye(c.shape[0]))
    return 0.5 * (inv + inv.T)


def trace_inv_times(chol, Sj) -> float:
    """``tr(A^{-1} S_j)`` from a Cholesky factor of ``A``.

    ``Sj`` is a penalty block: an object with ``matrix`` (q x q) and ``offset``
    attributes. Only the q columns of ``A^{-1}`` the block touches are solved
    for, so the cost is O(p^2 q) and ``A^{-1}`` is never formed.
    """
    c, _ = chol
    d = np.diag(c)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise SingularFactorError("Cholesky factor has a non-positive diagonal")
    p = c.shape[0]
    block = np.asarray(Sj.matrix, dtype=float)
    q = block.shape[0]
    lo = int(Sj.offset)
    if lo < 0 or lo + q > p:
        raise ValueError(f"block at offset {lo} with size {q} exceeds dimension {p}")
    E = np.zeros((p, q))
    E[lo:lo + q] = np.eye(q)
    cols = chol_solve(chol, E)[lo:lo + q]
    return float(np.sum(cols * block))


def nearest_pd(H: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Clamp small or negative eigenvalues of ``H`` up to ``floor * max|e|``.

    Eigenvectors are kept. A matrix that is already PD with its smallest
    eigenvalue above the floor is returned unchanged.
    """
    H = symmetrize(H)
    values, vectors = np.linalg.eigh(H)
    scale = np.max(np.abs(values)) if values.size else 0.0
    if scale == 0.0:
        return np.eye(H.shape[0]) * floor
    thresh = floor * scale
    if values.min() >= thresh:
        return H
    clamped = np.maximum(values, thresh)
    out = (vectors * clamped) @ vectors.T
    return 0.5 * (out + out.T)


def is_pd(A: np.ndarray) -> bool:
    try:
        cholesky(A)
    except NotPDError:
        return False
    return True
