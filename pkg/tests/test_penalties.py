import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fellnerschall import linalg
from fellnerschall.penalties import (NonPositiveLambdaError, OutOfRangeError, PenaltyBlock,
                                     PenaltySet, assemble, embed, nullspace_stable)
from fellnerschall.smooths import adaptive_weights, build_adaptive, build_crs, difference_matrix


def adaptive_set(k=40, n_lambda=5):
    D = difference_matrix(k, 2)
    W = adaptive_weights(D.shape[0], n_lambda)
    return PenaltySet(tuple(PenaltyBlock(D.T @ np.diag(W[:, j]) @ D) for j in range(n_lambda)), k)


def test_embed_examples():
    np.testing.assert_array_equal(embed(PenaltyBlock(np.eye(2)), 2), np.eye(2))
    np.testing.assert_array_equal(embed(PenaltyBlock(np.eye(2), 1), 4), np.diag([0, 1, 1, 0.0]))


def test_embed_out_of_range():
    with pytest.raises(OutOfRangeError):
        embed(PenaltyBlock(np.eye(2), 3), 4)


def test_embed_preserves_quadratic_form():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    blk = PenaltyBlock(A @ A.T, 2)
    beta = rng.normal(size=7)
    assert beta @ embed(blk, 7) @ beta == pytest.approx(beta[2:5] @ blk.matrix @ beta[2:5])
    assert blk.quadratic(beta) == pytest.approx(beta[2:5] @ blk.matrix @ beta[2:5])


def test_block_must_be_psd():
    with pytest.raises(linalg.NonPSDError):
        PenaltyBlock(np.diag([1.0, -1.0]))


def test_assemble_examples():
    np.testing.assert_array_equal(assemble(PenaltySet((PenaltyBlock(np.eye(2)),), 2), [2.0]),
                                  2 * np.eye(2))
    ps = PenaltySet((PenaltyBlock(np.eye(1), 0), PenaltyBlock(np.eye(1), 1)), 2)
    np.testing.assert_array_equal(assemble(ps, [1.0, 3.0]), np.diag([1.0, 3.0]))


def test_assemble_overlapping_adaptive_blocks():
    x = np.linspace(0, 1, 100)
    term = build_adaptive(x, k=20, n_lambda=5)
    ps = PenaltySet(tuple(term.blocks), 20)
    lam = np.array([0.5, 2.0, 1.0, 7.0, 0.1])
    oracle = np.zeros((20, 20))
    for l, b in zip(lam, term.blocks):
        oracle = oracle + l * b.matrix
    np.testing.assert_allclose(assemble(ps, lam), oracle, rtol=1e-14, atol=1e-14)


def test_assemble_rejects_nonpositive_lambda():
    ps = PenaltySet((PenaltyBlock(np.eye(2)),), 2)
    with pytest.raises(NonPositiveLambdaError):
        assemble(ps, [0.0])


def test_assemble_derivative_is_block():
    rng = np.random.default_rng(1)
    ps = adaptive_set(12, 3)
    lam = np.exp(rng.normal(size=3))
    for j in range(3):
        h = 1e-6 * lam[j]
        up, dn = lam.copy(), lam.copy()
        up[j] += h
        dn[j] -= h
        fd = (assemble(ps, up) - assemble(ps, dn)) / (2 * h)
        np.testing.assert_allclose(fd, ps.embedded[j], atol=1e-7)


def test_nullspace_stable_crs():
    x = np.linspace(0, 1, 50)
    term = build_crs(x, 10)
    assert nullspace_stable(PenaltySet(tuple(term.blocks), 10))


def test_nullspace_stable_adaptive():
    assert nullspace_stable(adaptive_set())


def test_nullspace_stable_pathological_pair():
    same = PenaltySet((PenaltyBlock(np.diag([1.0, 0.0])), PenaltyBlock(np.diag([1.0, 0.0]))), 2)
    assert nullspace_stable(same)
    # the second block is null, so its lambda drops out of rank(S)
    broken = PenaltySet((PenaltyBlock(np.diag([1.0, 0.0])), PenaltyBlock(np.zeros((2, 2)))), 2)
    assert not nullspace_stable(broken)


def test_penalty_set_ranks():
    ps = adaptive_set()
    assert ps.rank == 38
    assert ps.null_dim == 2


def _eigen_oracle(ps, lam):
    S = assemble(ps, lam)
    val, rank = linalg.log_pseudo_det(S)
    P = linalg.pseudo_inverse(S)
    return val, np.array([np.sum(P * E) for E in ps.embedded])


def test_log_det_and_trace_match_eigen_at_moderate_lambda():
    rng = np.random.default_rng(4)
    ps = adaptive_set(20, 4)
    for _ in range(5):
        lam = np.exp(rng.uniform(-2, 2, size=4))
        val, tr = _eigen_oracle(ps, lam)
        assert ps.log_det(lam) == pytest.approx(val, rel=1e-9)
        np.testing.assert_allclose(ps.trace_pinv(lam), tr, rtol=1e-7)


# log|S|_+ and tr(S^- S_j) at widely spread smoothing parameters, computed with
# 80-digit arithmetic on the exactly assembled blocks
EXTREME = [
    ([0, -20, 0, 0, 27.6], 319.790137473598,
     [6.666572675216175, 29.926071412954535, 16.24168115715804, 2.0917461090737763,
      1.340959470035002e-11]),
    ([1.8, -42, -0.34, 3.38, 27.6], 349.4778413904841,
     [1.5416371683668064, 14.726774490270246, 9.285180667893437, 0.30863073319170986,
      1.340959465133192e-11]),
    ([2, -5, 1, 3, 8], 108.88609287679259,
     [1.076003190567362, 6.802834260671818, 4.112805860575884, 0.3860677381115641,
      0.0037133605137078425]),
]


@pytest.mark.parametrize("log_lam,log_det,trace", EXTREME)
def test_graded_factorization_extreme_lambda(log_lam, log_det, trace):
    ps = adaptive_set()
    lam = np.exp(np.array(log_lam, dtype=float))
    assert ps.log_det(lam) == pytest.approx(log_det, rel=1e-10)
    np.testing.assert_allclose(ps.trace_pinv(lam), trace, rtol=1e-8)


def test_graded_system_solves():
    rng = np.random.default_rng(5)
    ps = adaptive_set(15, 3)
    lam = np.array([1e-3, 10.0, 2.0])
    X = rng.normal(size=(60, 15))
    C = X.T @ X
    A = C + assemble(ps, lam)
    system = ps.graded(lam).system(C)
    b = rng.normal(size=15)
    np.testing.assert_allclose(system.solve(b), np.linalg.solve(A, b), rtol=1e-8)
    assert system.log_det == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-10)
    Ainv = np.linalg.inv(A)
    np.testing.assert_allclose(system.block_traces(),
                               [np.sum(Ainv * E) for E in ps.embedded], rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_pinv_penrose(seed):
    rng = np.random.default_rng(seed)
    ps = adaptive_set(int(rng.integers(6, 15)), int(rng.integers(1, 4)))
    lam = np.exp(rng.uniform(-3, 3, size=len(ps)))
    S = assemble(ps, lam)
    P = ps.pinv(lam)
    scale = np.linalg.norm(S)
    np.testing.assert_allclose(S @ P @ S, S, atol=1e-8 * scale)
    np.testing.assert_allclose(P @ S @ P, P, atol=1e-8 * np.linalg.norm(P))
