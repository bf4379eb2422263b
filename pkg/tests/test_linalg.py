import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fellnerschall import linalg
from fellnerschall.penalties import PenaltyBlock


def test_log_pseudo_det_identity():
    assert linalg.log_pseudo_det(np.eye(3)) == (0.0, 3)


def test_log_pseudo_det_rank_one_diagonal():
    val, rank = linalg.log_pseudo_det(np.diag([2.0, 0.0]))
    assert rank == 1
    assert val == pytest.approx(np.log(2.0), abs=1e-15)


def test_log_pseudo_det_gram_matrix():
    A = np.random.default_rng(0).normal(size=(4, 3))
    val, rank = linalg.log_pseudo_det(A.T @ A)
    # log det(A'A) from a 50-digit determinant
    assert rank == 3
    assert val == pytest.approx(-0.73713907513808610155, abs=1e-10)


def test_log_pseudo_det_errors():
    with pytest.raises(linalg.NonPSDError):
        linalg.log_pseudo_det(np.diag([1.0, -1.0]))
    with pytest.raises(linalg.AllZeroError):
        linalg.log_pseudo_det(np.zeros((2, 2)))


def test_log_pseudo_det_reads_upper_triangle():
    S = np.array([[2.0, 1.0], [5.0, 2.0]])
    assert linalg.log_pseudo_det(S)[0] == pytest.approx(np.log(3.0))


def test_pseudo_inverse_small_cases():
    np.testing.assert_allclose(linalg.pseudo_inverse(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(linalg.pseudo_inverse(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))


def test_pseudo_inverse_penrose_conditions():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 5))
    S = A.T @ A
    P = linalg.pseudo_inverse(S)
    np.testing.assert_allclose(S @ P @ S, S, atol=1e-9)
    np.testing.assert_allclose(P @ S @ P, P, atol=1e-9)
    np.testing.assert_allclose((S @ P).T, S @ P, atol=1e-9)
    np.testing.assert_allclose((P @ S).T, P @ S, atol=1e-9)


def _trace(A, block, offset):
    return linalg.trace_inv_times(linalg.cholesky(A), PenaltyBlock(block, offset))


def test_trace_inv_times_small_cases():
    assert _trace(np.eye(4), np.eye(4), 0) == pytest.approx(4.0)
    assert _trace(2 * np.eye(2), np.eye(2), 0) == pytest.approx(1.0)


def test_trace_inv_times_against_high_precision_inverse():
    rng = np.random.default_rng(1)
    B = rng.normal(size=(6, 6))
    A = B @ B.T + 6 * np.eye(6)
    Sj = rng.normal(size=(2, 2))
    Sj = Sj @ Sj.T
    assert _trace(A, Sj, 2) == pytest.approx(0.44108844718479464231, abs=1e-10)


def test_trace_inv_times_rejects_bad_offset():
    with pytest.raises(ValueError):
        _trace(np.eye(3), np.eye(2), 2)


def test_cholesky_not_pd():
    with pytest.raises(linalg.NotPDError):
        linalg.cholesky(np.diag([1.0, -1.0]))
    assert not linalg.is_pd(np.diag([1.0, 0.0]))


def test_nearest_pd_cases():
    np.testing.assert_array_equal(linalg.nearest_pd(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(linalg.nearest_pd(np.diag([1.0, -1.0]), 1e-6), np.diag([1.0, 1e-6]))


def test_nearest_pd_indefinite():
    rng = np.random.default_rng(7)
    B = rng.normal(size=(4, 4))
    H = B + B.T
    assert np.linalg.eigvalsh(H).min() < 0
    floor = 1e-6
    out = linalg.nearest_pd(H, floor)
    e = np.linalg.eigvalsh(out)
    assert e.min() >= floor * np.abs(e).max() * (1 - 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_log_pseudo_det_scaling(seed, c):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(2, 7))
    r = int(rng.integers(1, p + 1))
    A = rng.normal(size=(r, p))
    S = A.T @ A
    v, k = linalg.log_pseudo_det(S)
    vc, kc = linalg.log_pseudo_det(c * S)
    assert kc == k
    assert vc == pytest.approx(v + k * np.log(c), abs=1e-7 * (1 + abs(v)))
