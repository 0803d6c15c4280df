import numpy as np
import pytest
import scipy.sparse as sparse
from hypothesis import given, strategies as st

from tslod.numerics import (NotSPDError, RankDeficientError, SaddlePointSolver, dependent_rows, orthonormalize,
                            solve_least_squares, solve_saddle_point, solve_spd_sparse)

seeds = st.integers(0, 2 ** 31 - 1)


def random_spd(rng, n, density=0.3):
    M = sparse.random(n, n, density=density, random_state=rng) + sparse.identity(n)
    return (M.T @ M + sparse.identity(n)).tocsc()


def test_spd_identity():
    b = np.arange(5.0)
    assert np.array_equal(solve_spd_sparse(sparse.identity(5), b), b)


def test_spd_diagonal():
    x = solve_spd_sparse(sparse.diags([2.0, 4.0]), [2.0, 8.0])
    assert np.allclose(x, [1.0, 2.0], atol=1e-15)


@given(seeds)
def test_spd_residual(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((20, 20))
    A = sparse.csc_matrix(M.T @ M + np.eye(20))
    b = rng.standard_normal(20)
    x = solve_spd_sparse(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_spd_rejects_indefinite():
    with pytest.raises(NotSPDError):
        solve_spd_sparse(sparse.diags([1.0, -1.0]), [1.0, 1.0])
    A = sparse.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotSPDError):
        solve_spd_sparse(A, [1.0, 1.0])


def test_spd_rejects_nonsymmetric():
    with pytest.raises(NotSPDError):
        solve_spd_sparse(sparse.csc_matrix(np.array([[2.0, 1.0], [0.0, 2.0]])), [1.0, 1.0])


def test_saddle_hand_example():
    x, lam = solve_saddle_point(sparse.identity(2), sparse.csr_matrix([[1.0, 0.0]]), np.array([1.0, 1.0]))
    assert np.allclose(x, [0.0, 1.0], atol=1e-15)
    assert np.allclose(lam, [1.0], atol=1e-15)


def test_saddle_without_constraints():
    rng = np.random.default_rng(3)
    A = random_spd(rng, 15)
    b = rng.standard_normal(15)
    x, lam = solve_saddle_point(A, sparse.csr_matrix((0, 15)), b)
    assert lam.shape == (0,)
    assert np.allclose(x, solve_spd_sparse(A, b), rtol=1e-12)


@given(seeds, st.sampled_from(['rcm', 'natural']))
def test_saddle_residual(seed, ordering):
    rng = np.random.default_rng(seed)
    n, m = 40, 6
    A = random_spd(rng, n, 0.1)
    C = sparse.csr_matrix(rng.standard_normal((m, n)))
    b = rng.standard_normal((n, 3))
    x, lam = SaddlePointSolver(A, C, ordering=ordering).solve(b, return_multiplier=True)
    assert np.abs(C @ x).max() <= 1e-10 * np.abs(b).max()
    assert np.linalg.norm(A @ x + C.T @ lam - b) <= 1e-10 * np.linalg.norm(b)


def test_saddle_rank_deficient_rows_reported():
    rng = np.random.default_rng(0)
    C = rng.standard_normal((3, 10))
    C = np.vstack([C, C[0] + C[1]])
    with pytest.raises(RankDeficientError) as info:
        solve_saddle_point(sparse.identity(10), sparse.csr_matrix(C), np.ones(10))
    assert len(info.value.rows) == 1
    assert dependent_rows(C) == info.value.rows


def test_saddle_rejects_indefinite_block():
    A = sparse.diags([1.0, -1.0, 1.0])
    with pytest.raises(NotSPDError):
        solve_saddle_point(A, sparse.csr_matrix([[0.0, 0.0, 1.0]]), np.ones(3))


def test_orthonormalize_single_vector():
    v = np.array([3.0, 4.0])
    Q, kept = orthonormalize([v])
    assert kept == [0]
    assert np.allclose(Q[:, 0], v / 5.0)


def test_orthonormalize_drops_duplicate():
    v = np.array([1.0, 2.0, 3.0])
    Q, kept = orthonormalize([v, 2 * v])
    assert Q.shape == (3, 1) and kept == [0]


def test_orthonormalize_random_gram():
    V = np.random.default_rng(5).standard_normal((30, 10))
    Q, kept = orthonormalize(V)
    assert len(kept) == 10
    assert np.abs(Q.T @ Q - np.eye(10)).max() <= 1e-10


@given(seeds, st.integers(1, 12), st.booleans())
def test_orthonormalize_properties(seed, k, weighted):
    rng = np.random.default_rng(seed)
    n = 25
    W = random_spd(rng, n).toarray() if weighted else np.eye(n)
    V = rng.standard_normal((n, k))
    # add dependent copies
    V = np.hstack([V, V[:, :2] @ rng.standard_normal((min(2, k), 2))]) if k >= 2 else V
    Q, kept = orthonormalize(V, product=W if weighted else None)
    assert np.abs(Q.T @ W @ Q - np.eye(Q.shape[1])).max() <= 1e-8
    # every input is reproduced by its expansion in the new basis
    coeff = Q.T @ W @ V
    assert np.linalg.norm(Q @ coeff - V) <= 1e-8 * np.linalg.norm(V)
    assert Q.shape[1] == min(k, n)


def test_orthonormalize_extends_basis():
    rng = np.random.default_rng(2)
    B, _ = orthonormalize(rng.standard_normal((12, 3)))
    Q, kept = orthonormalize(np.hstack([B[:, :1], rng.standard_normal((12, 2))]), basis=B)
    assert kept == [1, 2]
    assert np.array_equal(Q[:, :3], B)
    assert np.abs(Q.T @ Q - np.eye(5)).max() <= 1e-12


def test_least_squares_square():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    c, res = solve_least_squares(A, np.array([3.0, 4.0]))
    assert np.allclose(c, [1.0, 1.0]) and res <= 1e-15


def test_least_squares_mean():
    c, res = solve_least_squares(np.ones((2, 1)), np.array([0.0, 2.0]))
    assert np.allclose(c, [1.0]) and np.isclose(res, np.sqrt(2.0))


def test_least_squares_normal_equations():
    rng = np.random.default_rng(9)
    A, b = rng.standard_normal((12, 4)), rng.standard_normal(12)
    c, _ = solve_least_squares(A, b)
    assert np.allclose(np.linalg.solve(A.T @ A, A.T @ b), c, atol=1e-9)


@given(seeds, st.integers(1, 8))
def test_least_squares_residual_is_recomputed(seed, n):
    rng = np.random.default_rng(seed)
    A, b = rng.standard_normal((n + 5, n)), rng.standard_normal(n + 5)
    c, res = solve_least_squares(A, b)
    assert abs(res - np.linalg.norm(b - A @ c)) <= 1e-12 * max(res, 1e-300)


def test_least_squares_rank_deficient():
    A = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(RankDeficientError):
        solve_least_squares(A, np.ones(3))
