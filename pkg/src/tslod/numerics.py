"""Linear-algebra kernels shared by the discretization and the reduced models."""

import numpy as np
import scipy.linalg as la
import scipy.sparse as sparse
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla


class NotSPDError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be symmetric positive definite is not."""

    def __init__(self, role, detail=''):
        self.role = role
        super().__init__(f'{role} matrix is not symmetric positive definite{": " + detail if detail else ""}')


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, message, rows=()):
        self.rows = list(rows)
        super().__init__(message)


class SPDSolver:
    """Sparse factorization of an SPD matrix, reusable for many right-hand sides.

    SuperLU is run with a symmetric fill-reducing ordering and without row
    pivoting, so the pivots are the LDL^T pivots and a nonpositive pivot
    certifies that the matrix is not positive definite.
    """

    def __init__(self, A, role='system'):
        A = sparse.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f'{role} matrix must be square, got {A.shape}')
        scale = abs(A).max() if A.nnz else 0.0
        if scale == 0.0:
            raise NotSPDError(role, 'zero matrix')
        asym = abs(A - A.T).max() if A.nnz else 0.0
        if asym > 1e-12 * scale:
            raise NotSPDError(role, f'asymmetry {asym:.2e}')
        if np.any(A.diagonal() <= 0):
            raise NotSPDError(role, 'nonpositive diagonal entry')
        self.role = role
        self.A = A
        try:
            self.lu = spla.splu(A, permc_spec='MMD_AT_PLUS_A', diag_pivot_thresh=0.0,
                                options=dict(SymmetricMode=True))
        except RuntimeError as e:
            raise NotSPDError(role, str(e)) from e
        if np.any(self.lu.U.diagonal() <= 0):
            raise NotSPDError(role, 'nonpositive pivot during factorization')

    def solve(self, b):
        return self.lu.solve(np.asarray(b, dtype=float))


def solve_spd_sparse(A, b, role='system'):
    """Solve ``A x = b`` for sparse SPD ``A``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != A.shape[0]:
        raise ValueError(f'dimension mismatch: {A.shape} vs {b.shape}')
    return SPDSolver(A, role).solve(b)


class SaddlePointSolver:
    """Factorization of ``K = [[A, C^T], [C, 0]]`` with ``A`` SPD and ``C`` of full row rank.

    The multiplier block is ordered last and SuperLU runs without pivoting, so
    the factorization is a symmetric ``L D L^T`` whose pivot signs give the
    inertia of ``K``. Exactly ``n`` positive and ``m`` negative pivots certify
    both assumptions.

    ``ordering`` is a fill-reducing permutation for the ``A`` block: an index
    array, ``'natural'`` if ``A`` is already well ordered, or ``'rcm'``.
    """

    def __init__(self, A, C, role='saddle point', ordering='rcm'):
        A = sparse.csr_matrix(A)
        n = A.shape[0]
        self.n = n
        self.m = 0 if C is None else C.shape[0]
        self.role = role
        if A.shape != (n, n):
            raise ValueError(f'{role} matrix must be square, got {A.shape}')
        C = sparse.csr_matrix((0, n)) if C is None else sparse.csr_matrix(C)
        if C.shape[1] != n:
            raise ValueError(f'{role}: constraint matrix has {C.shape[1]} columns, expected {n}')
        self.C = C
        if isinstance(ordering, str):
            if ordering == 'natural':
                perm = None
            elif ordering == 'rcm':
                perm = csgraph.reverse_cuthill_mckee(A + A.T, symmetric_mode=True)
            else:
                raise ValueError(f'unknown ordering {ordering!r}')
        else:
            perm = np.asarray(ordering)
        self.perm = perm
        if perm is not None:
            A = A[perm][:, perm]
            C = C[:, perm]
        scale = abs(A).max() if A.nnz else 0.0
        if scale == 0.0:
            raise NotSPDError(role, 'zero matrix')
        if abs(A - A.T).max() > 1e-12 * scale:
            raise NotSPDError(role, 'asymmetric leading block')
        K = sparse.bmat([[A, C.T], [C, None]], format='csc') if self.m else A.tocsc()
        try:
            self.lu = spla.splu(K, permc_spec='NATURAL', diag_pivot_thresh=0.0,
                                options=dict(SymmetricMode=True))
        except RuntimeError as e:
            self._fail(f'singular block system ({e})')
        d = self.lu.U.diagonal()
        if not np.all(np.isfinite(d)):
            self._fail('non-finite pivots')
        pos, neg = d[d > 0], d[d < 0]
        if len(pos) != n or len(neg) != self.m:
            self._fail(f'inertia ({len(pos)}, {len(neg)}) differs from ({n}, {self.m})')
        if self.m and np.min(np.abs(neg)) <= 1e-12 * np.max(np.abs(neg)):
            self._fail('nearly singular multiplier block')

    def _fail(self, why):
        rows = dependent_rows(self.C)
        if rows:
            raise RankDeficientError(f'{self.role}: {why}; dependent constraint rows {rows}', rows)
        raise NotSPDError(self.role, why)

    def solve(self, b, return_multiplier=False):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f'{self.role}: right-hand side has {b.shape[0]} rows, expected {self.n}')
        rhs = np.zeros((self.n + self.m,) + b.shape[1:])
        rhs[:self.n] = b if self.perm is None else b[self.perm]
        sol = self.lu.solve(rhs)
        if self.perm is None:
            x = sol[:self.n]
        else:
            x = np.empty_like(sol[:self.n])
            x[self.perm] = sol[:self.n]
        lam = sol[self.n:]
        return (x, lam) if return_multiplier else x


def dependent_rows(C, rtol=1e-10):
    """Indices of rows of ``C`` that are linearly dependent on earlier ones."""
    C = C.toarray() if sparse.issparse(C) else np.asarray(C)
    if C.shape[0] == 0:
        return []
    _, R, piv = la.qr(C.T, mode='economic', pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * max(d[0], np.finfo(float).tiny)))
    return sorted(int(i) for i in piv[rank:])


def solve_saddle_point(A, C, b):
    """Solve ``A x + C^T lam = b``, ``C x = 0``; returns ``(x, lam)``."""
    return SaddlePointSolver(A, C).solve(b, return_multiplier=True)


def _apply(product, V):
    if product is None:
        return V
    if callable(product) and not hasattr(product, 'shape'):
        return product(V)
    return product @ V


def orthonormalize(vectors, product=None, basis=None, rtol=1e-10):
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Parameters
    ----------
    vectors
        Array of shape ``(n, k)`` (columns are the vectors) or a list of 1d arrays.
    product
        ``None`` (Euclidean), an SPD matrix, or a callable mapping a vector to
        ``product @ vector``.
    basis
        Optional ``(n, l)`` array already orthonormal w.r.t. ``product``; the new
        vectors are orthonormalized against it and appended.
    rtol
        A vector whose remainder after both passes is below ``rtol`` times its
        original norm is dropped.

    Returns
    -------
    Q, kept
        ``Q`` has the (old and) new orthonormal columns, ``kept`` lists the
        indices of the input vectors that contributed a new column.
    """
    if isinstance(vectors, (list, tuple)):
        V = np.column_stack(vectors) if len(vectors) else np.zeros((0 if basis is None else basis.shape[0], 0))
    else:
        V = np.asarray(vectors, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
    n = V.shape[0]
    cols = [] if basis is None else [basis[:, i] for i in range(basis.shape[1])]
    wcols = [] if basis is None else list(_apply(product, basis).T)
    kept = []
    for idx in range(V.shape[1]):
        v = np.array(V[:, idx], dtype=float)
        wv = _apply(product, v)
        norm0 = np.sqrt(max(v @ wv, 0.0))
        if norm0 == 0.0:
            continue
        for _ in range(2):
            for q, wq in zip(cols, wcols):
                v -= (wq @ v) * q
        wv = _apply(product, v)
        norm = np.sqrt(max(v @ wv, 0.0))
        if norm <= rtol * norm0:
            continue
        cols.append(v / norm)
        wcols.append(wv / norm)
        kept.append(idx)
    Q = np.column_stack(cols) if cols else np.zeros((n, 0))
    return Q, kept


def solve_least_squares(A, b, rtol=1e-12):
    """Minimize ``||b - A c||_2`` via Householder QR.

    Returns ``(c, residual_norm)`` where the residual norm is evaluated directly.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    M, N = A.shape
    if N == 0:
        return np.zeros(0), float(np.linalg.norm(b))
    if M < N:
        raise RankDeficientError(f'least-squares system has fewer rows ({M}) than unknowns ({N})')
    Qm, R = np.linalg.qr(A, mode='reduced')
    d = np.abs(np.diag(R))
    if d.min() <= rtol * d.max():
        raise RankDeficientError('degenerate reduced basis: least-squares matrix is rank deficient',
                                 np.flatnonzero(d <= rtol * d.max()))
    c = la.solve_triangular(R, Qm.T @ b)
    return c, float(np.linalg.norm(b - A @ c))
