"""Petrov-Galerkin localized orthogonal decomposition (PG-LOD) and its two-scale form.

Fine-scale functions on a patch are stored on the patch's interior fine nodes in
``Patch.free`` order. The fine-scale space of a patch is the kernel of the
quasi-interpolation restricted to the patch; it is never built explicitly and
enters through Lagrange multipliers.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .coeff import estimate_spectral_bounds
from .fem import M_REF, assemble_forms, block_assembler, patch_stiffness, prolongation
from .grid import choose_oversampling, overlap_constant, patch_elements
from .numerics import SaddlePointSolver, SPDSolver


class InfSupError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------- interpolation

@lru_cache(maxsize=8)
def local_projection(r):
    """L2 projection of Q1 functions on an ``r x r`` fine block onto Q1 on the element.

    Returns the ``4 x (r+1)^2`` matrix mapping fine nodal values to the element's
    corner values.
    """
    P = prolongation(r, 1).toarray()
    M_h = block_assembler(r, r).matrix(np.ones(r * r), kind='mass', scale=1.0 / r ** 2).toarray()
    return np.linalg.solve(M_REF, P.T @ M_h)


@lru_cache(maxsize=32)
def _block_interpolation(px, py, r):
    """Node-averaged local projections on a block of ``px x py`` coarse elements.

    Rows: all coarse nodes of the block, columns: all fine nodes of the block.
    Each element contributes with weight 1/4, the weight of an interior node.
    """
    Pi = local_projection(r) / 4.0
    nfx = px * r + 1
    ly, lx = np.divmod(np.arange((r + 1) ** 2), r + 1)
    local_fine = ly * nfx + lx
    ex, ey = np.meshgrid(np.arange(px), np.arange(py))
    ex, ey = ex.ravel(), ey.ravel()
    fine = (ey * r * nfx + ex * r)[:, None] + local_fine[None, :]
    ll = ey * (px + 1) + ex
    corners = np.column_stack([ll, ll + 1, ll + px + 1, ll + px + 2])
    rows = np.repeat(corners[:, :, None], fine.shape[1], axis=2)
    cols = np.repeat(fine[:, None, :], 4, axis=1)
    vals = np.broadcast_to(Pi[None], rows.shape)
    shape = ((px + 1) * (py + 1), nfx * (py * r + 1))
    M = sparse.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
    M.eliminate_zeros()
    return M


@lru_cache(maxsize=32)
def _block_basis(px, py, r):
    return prolongation(px * r, px, py * r, py)


class InterpolationOperator:
    """Quasi-interpolation ``I_H``: elementwise L2 projection onto Q1, averaged at nodes.

    ``matrix`` maps interior fine dofs to interior coarse dofs; Dirichlet nodes
    are dropped, which keeps ``I_H`` a projection onto the coarse space with
    zero boundary values.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        full = _block_interpolation(mesh.n_H, mesh.n_H, mesh.ratio)
        self.matrix = full[mesh.coarse_free_nodes][:, mesh.fine_free_nodes].tocsr()

    def __call__(self, v):
        return self.matrix @ v

    def constraint(self, patch):
        """Rows of ``I_H`` for the interior coarse nodes of the closed patch (in
        ``patch.coarse_rows`` order) restricted to the patch's free fine dofs."""
        px, py = patch.shape
        block = _block_interpolation(px, py, self.mesh.ratio)
        return block[patch.coarse_rows][:, patch.free].tocsr()


def build_interpolation(mesh):
    return InterpolationOperator(mesh)


# ---------------------------------------------------------------- patch systems

@dataclass(eq=False)
class PatchSystem:
    """Parameter-independent affine pieces of the corrector problem on one patch.

    Index conventions: ``n_f`` free fine dofs of the patch, ``R`` interior coarse
    dofs of the closed patch (``patch.coarse_row_dofs``), ``J`` interior coarse
    dofs of the element (``patch.element_dofs``).
    """
    patch: object
    K_free: list        # Q x (n_f, n_f): a_q on the patch
    coupling: list      # Q x (n_f, R): a_q(v, phi_j)
    coupling_T: list    # Q x (n_f, R): a_q^T(phi_j, v), integral over T only
    K0: np.ndarray      # (Q, R, J): a_q^T(phi_i, phi_j)
    gram: object        # (n_f, n_f): H^1 seminorm inner product
    C: object           # (R, n_f): interpolation constraint

    @property
    def Q(self):
        return len(self.K_free)

    @property
    def n_free(self):
        return self.gram.shape[0]

    def stiffness(self, theta):
        A = theta[0] * self.K_free[0]
        for t, K in zip(theta[1:], self.K_free[1:]):
            A = A + t * K
        return A

    def coupling_mu(self, theta):
        return sum(t * K for t, K in zip(theta, self.coupling))

    def coupling_T_mu(self, theta):
        return sum(t * K for t, K in zip(theta, self.coupling_T))

    def corrector_rhs(self, theta):
        """Columns ``a^T_mu(phi_{i_j}, .)`` for the element's J basis functions."""
        return self.coupling_T_mu(theta)[:, self.patch.element_dof_rows].toarray()

    def solver(self, theta):
        return SaddlePointSolver(self.stiffness(theta), self.C, role=f'corrector system T={self.patch.T}',
                                 ordering='natural')

    def gram_solver(self):
        return SaddlePointSolver(self.gram, self.C, role=f'patch Gram T={self.patch.T}', ordering='natural')


def build_patch_system(mesh, coefficient, interp, T, k):
    patch = patch_elements(mesh, T, k)
    Phi = _block_basis(*patch.shape, mesh.ratio)[:, patch.coarse_rows].tocsc()
    Phi_T = Phi[:, patch.element_dof_rows]
    K_free, coupling, coupling_T, K0 = [], [], [], []
    for A_q in coefficient.fields:
        full, free = patch_stiffness(mesh, A_q, patch)
        full_T, _ = patch_stiffness(mesh, A_q, patch, element=T)
        full_T.eliminate_zeros()
        K_free.append(free)
        coupling.append((full[patch.free] @ Phi).tocsr())
        coupling_T.append((full_T[patch.free] @ Phi).tocsr())
        K0.append((Phi.T @ full_T @ Phi_T).toarray())
    _, gram = patch_stiffness(mesh, np.ones(mesh.n_fine_elements), patch)
    return PatchSystem(patch, K_free, coupling, coupling_T, np.array(K0).reshape(len(K0), len(patch.coarse_rows), -1),
                       gram, interp.constraint(patch))


def solve_correctors(system, theta, solver=None):
    """Correctors of the element's J coarse basis functions, shape ``(n_f, J)``."""
    if solver is None:
        solver = system.solver(theta)
    rhs = system.corrector_rhs(theta)
    if rhs.shape[1] == 0:
        return rhs
    return solver.solve(rhs)


def solve_corrector(system, theta, v_T):
    """Corrector ``Q_T(v_H)`` for ``v_H`` given by its values at the element's interior dofs."""
    return solve_correctors(system, theta) @ np.asarray(v_T, dtype=float)


def assemble_K_T(system, theta, correctors):
    """Element contribution to the PG-LOD matrix, shape ``(R, J)``.

    Entry ``(j, i)`` is ``a^T(phi_i, phi_j) - a(Q_T phi_i, phi_j)``.
    """
    if correctors is None:
        raise ValueError(f'missing correctors for element {system.patch.T}')
    K0 = np.tensordot(theta, system.K0, axes=1)
    if correctors.shape[1] != K0.shape[1]:
        raise ValueError('corrector count does not match the element dofs')
    return K0 - system.coupling_mu(theta).T @ correctors


# ---------------------------------------------------------------- global problem

_SHARED = {}


def _init_worker(disc):
    _SHARED['disc'] = disc


def _element_job(args):
    T, theta, retain = args
    disc = _SHARED['disc']
    system = disc.system(T)
    Q = solve_correctors(system, theta)
    return T, assemble_K_T(system, theta, Q), (Q if retain else None)


def pool_map(fn, items, workers, disc):
    """Map ``fn`` over ``items``, in worker processes when ``workers > 1``."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) < 2:
        _init_worker(disc)
        return [fn(it) for it in items]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(disc,)) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def default_workers():
    return len(os.sched_getaffinity(0)) if hasattr(os, 'sched_getaffinity') else (os.cpu_count() or 1)


class LodDiscretization:
    """Mesh, coefficient, oversampling and cached global forms for one problem."""

    def __init__(self, mesh, coefficient, k=None, forms=None, cache_systems=False):
        self.mesh = mesh
        self.coefficient = coefficient
        self.k = choose_oversampling(mesh.H) if k is None else int(k)
        self.forms = assemble_forms(mesh, coefficient) if forms is None else forms
        self.interp = build_interpolation(mesh)
        self.cache_systems = cache_systems
        self._systems = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        state['_systems'] = {}
        return state

    @property
    def C_ovl(self):
        return overlap_constant(self.k)

    @property
    def elements(self):
        return range(self.mesh.n_coarse_elements)

    def patch(self, T):
        return patch_elements(self.mesh, T, self.k)

    def system(self, T):
        if T in self._systems:
            return self._systems[T]
        s = build_patch_system(self.mesh, self.coefficient, self.interp, T, self.k)
        if self.cache_systems:
            self._systems[T] = s
        return s

    def thetas(self, mu):
        return self.coefficient.thetas(mu)

    def rho(self, train):
        """Stabilization weight ``C_ovl * kappa``, at least 1."""
        kappa = estimate_spectral_bounds(self.coefficient, train).kappa
        return max(1.0, self.C_ovl * kappa)


@dataclass(eq=False)
class LodSolution:
    u_H: np.ndarray
    K: object
    correctors: dict = field(default_factory=dict)


def scatter_contribution(rows, cols, data, p, K_T):
    rows.append(np.repeat(p.coarse_row_dofs, len(p.element_dofs)))
    cols.append(np.tile(p.element_dofs, len(p.coarse_row_dofs)))
    data.append(K_T.ravel())


def coarse_solve(K, F):
    try:
        lu = spla.splu(sparse.csc_matrix(K))
    except RuntimeError as e:
        raise InfSupError(f'coarse multiscale matrix is singular ({e}); increase the oversampling') from e
    u = lu.solve(F)
    if not np.all(np.isfinite(u)):
        raise InfSupError('coarse multiscale solve produced non-finite values')
    return u


def pglod_solve(disc, mu, retain=False, workers=1, F=None):
    """PG-LOD coarse solution: assemble ``sum_T K_T`` and solve with the coarse load."""
    theta = disc.thetas(mu)
    results = pool_map(_element_job, [(T, theta, retain) for T in disc.elements], workers, disc)
    rows, cols, data, correctors = [], [], [], {}
    for T, K_T, Q in results:
        scatter_contribution(rows, cols, data, disc.patch(T), K_T)
        if retain:
            correctors[T] = Q
    N = disc.mesh.N_H
    K = sparse.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    F = disc.forms.F_H if F is None else F
    return LodSolution(coarse_solve(K, F), K, correctors)


# ---------------------------------------------------------------- two-scale form

@dataclass(eq=False)
class TwoScaleVector:
    """Element of the two-scale space: coarse dofs plus one fine part per patch."""
    u_H: np.ndarray
    fine: list

    def __add__(self, other):
        return TwoScaleVector(self.u_H + other.u_H, [a + b for a, b in zip(self.fine, other.fine)])

    def __sub__(self, other):
        return TwoScaleVector(self.u_H - other.u_H, [a - b for a, b in zip(self.fine, other.fine)])

    def __mul__(self, s):
        return TwoScaleVector(s * self.u_H, [s * a for a in self.fine])

    __rmul__ = __mul__

    def flat(self):
        return np.concatenate([self.u_H] + list(self.fine))

    @classmethod
    def zeros(cls, disc):
        return cls(np.zeros(disc.mesh.N_H), [np.zeros(disc.system(T).n_free) for T in disc.elements])


def embed_fine(disc, T, v):
    out = np.zeros(disc.mesh.N_h)
    out[disc.patch(T).free_global] = v
    return out


def _fine_sum(disc, fine):
    out = np.zeros(disc.mesh.N_h)
    for T, v in zip(disc.elements, fine):
        np.add.at(out, disc.patch(T).free_global, v)
    return out


def two_scale_functional(disc, v):
    """``F(v_H)``; the fine parts do not enter."""
    return float(disc.forms.F_H @ v.u_H)


def two_scale_apply(disc, mu, rho, u, v):
    """Two-scale bilinear form ``B_mu(u, v)``."""
    theta = disc.thetas(mu)
    A = disc.forms.stiffness(mu)
    P = disc.forms.P
    w = P @ u.u_H - _fine_sum(disc, u.fine)
    val = (P @ v.u_H) @ (A @ w)
    fine = 0.0
    for T, uT, vT in zip(disc.elements, u.fine, v.fine):
        s = disc.system(T)
        uH = u.u_H[s.patch.coarse_row_dofs]
        fine += vT @ (s.stiffness(theta) @ uT - s.coupling_T_mu(theta) @ uH)
    return float(val + np.sqrt(rho) * fine)


def two_scale_solve_monolithic(disc, mu, rho, F=None):
    """Solve the full two-scale system with one multiplier block per patch.

    Unknown order: per element its fine dofs and multipliers, then the coarse
    dofs last, so elimination runs patch by patch without pivoting and ends on
    the coarse block. Used for verification only.
    """
    theta = disc.thetas(mu)
    forms = disc.forms
    N_H = disc.mesh.N_H
    sq = np.sqrt(rho)
    diag, right, bottom, sizes = [], [], [], []
    for T in disc.elements:
        s = disc.system(T)
        p = s.patch
        n_f, m = s.n_free, s.C.shape[0]
        sizes.append((n_f, m))
        R = len(p.coarse_row_dofs)
        scat = sparse.csr_matrix((np.ones(R), (np.arange(R), p.coarse_row_dofs)), shape=(R, N_H))
        diag.append(sparse.bmat([[sq * s.stiffness(theta), s.C.T], [s.C, None]]))
        right.append(sparse.vstack([-sq * (s.coupling_T_mu(theta) @ scat), sparse.csr_matrix((m, N_H))]))
        bottom.append(sparse.hstack([-(scat.T @ s.coupling_mu(theta).T), sparse.csr_matrix((N_H, m))]))
    S_mu = forms.P.T @ forms.stiffness(mu) @ forms.P
    K = sparse.bmat([[sparse.block_diag(diag), sparse.vstack(right)],
                     [sparse.hstack(bottom), S_mu]], format='csc')
    rhs = np.zeros(K.shape[0])
    rhs[-N_H:] = forms.F_H if F is None else F
    lu = spla.splu(K, permc_spec='NATURAL', diag_pivot_thresh=0.0)
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise InfSupError('two-scale system is singular')
    fine, pos = [], 0
    for n_f, m in sizes:
        fine.append(x[pos:pos + n_f])
        pos += n_f + m
    return TwoScaleVector(x[-N_H:], fine)


def all_correctors(disc, mu):
    theta = disc.thetas(mu)
    return {T: solve_correctors(disc.system(T), theta) for T in disc.elements}


def two_scale_norms(disc, mu, rho, u, correctors=None):
    """``(|||u|||, |||u|||_a, |||u|||_m)``; the weighted norms use the true correctors of ``u_H``."""
    theta = disc.thetas(mu)
    if correctors is None:
        correctors = all_correctors(disc, mu)
    forms = disc.forms
    s2 = u.u_H @ (forms.S @ u.u_H)
    w = forms.P @ u.u_H - _fine_sum(disc, u.fine)
    a2 = w @ (forms.stiffness(mu) @ w)
    m2 = s2
    for T, uT in zip(disc.elements, u.fine):
        s = disc.system(T)
        s2 += uT @ (s.gram @ uT)
        e = correctors[T] @ u.u_H[s.patch.element_dofs] - uT
        a2 += rho * (e @ (s.stiffness(theta) @ e))
        m2 += rho * (e @ (s.gram @ e))
    return tuple(float(np.sqrt(max(x, 0.0))) for x in (s2, a2, m2))


def residual_dual_norm(disc, mu, rho, u, F=None, gram_solvers=None):
    """Dual norm of ``F - B_mu(u, .)`` with respect to ``|||.|||``."""
    theta = disc.thetas(mu)
    forms = disc.forms
    F = forms.F_H if F is None else F
    w = forms.P @ u.u_H - _fine_sum(disc, u.fine)
    ell_H = F - forms.P.T @ (forms.stiffness(mu) @ w)
    total = ell_H @ SPDSolver(forms.S, 'coarse Gram').solve(ell_H)
    for T, uT in zip(disc.elements, u.fine):
        s = disc.system(T)
        ell = -np.sqrt(rho) * (s.stiffness(theta) @ uT - s.coupling_T_mu(theta) @ u.u_H[s.patch.coarse_row_dofs])
        solver = s.gram_solver() if gram_solvers is None else gram_solvers[T]
        r = solver.solve(ell)
        # r^T G r rather than r^T ell: ell may carry a large component in the
        # range of C^T that cancels only up to round-off
        total += r @ (s.gram @ r)
    return float(np.sqrt(max(total, 0.0)))
