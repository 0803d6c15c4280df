"""Reduced-basis surrogates for the element correctors (one ROM per coarse element).

After training, a ROM only holds matrices whose sizes are set by the reduced
dimension ``N_T``, the estimator dimension ``M_T``, the element dofs ``J_T`` and
the coarse dofs ``R_T`` of the patch. The fine basis is kept only on request.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .coeff import estimate_spectral_bounds
from .io import array_hash, load_container, save_container
from .lod import InfSupError, pool_map, solve_correctors
from .numerics import orthonormalize


class GreedyLimitError(RuntimeError):
    def __init__(self, message, trace):
        self.trace = list(trace)
        super().__init__(message)


@dataclass(eq=False)
class CorrectorROM:
    T: int
    k: int
    element_dofs: np.ndarray    # (J,)
    coarse_dofs: np.ndarray     # (R,)
    A: np.ndarray               # (Q, N, N)   a_q(psi_n, psi_m)
    G: np.ndarray               # (Q, N, J)   a_q^T(phi_j, psi_m)
    A_hat: np.ndarray           # (Q, M, N)   a_q(psi_n, xi_m)
    G_hat: np.ndarray           # (Q, M, J)   a_q^T(phi_j, xi_m)
    K0: np.ndarray              # (Q, R, J)   a_q^T(phi_i, phi_j)
    K_rb: np.ndarray            # (Q, R, N)   a_q(psi_n, phi_j)
    alpha: float
    eps1: float
    train_hash: str = ''
    trace: list = field(default_factory=list)
    selected: list = field(default_factory=list)    # (training index, element dof) of every snapshot
    basis: np.ndarray = None    # (n_f, N) H^1-orthonormal fine basis, optional

    @property
    def N(self):
        return self.A.shape[1]

    @property
    def M(self):
        return self.A_hat.shape[1]

    @property
    def J(self):
        return len(self.element_dofs)

    @property
    def Q(self):
        return self.A.shape[0]

    def release_fine_data(self):
        self.basis = None

    def coefficients(self, theta):
        """Reduced correctors of all J element basis functions, shape ``(N, J)``."""
        if self.N == 0:
            return np.zeros((0, self.J))
        A = np.tensordot(theta, self.A, axes=1)
        G = np.tensordot(theta, self.G, axes=1)
        return la.solve(A, G, assume_a='pos')

    def residual_coordinates(self, theta, v_T, c):
        """Coordinates of the Riesz representative of the corrector residual."""
        r = np.tensordot(theta, self.G_hat, axes=1) @ v_T
        if self.N:
            r = r - np.tensordot(theta, self.A_hat, axes=1) @ c
        return r

    def coarse_block(self, theta, coefficients=None):
        """Reduced element contribution to the coarse matrix, shape ``(R, J)``."""
        if coefficients is None:
            coefficients = self.coefficients(theta)
        K = np.tensordot(theta, self.K0, axes=1)
        if self.N:
            K = K - np.tensordot(theta, self.K_rb, axes=1) @ coefficients
        return K

    def lift(self, c):
        if self.basis is None:
            raise ValueError(f'fine basis of element {self.T} has been released')
        return self.basis @ c

    def size_bytes(self):
        return sum(a.nbytes for a in (self.A, self.G, self.A_hat, self.G_hat, self.K0, self.K_rb))


def reduced_corrector_solve(rom, theta, v_T):
    """Reduced coefficients ``c`` of the corrector of ``v_H`` (given by its element dof values)."""
    return rom.coefficients(theta) @ np.asarray(v_T, dtype=float)


def corrector_error_estimate(rom, theta, v_T, c, alpha=None):
    """Residual-based bound for the energy error of the reduced corrector."""
    alpha = rom.alpha if alpha is None else alpha
    return float(np.linalg.norm(rom.residual_coordinates(theta, np.asarray(v_T, float), c)) / np.sqrt(alpha))


def _estimates(rom, thetas, alpha):
    """Estimates for all training parameters and element basis functions, shape ``(P, J)``."""
    out = np.empty((len(thetas), rom.J))
    for i, th in enumerate(thetas):
        C = rom.coefficients(th)
        R = np.tensordot(th, rom.G_hat, axes=1)
        if rom.N:
            R = R - np.tensordot(th, rom.A_hat, axes=1) @ C
        out[i] = np.linalg.norm(R, axis=0)
    return out / np.sqrt(alpha)


class _SolverCache:
    """Small LRU cache of corrector factorizations keyed by training index."""

    def __init__(self, system, size=4):
        self.system, self.size, self.items = system, size, OrderedDict()

    def get(self, key, theta):
        if key in self.items:
            self.items.move_to_end(key)
        else:
            self.items[key] = self.system.solver(theta)
            if len(self.items) > self.size:
                self.items.popitem(last=False)
        return self.items[key]


def train_corrector_rom(system, thetas, eps1, alpha, max_iter=200, retain=False, train_hash='', k=None):
    """Greedy construction of the reduced corrector space of one element.

    ``thetas`` holds the coefficient weights of the training parameters (one row
    per parameter). Each round estimates the error for every (parameter, element
    basis function) pair from reduced quantities only, solves the full
    corrector problem for the worst pair and adds the result to the basis.
    Ties go to the lowest parameter index, then the lowest basis function.
    """
    if eps1 <= 0:
        raise ValueError('eps1 must be positive')
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if len(thetas) == 0:
        raise ValueError('training set is empty')
    patch = system.patch
    Q, J, gram = system.Q, patch.J_T, system.gram
    gram_solver = system.gram_solver()
    rhs_q = [K[:, patch.element_dof_rows].toarray() for K in system.coupling_T]    # (n_f, J) each
    Xi, _ = orthonormalize(gram_solver.solve(np.hstack(rhs_q)), product=gram)
    Psi = np.zeros((system.n_free, 0))
    KPsi = [np.zeros((system.n_free, 0)) for _ in range(Q)]
    solvers = _SolverCache(system)
    excluded = np.zeros((len(thetas), J), dtype=bool)
    trace, selected = [], []

    def assemble():
        return CorrectorROM(
            T=patch.T, k=patch.k if k is None else k,
            element_dofs=np.array(patch.element_dofs), coarse_dofs=np.array(patch.coarse_row_dofs),
            A=np.array([Psi.T @ KP for KP in KPsi]).reshape(Q, Psi.shape[1], Psi.shape[1]),
            G=np.array([Psi.T @ r for r in rhs_q]).reshape(Q, Psi.shape[1], J),
            A_hat=np.array([Xi.T @ KP for KP in KPsi]).reshape(Q, Xi.shape[1], Psi.shape[1]),
            G_hat=np.array([Xi.T @ r for r in rhs_q]).reshape(Q, Xi.shape[1], J),
            K0=np.array(system.K0),
            K_rb=np.array([(K.T @ Psi) for K in system.coupling]).reshape(Q, len(patch.coarse_row_dofs), Psi.shape[1]),
            alpha=float(alpha), eps1=float(eps1), train_hash=train_hash, trace=trace,
            selected=list(selected))

    rom = assemble()
    while True:
        est = _estimates(rom, thetas, alpha) if J else np.zeros((len(thetas), 0))
        est_all = est.max() if est.size else 0.0
        trace.append(float(est_all))
        if est_all <= eps1:
            break
        if len(trace) > max_iter:
            raise GreedyLimitError(f'element {patch.T}: no convergence to {eps1} within {max_iter} '
                                   f'enrichments (last estimate {est_all:.3e})', trace)
        masked = np.where(excluded, -np.inf, est)
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        if not np.isfinite(masked[i, j]) or masked[i, j] <= eps1:
            # every remaining candidate was numerically in the span already
            break
        snapshot = solve_correctors(system, thetas[i], solvers.get(i, thetas[i]))[:, j]
        Psi_new, kept = orthonormalize(snapshot[:, None], product=gram, basis=Psi)
        if not kept:
            excluded[i, j] = True
            continue
        psi = Psi_new[:, -1]
        Psi = Psi_new
        selected.append((int(i), int(j)))
        new_KPsi = [K @ psi for K in system.K_free]
        KPsi = [np.column_stack([KP, v]) for KP, v in zip(KPsi, new_KPsi)]
        Xi, _ = orthonormalize(gram_solver.solve(np.column_stack(new_KPsi)), product=gram, basis=Xi)
        rom = assemble()
    if retain:
        rom.basis = Psi
    return rom


# ---------------------------------------------------------------- all elements

def _train_job(args):
    from .lod import _SHARED
    T, thetas, eps1, alpha, retain, train_hash, max_iter = args
    disc = _SHARED['disc']
    return train_corrector_rom(disc.system(T), thetas, eps1, alpha, max_iter=max_iter, retain=retain,
                               train_hash=train_hash, k=disc.k)


@dataclass(eq=False)
class Stage1Model:
    """All element ROMs of one discretization plus the coarse data they need online."""
    roms: list
    theta: object          # parameter -> coefficient weights
    F_H: np.ndarray
    S: object              # coarse H^1 Gram matrix
    alpha: float
    beta: float
    k: int
    eps1: float
    train_hash: str
    mesh_signature: str
    offline_time: float = 0.0

    @property
    def N_H(self):
        return len(self.F_H)

    @property
    def kappa(self):
        return self.beta / self.alpha

    def thetas(self, mu):
        return np.asarray(self.theta(np.atleast_1d(np.asarray(mu, float))), dtype=float)

    def sizes(self):
        return np.array([r.N for r in self.roms])

    def size_bytes(self):
        return sum(r.size_bytes() for r in self.roms)

    def release_fine_data(self):
        for r in self.roms:
            r.release_fine_data()


def train_stage1(disc, train, eps1, workers=1, retain=False, max_iter=200):
    import time
    train = np.atleast_2d(np.asarray(train, dtype=float))
    thetas = np.array([disc.thetas(mu) for mu in train])
    bounds = estimate_spectral_bounds(disc.coefficient, train)
    h = array_hash(train)
    t0 = time.perf_counter()
    jobs = [(T, thetas, eps1, bounds.alpha, retain, h, max_iter) for T in disc.elements]
    roms = pool_map(_train_job, jobs, workers, disc)
    elapsed = time.perf_counter() - t0
    return Stage1Model(roms, disc.coefficient.theta, disc.forms.F_H.copy(), disc.forms.S.copy(),
                       bounds.alpha, bounds.beta, disc.k, float(eps1), h, disc.mesh.signature(), elapsed)


def assemble_reduced_coarse_matrix(model, mu):
    """Coarse matrix with every corrector replaced by its reduced approximation."""
    theta = model.thetas(mu)
    rows, cols, data = [], [], []
    for rom in model.roms:
        _scatter(rows, cols, data, rom, rom.coarse_block(theta))
    N = model.N_H
    if not data:
        return sparse.csr_matrix((N, N))
    return sparse.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))


def _scatter(rows, cols, data, rom, K_T):
    rows.append(np.repeat(rom.coarse_dofs, len(rom.element_dofs)))
    cols.append(np.tile(rom.element_dofs, len(rom.coarse_dofs)))
    data.append(K_T.ravel())


def rblod_solve(model, mu, F=None):
    """Coarse solution of the reduced-corrector (PG-RBLOD) system."""
    K = assemble_reduced_coarse_matrix(model, mu)
    F = model.F_H if F is None else F
    try:
        u = spla.splu(sparse.csc_matrix(K)).solve(np.asarray(F, dtype=float))
    except RuntimeError as e:
        raise InfSupError(f'reduced coarse matrix is singular ({e})') from e
    return u


# ---------------------------------------------------------------- serialization

_ROM_ARRAYS = ('element_dofs', 'coarse_dofs', 'A', 'G', 'A_hat', 'G_hat', 'K0', 'K_rb')


def save_rom(rom, path):
    arrays = {name: getattr(rom, name) for name in _ROM_ARRAYS}
    if rom.basis is not None:
        arrays['basis'] = rom.basis
    meta = dict(T=rom.T, k=rom.k, N_T=rom.N, M_T=rom.M, eps1=rom.eps1, alpha=rom.alpha,
                train_hash=rom.train_hash, trace=rom.trace, selected=rom.selected)
    save_container(path, arrays, meta)


def load_rom(path):
    arrays, meta = load_container(path)
    return CorrectorROM(T=meta['T'], k=meta['k'], alpha=meta['alpha'], eps1=meta['eps1'],
                        train_hash=meta['train_hash'], trace=meta['trace'],
                        selected=[tuple(p) for p in meta.get('selected', [])], basis=arrays.get('basis'),
                        **{name: arrays[name] for name in _ROM_ARRAYS})
