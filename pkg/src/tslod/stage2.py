"""Reduced model of the two-scale system, trained on Stage-1 surrogate snapshots.

Reduced two-scale vectors are stored in coordinates: coarse dofs followed by the
Stage-1 reduced coefficients of every element, concatenated in element order.
Residual generators live in coarse dofs followed by the Stage-1 estimator
coordinates of every element. Both spaces carry the product inner product of
the coarse H^1 Gram matrix and the Euclidean inner products of the element
blocks, which are isometric to H^1 because all Stage-1 bases are
H^1-orthonormal.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .io import array_hash, load_container, save_container
from .lod import TwoScaleVector
from .numerics import SPDSolver, orthonormalize, solve_least_squares
from .stage1 import rblod_solve

C_IH = 1.0


class GreedyAbort(RuntimeError):
    """Raised when the greedy picks a parameter that was already used.

    ``floor`` is the maximum training estimate at that point, i.e. the level to
    which the Stage-1 errors limit the reduced model.
    """

    def __init__(self, mu, floor, trace):
        self.mu = np.asarray(mu)
        self.floor = float(floor)
        self.trace = list(trace)
        super().__init__(f'parameter {self.mu.tolist()} selected twice (estimate {floor:.3e}); '
                         f'the Stage-1 tolerance is too large for this Stage-2 tolerance, retrain Stage 1 '
                         f'with a smaller eps1')


class _Layout:
    """Block offsets of the reduced and residual coordinate spaces."""

    def __init__(self, model):
        self.N_H = model.N_H
        self.n = np.array([r.N for r in model.roms])
        self.m = np.array([r.M for r in model.roms])
        self.n_off = self.N_H + np.concatenate([[0], np.cumsum(self.n)])
        self.m_off = self.N_H + np.concatenate([[0], np.cumsum(self.m)])
        self.S = model.S

    def product(self, size_off):
        n_fine = size_off[-1] - self.N_H
        return sparse.block_diag([self.S, sparse.identity(n_fine)], format='csr')


@dataclass(eq=False)
class TwoScaleROM:
    A_hat: np.ndarray        # (Q, M, N)
    F_hat: np.ndarray        # (M,)
    basis: np.ndarray        # (N_H + sum N_T, N) reduced two-scale basis
    n_offsets: np.ndarray    # block offsets of ``basis`` rows
    theta: object
    alpha: float
    beta: float
    rho: float
    gamma: float
    eps1: float
    eps2: float
    train_hash: str = ''
    mesh_signature: str = ''
    trace: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    offline_time: float = 0.0

    @property
    def N(self):
        return self.A_hat.shape[2]

    @property
    def M(self):
        return self.A_hat.shape[1]

    @property
    def kappa(self):
        return self.beta / self.alpha

    def thetas(self, mu):
        return np.asarray(self.theta(np.atleast_1d(np.asarray(mu, float))), dtype=float)

    def size_bytes(self):
        return self.A_hat.nbytes + self.F_hat.nbytes


def estimator_factors(gamma, alpha):
    """Multipliers turning the residual norm into ``eta_a`` and ``eta_1``."""
    return np.sqrt(5.0) / gamma, np.sqrt(5.0) * C_IH / (np.sqrt(alpha) * gamma)


def ts_rom_solve(rom, mu, alpha=None, gamma=None):
    """Least-squares solve of the reduced system.

    Returns ``(c, eta_a, eta_1)``. ``alpha``/``gamma`` override the stored
    constants (e.g. with exact per-parameter values).
    """
    theta = rom.thetas(mu)
    alpha = rom.alpha if alpha is None else alpha
    gamma = rom.gamma if gamma is None else gamma
    A = np.tensordot(theta, rom.A_hat, axes=1)
    c, res = solve_least_squares(A, rom.F_hat)
    fa, f1 = estimator_factors(gamma, alpha)
    return c, fa * res, f1 * res


def residual_norm(rom, mu, c):
    A = np.tensordot(rom.thetas(mu), rom.A_hat, axes=1)
    return float(np.linalg.norm(rom.F_hat - A @ c))


def generate_snapshot(model, mu, F=None):
    """Stage-1 snapshot in reduced coordinates: RBLOD coarse solution and reduced correctors."""
    theta = model.thetas(mu)
    u = rblod_solve(model, mu, F)
    parts = [u]
    for rom in model.roms:
        parts.append(rom.coefficients(theta) @ u[rom.element_dofs])
    return np.concatenate(parts)


def _generators(model, layout, psi, S_solver, rho):
    """Residual-space representatives of ``B_q(psi, .)`` for all q, shape ``(dim W, Q)``."""
    Q = model.roms[0].Q if model.roms else 1
    u_H = psi[:layout.N_H]
    coarse = np.zeros((layout.N_H, Q))
    fine = np.zeros((layout.m_off[-1] - layout.N_H, Q))
    sq = np.sqrt(rho)
    for t, rom in enumerate(model.roms):
        c_T = psi[layout.n_off[t]:layout.n_off[t + 1]]
        v_T = u_H[rom.element_dofs]
        lo, hi = layout.m_off[t] - layout.N_H, layout.m_off[t + 1] - layout.N_H
        for q in range(Q):
            contrib = rom.K0[q] @ v_T
            res = -rom.G_hat[q] @ v_T
            if rom.N:
                contrib = contrib - rom.K_rb[q] @ c_T
                res = res + rom.A_hat[q] @ c_T
            np.add.at(coarse[:, q], rom.coarse_dofs, contrib)
            fine[lo:hi, q] = sq * res
    return np.vstack([S_solver.solve(coarse), fine])


def build_residual_basis(model, basis, rho, generators=None, Xi=None, layout=None, S_solver=None):
    """Orthonormal basis of the residual generators and the least-squares data.

    ``generators``/``Xi`` allow incremental updates: only generators of basis
    vectors beyond the ones already in ``generators`` are computed and
    orthonormalized against ``Xi``.

    Returns ``(A_hat, F_hat, Xi, generators)`` with ``generators`` of shape
    ``(dim W, 1 + Q N)`` ordered as the F-generator, then ``(n, q)`` row-major.
    """
    layout = _Layout(model) if layout is None else layout
    S_solver = SPDSolver(model.S, 'coarse Gram') if S_solver is None else S_solver
    W = layout.product(layout.m_off)
    Q = model.roms[0].Q if model.roms else 1
    N = basis.shape[1]
    if generators is None:
        f = np.zeros(layout.m_off[-1])
        f[:layout.N_H] = S_solver.solve(model.F_H)
        generators, Xi = f[:, None], None
    first_new = generators.shape[1] if Xi is not None else 0
    n_done = (generators.shape[1] - 1) // Q
    new = [_generators(model, layout, basis[:, n], S_solver, rho) for n in range(n_done, N)]
    generators = np.hstack([generators] + new)
    Xi, _ = orthonormalize(generators[:, first_new:], product=W, basis=Xi)
    if Xi.shape[1] == 0:
        raise np.linalg.LinAlgError('residual space is empty: the right-hand side vanishes')
    WXi = W @ Xi
    F_hat = WXi.T @ generators[:, 0]
    A_hat = (WXi.T @ generators[:, 1:]).reshape(Xi.shape[1], N, Q).transpose(2, 0, 1)
    return np.ascontiguousarray(A_hat), F_hat, Xi, generators


def train_two_scale_rom(model, train, eps2, rho, max_iter=50, callback=None, raise_on_abort=True):
    """Greedy construction of the reduced two-scale space.

    Each round solves the reduced problem for all training parameters, picks
    the largest ``eta_a``, computes its Stage-1 snapshot and extends the basis.
    Picking a parameter twice raises :class:`GreedyAbort` (or stops, with
    ``raise_on_abort=False``). ``callback(rom)`` is called after every round,
    its return value is stored in ``rom.trace``.
    """
    import time
    t0 = time.perf_counter()
    train = np.atleast_2d(np.asarray(train, dtype=float))
    layout = _Layout(model)
    S_solver = SPDSolver(model.S, 'coarse Gram')
    V = layout.product(layout.n_off)
    gamma = np.sqrt(model.alpha) / C_IH
    basis = np.zeros((layout.n_off[-1], 0))
    A_hat, F_hat, Xi, gens = build_residual_basis(model, basis, rho, layout=layout, S_solver=S_solver)
    rom = TwoScaleROM(A_hat, F_hat, basis, layout.n_off, model.theta, model.alpha, model.beta, rho, gamma,
                      model.eps1, eps2, array_hash(train), model.mesh_signature)
    while True:
        est = np.array([ts_rom_solve(rom, mu)[1] for mu in train])
        i = int(np.argmax(est))
        entry = dict(N=rom.N, M=rom.M, max_estimate=float(est[i]), mu=train[i].tolist())
        if callback is not None:
            entry.update(callback(rom))
        rom.trace.append(entry)
        if est[i] <= eps2:
            break
        if i in rom.selected or len(rom.selected) >= max_iter:
            rom.offline_time = time.perf_counter() - t0
            if not raise_on_abort:
                break
            if i in rom.selected:
                raise GreedyAbort(train[i], est[i], rom.trace)
            raise RuntimeError(f'no convergence to {eps2} within {max_iter} enrichments; trace '
                               f'{[e["max_estimate"] for e in rom.trace]}')
        rom.selected.append(i)
        snapshot = generate_snapshot(model, train[i])
        new_basis, kept = orthonormalize(snapshot[:, None], product=V, basis=basis)
        if not kept:
            rom.offline_time = time.perf_counter() - t0
            if raise_on_abort:
                raise GreedyAbort(train[i], est[i], rom.trace)
            break
        basis = new_basis
        A_hat, F_hat, Xi, gens = build_residual_basis(model, basis, rho, generators=gens, Xi=Xi, layout=layout,
                                                      S_solver=S_solver)
        rom.A_hat, rom.F_hat, rom.basis = A_hat, F_hat, basis
    rom.offline_time = time.perf_counter() - t0
    return rom


def reduced_parts(rom, c):
    """Coarse dofs and per-element Stage-1 coefficients of ``sum_n c_n psi_n``."""
    x = rom.basis @ c
    off = rom.n_offsets
    return x[:off[0]], [x[off[t]:off[t + 1]] for t in range(len(off) - 1)]


def reconstruct_solution(rom, model, c):
    """Two-scale function in full coordinates; needs the retained Stage-1 bases."""
    u_H, parts = reduced_parts(rom, c)
    return TwoScaleVector(u_H, [r.lift(p) for r, p in zip(model.roms, parts)])


_ARRAYS = ('A_hat', 'F_hat', 'basis', 'n_offsets')


def save_two_scale_rom(rom, path):
    meta = dict(alpha=rom.alpha, beta=rom.beta, rho=rom.rho, gamma=rom.gamma, C_IH=C_IH, eps1=rom.eps1,
                eps2=rom.eps2, train_hash=rom.train_hash, mesh_signature=rom.mesh_signature, N=rom.N, M=rom.M,
                trace=rom.trace, selected=[int(s) for s in rom.selected])
    save_container(path, {name: getattr(rom, name) for name in _ARRAYS}, meta)


def load_two_scale_rom(path, theta):
    arrays, meta = load_container(path)
    return TwoScaleROM(theta=theta, alpha=meta['alpha'], beta=meta['beta'], rho=meta['rho'], gamma=meta['gamma'],
                       eps1=meta['eps1'], eps2=meta['eps2'], train_hash=meta['train_hash'],
                       mesh_signature=meta['mesh_signature'], trace=meta['trace'], selected=meta['selected'],
                       **{name: arrays[name] for name in _ARRAYS})
