"""Bilinear (Q1) finite elements on structured blocks of square cells."""

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sparse

from .grid import nested_dissection
from .numerics import SPDSolver

# local node order: (0,0), (1,0), (0,1), (1,1)
K_REF = np.array([[4., -1., -1., -2.],
                  [-1., 4., -2., -1.],
                  [-1., -2., 4., -1.],
                  [-2., -1., -1., 4.]]) / 6.0
M_REF = np.array([[4., 2., 2., 1.],
                  [2., 4., 1., 2.],
                  [2., 1., 4., 2.],
                  [1., 2., 2., 4.]]) / 36.0


class BlockAssembler:
    """Sparsity pattern and coefficient-to-entries maps for an ``nx x ny`` cell block.

    Entries of the stiffness (mass) matrix are linear in the cellwise constant
    coefficient, so ``data = D @ coefficient`` with a fixed sparse ``D``.
    """

    def __init__(self, nx, ny):
        self.nx, self.ny = nx, ny
        self.n_nodes = (nx + 1) * (ny + 1)
        ex, ey = np.meshgrid(np.arange(nx), np.arange(ny))
        ll = (ey * (nx + 1) + ex).ravel()
        conn = np.column_stack([ll, ll + 1, ll + nx + 1, ll + nx + 2])
        n_cells = nx * ny
        rows = np.repeat(conn, 4, axis=1).ravel()
        cols = np.tile(conn, (1, 4)).ravel()
        cells = np.repeat(np.arange(n_cells), 16)
        keys = rows * self.n_nodes + cols
        ukeys, inverse = np.unique(keys, return_inverse=True)
        self.indices = (ukeys % self.n_nodes).astype(np.int32)
        urows = ukeys // self.n_nodes
        self.indptr = np.searchsorted(urows, np.arange(self.n_nodes + 1)).astype(np.int32)
        shape = (len(ukeys), n_cells)
        self.D_stiff = sparse.csr_matrix((np.tile(K_REF.ravel(), n_cells), (inverse, cells)), shape=shape)
        self.D_mass = sparse.csr_matrix((np.tile(M_REF.ravel(), n_cells), (inverse, cells)), shape=shape)

    def entries(self, coefficient, kind='stiffness', scale=1.0):
        D = self.D_stiff if kind == 'stiffness' else self.D_mass
        data = D @ np.asarray(coefficient, dtype=float)
        if scale != 1.0:
            data *= scale
        return data

    def matrix(self, coefficient, kind='stiffness', scale=1.0):
        return self.from_entries(self.entries(coefficient, kind, scale))

    def from_entries(self, data):
        n = self.n_nodes
        return sparse.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(n, n))

    @cached_property
    def _free_pattern(self):
        order = nested_dissection(self.nx, self.ny)
        ids = self.from_entries(np.arange(1, len(self.indices) + 1, dtype=float))
        sub = ids[order][:, order]
        sub.sort_indices()
        return sub.data.astype(np.int64) - 1, sub.indices, sub.indptr, len(order)

    def free_from_entries(self, data):
        """Matrix restricted to interior nodes in nested-dissection order."""
        sel, indices, indptr, n = self._free_pattern
        return sparse.csr_matrix((data[sel], indices.copy(), indptr.copy()), shape=(n, n))


@lru_cache(maxsize=64)
def block_assembler(nx, ny):
    return BlockAssembler(nx, ny)


def interior_nodes(nx, ny):
    ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    ix, iy = ix.ravel(), iy.ravel()
    return np.flatnonzero((ix > 0) & (ix < nx) & (iy > 0) & (iy < ny))


def cell_block(field, n, x0, x1, y0, y1):
    """Cell values of the sub-block ``[x0, x1) x [y0, y1)`` of an ``n x n`` cell field."""
    return np.asarray(field).reshape(n, n)[y0:y1, x0:x1].ravel()


def interpolation_1d(n_fine, n_coarse):
    """Nodal values on ``n_fine`` cells of the hat functions of ``n_coarse`` aligned cells."""
    r = n_fine // n_coarse
    t = np.arange(n_fine + 1) / r
    rows, cols, vals = [], [], []
    for c in range(n_coarse + 1):
        w = 1 - np.abs(t - c)
        idx = np.flatnonzero(w > 0)
        rows.append(idx)
        cols.append(np.full(len(idx), c))
        vals.append(w[idx])
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n_fine + 1, n_coarse + 1))


def prolongation(n_fine_x, n_coarse_x, n_fine_y=None, n_coarse_y=None):
    """Bilinear embedding of coarse node values into fine node values (all nodes)."""
    n_fine_y = n_fine_x if n_fine_y is None else n_fine_y
    n_coarse_y = n_coarse_x if n_coarse_y is None else n_coarse_y
    return sparse.kron(interpolation_1d(n_fine_y, n_coarse_y), interpolation_1d(n_fine_x, n_coarse_x),
                       format='csr')


def _patch_cells(mesh, field, patch, element=None):
    n, r = mesh.n_h, mesh.ratio
    values = cell_block(field, n, patch.ex0 * r, patch.ex1 * r, patch.ey0 * r, patch.ey1 * r)
    if element is not None:
        nx, ny = patch.fine_shape
        ex, ey = mesh.coarse_element_coords(element)
        fx, fy = np.meshgrid(np.arange(nx) + patch.ex0 * r, np.arange(ny) + patch.ey0 * r)
        mask = ((fx // r == ex) & (fy // r == ey)).ravel()
        if not mask.any():
            raise ValueError(f'coarse element {element} does not intersect the patch')
        values = np.where(mask, values, 0.0)
    return values


def patch_stiffness(mesh, field, patch, element=None):
    """Patch stiffness matrix for one coefficient field, as ``(all_nodes, free)``.

    ``all_nodes`` acts on all fine nodes of the closed patch in local row-major
    order, ``free`` on the interior nodes in ``patch.free`` order. With
    ``element`` the integral is restricted to that coarse element.
    """
    asm = block_assembler(*patch.fine_shape)
    data = asm.entries(_patch_cells(mesh, field, patch, element))
    return asm.from_entries(data), asm.free_from_entries(data)


def assemble_stiffness_q(mesh, field, patch=None, element=None, free_only=True):
    """Stiffness matrix ``(field grad phi_i, grad phi_j)`` on the whole mesh, on a patch,
    or on a patch with the integration restricted to the coarse element ``element``.

    Global matrices use the interior fine dof numbering of the mesh; patch
    matrices use ``patch.free``. With ``free_only=False`` all nodes are kept.
    """
    if patch is not None:
        full, free = patch_stiffness(mesh, field, patch, element)
        return free if free_only else full
    if element is not None:
        raise ValueError('element restriction requires a patch')
    n = mesh.n_h
    K = block_assembler(n, n).matrix(field)
    if free_only:
        free = mesh.fine_free_nodes
        K = K[free][:, free]
    return K


def assemble_load(mesh, level='fine', free_only=True):
    """Load vector ``F(phi_i) = int phi_i`` for ``f = 1``."""
    n = mesh.n_h if level == 'fine' else mesh.n_H
    M = block_assembler(n, n).matrix(np.ones(n * n), kind='mass', scale=1.0 / n ** 2)
    F = np.asarray(M.sum(axis=1)).ravel()
    if free_only:
        F = F[interior_nodes(n, n)]
    return F


def assemble_mass(mesh, level='fine', free_only=True):
    n = mesh.n_h if level == 'fine' else mesh.n_H
    M = block_assembler(n, n).matrix(np.ones(n * n), kind='mass', scale=1.0 / n ** 2)
    if free_only:
        free = interior_nodes(n, n)
        M = M[free][:, free]
    return M


def assemble_h1_gram(mesh, level='coarse', patch=None):
    """Gram matrix of the H^1 seminorm inner product on interior dofs."""
    if level == 'coarse':
        n = mesh.n_H
        free = interior_nodes(n, n)
        return block_assembler(n, n).matrix(np.ones(n * n))[free][:, free]
    return assemble_stiffness_q(mesh, np.ones(mesh.n_fine_elements), patch=patch)


@dataclass(eq=False)
class AssembledForms:
    mesh: object
    coefficient: object
    K_q: list          # fine stiffness components on interior fine dofs
    M_h: object        # fine mass matrix on interior fine dofs
    S: object          # coarse H^1 Gram matrix on interior coarse dofs
    M_H: object        # coarse mass matrix on interior coarse dofs
    F_h: np.ndarray
    F_H: np.ndarray
    P: object          # interior coarse dofs -> interior fine dofs

    def stiffness(self, mu):
        th = self.coefficient.thetas(mu)
        A = th[0] * self.K_q[0]
        for t, K in zip(th[1:], self.K_q[1:]):
            A = A + t * K
        return A.tocsr()


def assemble_forms(mesh, coefficient):
    K_q = [assemble_stiffness_q(mesh, A_q) for A_q in coefficient.fields]
    P = prolongation(mesh.n_h, mesh.n_H)[mesh.fine_free_nodes][:, mesh.coarse_free_nodes].tocsr()
    return AssembledForms(mesh, coefficient, K_q, assemble_mass(mesh, 'fine'), assemble_h1_gram(mesh, 'coarse'),
                          assemble_mass(mesh, 'coarse'), assemble_load(mesh, 'fine'), assemble_load(mesh, 'coarse'), P)


def fem_reference_solve(forms, mu):
    """Galerkin solution on the full fine mesh (interior dofs)."""
    return SPDSolver(forms.stiffness(mu), role='fine stiffness').solve(forms.F_h)
