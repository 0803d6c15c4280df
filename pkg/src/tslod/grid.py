"""Aligned structured coarse/fine quadrilateral meshes on the unit square and element patches.

Nodes and elements are numbered row-major with x running fastest.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np


def _interior_numbering(n):
    """Map node ids of an ``n x n`` element grid to interior dof ids (-1 on the boundary)."""
    ix, iy = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    ix, iy = ix.ravel(), iy.ravel()
    interior = (ix > 0) & (ix < n) & (iy > 0) & (iy < n)
    dof = np.full((n + 1) ** 2, -1, dtype=np.int64)
    dof[interior] = np.arange(interior.sum())
    return dof


def _element_nodes(n):
    """Element to node connectivity in local order (0,0), (1,0), (0,1), (1,1)."""
    ex, ey = np.meshgrid(np.arange(n), np.arange(n))
    ll = (ey * (n + 1) + ex).ravel()
    return np.column_stack([ll, ll + 1, ll + n + 1, ll + n + 2])


@dataclass(frozen=True)
class MeshHierarchy:
    n_H: int
    n_h: int

    def __post_init__(self):
        if self.n_H < 2:
            raise ValueError(f'need at least 2 coarse elements per axis, got n_H={self.n_H}')
        if self.n_h % self.n_H:
            raise ValueError(f'fine mesh must be aligned with the coarse mesh: '
                             f'n_h={self.n_h} is not a multiple of n_H={self.n_H}')

    @property
    def H(self):
        return 1.0 / self.n_H

    @property
    def h(self):
        return 1.0 / self.n_h

    @property
    def ratio(self):
        """Fine elements per coarse element and axis."""
        return self.n_h // self.n_H

    @property
    def n_coarse_elements(self):
        return self.n_H ** 2

    @property
    def n_fine_elements(self):
        return self.n_h ** 2

    @property
    def n_coarse_nodes(self):
        return (self.n_H + 1) ** 2

    @property
    def n_fine_nodes(self):
        return (self.n_h + 1) ** 2

    @property
    def N_H(self):
        return (self.n_H - 1) ** 2

    @property
    def N_h(self):
        return (self.n_h - 1) ** 2

    @cached_property
    def coarse_dof(self):
        return _interior_numbering(self.n_H)

    @cached_property
    def fine_dof(self):
        return _interior_numbering(self.n_h)

    @cached_property
    def coarse_free_nodes(self):
        return np.flatnonzero(self.coarse_dof >= 0)

    @cached_property
    def fine_free_nodes(self):
        return np.flatnonzero(self.fine_dof >= 0)

    @cached_property
    def coarse_element_nodes(self):
        return _element_nodes(self.n_H)

    @cached_property
    def fine_element_nodes(self):
        return _element_nodes(self.n_h)

    @cached_property
    def fine_to_coarse(self):
        """Coarse element containing each fine element."""
        ex, ey = np.meshgrid(np.arange(self.n_h), np.arange(self.n_h))
        r = self.ratio
        return ((ey // r) * self.n_H + ex // r).ravel()

    def coarse_element_coords(self, T):
        return T % self.n_H, T // self.n_H

    def signature(self):
        return f'{self.n_H}x{self.n_h}'


@dataclass(frozen=True)
class Patch:
    """Patch ``U_k(T)``: a clipped block of coarse elements around ``T``.

    ``ex0:ex1`` and ``ey0:ey1`` are half-open coarse element ranges. All fine
    node indices are local to the rectangle of fine nodes covering the patch.
    """
    mesh: MeshHierarchy = field(repr=False)
    T: int
    k: int
    ex0: int
    ex1: int
    ey0: int
    ey1: int

    @property
    def shape(self):
        """Patch size in coarse elements ``(nx, ny)``."""
        return self.ex1 - self.ex0, self.ey1 - self.ey0

    @property
    def fine_shape(self):
        r = self.mesh.ratio
        return (self.ex1 - self.ex0) * r, (self.ey1 - self.ey0) * r

    @property
    def boundary_sides(self):
        """Which sides (left, right, bottom, top) of the patch lie on the domain boundary."""
        n = self.mesh.n_H
        return self.ex0 == 0, self.ex1 == n, self.ey0 == 0, self.ey1 == n

    @cached_property
    def elements(self):
        ex, ey = np.meshgrid(np.arange(self.ex0, self.ex1), np.arange(self.ey0, self.ey1))
        return (ey * self.mesh.n_H + ex).ravel()

    @cached_property
    def fine_elements(self):
        r, n = self.mesh.ratio, self.mesh.n_h
        fx, fy = np.meshgrid(np.arange(self.ex0 * r, self.ex1 * r), np.arange(self.ey0 * r, self.ey1 * r))
        return (fy * n + fx).ravel()

    @cached_property
    def fine_nodes(self):
        """Global fine node ids of all nodes in the closed patch (local order)."""
        r, n = self.mesh.ratio, self.mesh.n_h
        fx, fy = np.meshgrid(np.arange(self.ex0 * r, self.ex1 * r + 1), np.arange(self.ey0 * r, self.ey1 * r + 1))
        return (fy * (n + 1) + fx).ravel()

    @cached_property
    def free(self):
        """Local indices of fine nodes strictly inside the patch (zero trace on the patch boundary).

        The order is a nested dissection of the node grid; all patch-level vectors
        and matrices use it.
        """
        return nested_dissection(*self.fine_shape)

    @property
    def n_free(self):
        return len(self.free)

    @cached_property
    def free_global(self):
        """Global fine interior dof ids of the free patch nodes."""
        return self.mesh.fine_dof[self.fine_nodes[self.free]]

    @cached_property
    def coarse_nodes(self):
        """Global coarse node ids of the closed patch (local order)."""
        n = self.mesh.n_H
        cx, cy = np.meshgrid(np.arange(self.ex0, self.ex1 + 1), np.arange(self.ey0, self.ey1 + 1))
        return (cy * (n + 1) + cx).ravel()

    @cached_property
    def coarse_rows(self):
        """Local positions (in ``coarse_nodes``) of the coarse nodes interior to the domain."""
        return np.flatnonzero(self.mesh.coarse_dof[self.coarse_nodes] >= 0)

    @cached_property
    def coarse_row_dofs(self):
        """Global interior coarse dofs of the basis functions overlapping the patch."""
        return self.mesh.coarse_dof[self.coarse_nodes[self.coarse_rows]]

    @cached_property
    def element_nodes(self):
        """Global coarse node ids of ``T`` in local order (0,0), (1,0), (0,1), (1,1)."""
        return self.mesh.coarse_element_nodes[self.T]

    @cached_property
    def element_dofs(self):
        """Interior coarse dofs ``i_{T,1..J_T}`` of the basis functions supported on ``T``."""
        d = self.mesh.coarse_dof[self.element_nodes]
        return d[d >= 0]

    @property
    def J_T(self):
        return len(self.element_dofs)

    @cached_property
    def element_dof_rows(self):
        """Positions of ``element_dofs`` within ``coarse_row_dofs``."""
        lookup = {d: i for i, d in enumerate(self.coarse_row_dofs)}
        return np.array([lookup[d] for d in self.element_dofs], dtype=np.int64)


@lru_cache(maxsize=32)
def _nested_dissection(nx, ny, leaf):
    blocks = []

    def split(x0, x1, y0, y1):
        # inclusive ranges of interior node coordinates
        if x1 < x0 or y1 < y0:
            return
        if (x1 - x0 + 1) * (y1 - y0 + 1) <= leaf * leaf:
            X, Y = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
            blocks.append((X.ravel(), Y.ravel()))
        elif x1 - x0 >= y1 - y0:
            m = (x0 + x1) // 2
            split(x0, m - 1, y0, y1)
            split(m + 1, x1, y0, y1)
            Y = np.arange(y0, y1 + 1)
            blocks.append((np.full_like(Y, m), Y))
        else:
            m = (y0 + y1) // 2
            split(x0, x1, y0, m - 1)
            split(x0, x1, m + 1, y1)
            X = np.arange(x0, x1 + 1)
            blocks.append((X, np.full_like(X, m)))

    split(1, nx - 1, 1, ny - 1)
    if not blocks:
        return np.zeros(0, dtype=np.int64)
    X = np.concatenate([b[0] for b in blocks])
    Y = np.concatenate([b[1] for b in blocks])
    order = Y * (nx + 1) + X
    order.flags.writeable = False
    return order


def nested_dissection(nx, ny, leaf=8):
    """Interior nodes of an ``nx x ny`` cell block, ordered by recursive bisection.

    Separator lines come after the two halves they split, which keeps the fill
    of sparse factorizations of 5/9-point stencils low.
    """
    return _nested_dissection(int(nx), int(ny), int(leaf))


def patch_elements(mesh, T, k):
    """Return the patch ``U_k(T)`` of coarse element ``T``."""
    if not 0 <= T < mesh.n_coarse_elements:
        raise ValueError(f'coarse element index {T} out of range')
    if k < 0:
        raise ValueError('oversampling radius must be nonnegative')
    ex, ey = mesh.coarse_element_coords(T)
    n = mesh.n_H
    return Patch(mesh, int(T), int(k), max(ex - k, 0), min(ex + k + 1, n), max(ey - k, 0), min(ey + k + 1, n))


def overlap_constant(k):
    """Maximal number of overlapping element patches, ``(2k+1)^2`` on quadrilateral grids."""
    if k < 0:
        raise ValueError('k must be nonnegative')
    return (2 * k + 1) ** 2


def choose_oversampling(H):
    """Smallest integer ``k`` with ``k > |ln H|``."""
    if not 0 < H < 1:
        raise ValueError('mesh size must lie in (0, 1)')
    return math.floor(abs(math.log(H))) + 1
