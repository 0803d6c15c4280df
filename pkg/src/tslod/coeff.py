"""Parameter-separable diffusion coefficients ``A_mu = sum_q theta_q(mu) A_q``.

Every ``A_q`` is a scalar field that is constant on each fine cell, stored as a
flat array in row-major fine-element order.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class EllipticityError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralBounds:
    alpha: float
    beta: float

    @property
    def kappa(self):
        return self.beta / self.alpha


@dataclass(frozen=True, eq=False)
class SeparableCoefficient:
    name: str
    fields: np.ndarray                    # (Q, n_fine_elements)
    theta: Callable = field(repr=False)   # mu -> array of Q coefficients
    bounds: np.ndarray                    # (p, 2) parameter box
    seed: int = 0

    @property
    def Q(self):
        return self.fields.shape[0]

    @property
    def p(self):
        return self.bounds.shape[0]

    def parameter(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.shape != (self.p,):
            raise ValueError(f'{self.name} expects a parameter of length {self.p}, got {mu.shape}')
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        if np.any(mu < lo - 1e-12) or np.any(mu > hi + 1e-12):
            raise ValueError(f'parameter {mu} outside of the box {self.bounds.tolist()}')
        return mu

    def thetas(self, mu):
        return np.asarray(self.theta(self.parameter(mu)), dtype=float)


def evaluate_coefficient(c, mu):
    """Cellwise values of ``A_mu``."""
    th = c.thetas(mu)
    values = th @ c.fields
    bad = np.flatnonzero(values <= 0)
    if len(bad):
        raise EllipticityError(f'coefficient {c.name} is not positive at fine cell {bad[0]} for mu={mu}')
    return values


def estimate_spectral_bounds(c, train):
    """Ellipticity and continuity bounds of ``A_mu`` over a set of parameters."""
    train = list(train)
    if not train:
        raise ValueError('training set is empty')
    lo, hi = np.inf, -np.inf
    for mu in train:
        th = c.thetas(mu)
        values = th @ c.fields
        lo, hi = min(lo, values.min()), max(hi, values.max())
    if lo <= 0:
        raise EllipticityError(f'coefficient {c.name} has nonpositive minimum {lo} on the training set')
    return SpectralBounds(float(lo), float(hi))


def parameter_bounds(c, mu):
    """Exact ellipticity/continuity constants for a single parameter."""
    return estimate_spectral_bounds(c, [mu])


def cell_centers(n):
    x = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(x, x)
    return X.ravel(), Y.ravel()


def truncated_normal(rng, lo, hi, size):
    """Normal samples centred in ``[lo, hi]`` with std ``(hi - lo)/4``, resampled until inside."""
    mean, std = 0.5 * (lo + hi), 0.25 * (hi - lo)
    out = rng.normal(mean, std, size)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, std, bad.sum())
        bad = (out < lo) | (out > hi)
    return out


def _tc1_fields(mesh, seed):
    # Background: blocky microstructure in [1, 1.6] on 4x4 fine-cell blocks of a 256 grid.
    # Channels: wavy horizontal and vertical strips with value 13 on a unit background.
    X, Y = cell_centers(mesh.n_h)
    rng = np.random.default_rng(seed)
    blocks = rng.uniform(1.0, 1.6, (64, 64))
    bg = blocks[np.minimum((Y * 64).astype(int), 63), np.minimum((X * 64).astype(int), 63)]
    wavy_h = np.abs(np.sin(2 * np.pi * (6 * Y + 0.35 * np.sin(2 * np.pi * 3 * X)))) < 0.12
    wavy_v = np.abs(np.sin(2 * np.pi * (5 * X + 0.25 * np.sin(2 * np.pi * 2 * Y + 1.0)))) < 0.10
    inclusions = (np.sin(2 * np.pi * 11 * X) * np.sin(2 * np.pi * 11 * Y)) > 0.85
    channel = np.where(wavy_h | (wavy_v & (Y > 0.3)) | inclusions, 13.0, 1.0)
    return np.stack([bg, channel])


def _tc2_fields(mesh, seed):
    n, r = mesh.n_h, mesh.ratio
    fields = np.empty((3, n, n))
    # local cell-centre coordinates in [0, 1) within a coarse element
    loc = (np.arange(r) + 0.5) / r
    lx, ly = np.meshgrid(loc, loc)
    for T in range(mesh.n_coarse_elements):
        rng = np.random.default_rng([seed, T])
        ex, ey = mesh.coarse_element_coords(T)
        sl = np.s_[ey * r:(ey + 1) * r, ex * r:(ex + 1) * r]
        # A_1: regular square particles, A_2: diagonal stripes, A_3: random ellipses
        m1 = (np.abs(((lx * 4) % 1) - 0.5) < 0.2) & (np.abs(((ly * 4) % 1) - 0.5) < 0.2)
        m2 = ((lx + ly) * 3 % 1) < 0.3
        m3 = np.zeros_like(lx, dtype=bool)
        for _ in range(rng.integers(3, 7)):
            cx, cy = rng.uniform(0, 1, 2)
            ax, ay = rng.uniform(0.06, 0.2, 2)
            m3 |= ((lx - cx) / ax) ** 2 + ((ly - cy) / ay) ** 2 < 1.0
        for q, mask in enumerate((m1, m2, m3)):
            vals = np.where(mask, truncated_normal(rng, 1.0, 1.2, mask.shape),
                            truncated_normal(rng, 0.03, 0.11, mask.shape))
            fields[q][sl] = vals
    return fields.reshape(3, -1)


def _thermal_block_fields(mesh, blocks=2):
    X, Y = cell_centers(mesh.n_h)
    bx = np.minimum((X * blocks).astype(int), blocks - 1)
    by = np.minimum((Y * blocks).astype(int), blocks - 1)
    idx = by * blocks + bx
    return np.stack([(idx == q).astype(float) for q in range(blocks ** 2)])


PROBLEMS = ('tc1_analog', 'tc2_analog', 'constant', 'thermal_block')


def _theta_blend(mu):
    return np.array([1 - mu[0] / 5, mu[0] / 5])


def _theta_identity(mu):
    return np.array(mu, dtype=float)


def _theta_one(mu):
    return np.ones(1)


def make_problem(name, mesh, seed=0):
    """Build one of the built-in coefficients on ``mesh``."""
    if name == 'tc1_analog':
        return SeparableCoefficient(name, _tc1_fields(mesh, seed), _theta_blend,
                                    np.array([[0.0, 5.0]]), seed)
    if name == 'tc2_analog':
        return SeparableCoefficient(name, _tc2_fields(mesh, seed), _theta_identity,
                                    np.array([[1.0, 5.0]] * 3), seed)
    if name == 'constant':
        return SeparableCoefficient(name, np.ones((1, mesh.n_fine_elements)), _theta_one,
                                    np.array([[0.0, 1.0]]), seed)
    if name == 'thermal_block':
        return SeparableCoefficient(name, _thermal_block_fields(mesh), _theta_identity,
                                    np.array([[0.1, 1.0]] * 4), seed)
    raise ValueError(f'unknown problem {name!r}; available: {", ".join(PROBLEMS)}')


def training_set(c, counts):
    """Equidistant tensor grid with ``counts[i]`` points along parameter axis ``i``."""
    counts = np.broadcast_to(np.atleast_1d(counts), (c.p,))
    axes = [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(c.bounds, counts)]
    grid = np.meshgrid(*axes, indexing='ij')
    return np.column_stack([g.ravel() for g in grid])


def random_parameters(c, count, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(c.bounds[:, 0], c.bounds[:, 1], (int(count), c.p))


def export_field(values, mesh, path):
    """Write a per-cell field as an ``n_h x n_h`` CSV grid (row 0 is y = 0)."""
    np.savetxt(path, np.asarray(values).reshape(mesh.n_h, mesh.n_h), delimiter=',')
