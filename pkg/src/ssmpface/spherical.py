"""Spherical signals on the equiangular (theta, phi) grid."""

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, ContractError, ZeroNormError


@dataclass(frozen=True)
class SphereGrid:
    """Equiangular grid: theta_i = (2i+1)pi/(2 n_theta), phi_j = 2 pi j / n_phi."""

    n_theta: int = 64
    n_phi: int = 64

    def __post_init__(self):
        if self.n_theta < 1 or self.n_phi < 1:
            raise ConfigurationError("sphere grid needs positive dimensions")

    @cached_property
    def theta(self):
        return (2 * np.arange(self.n_theta) + 1) * np.pi / (2 * self.n_theta)

    @cached_property
    def phi(self):
        return 2 * np.pi * np.arange(self.n_phi) / self.n_phi

    @cached_property
    def weights(self):
        w = np.sin(self.theta)[:, None] * (np.pi / self.n_theta) * (2 * np.pi / self.n_phi)
        w = np.broadcast_to(w, self.shape).copy()
        w.setflags(write=False)
        return w

    @property
    def shape(self):
        return (self.n_theta, self.n_phi)

    @property
    def step(self):
        return np.pi / self.n_theta

    @cached_property
    def unit_vectors(self):
        """(n_theta, n_phi, 3) Cartesian directions of the grid nodes."""
        t, p = np.meshgrid(self.theta, self.phi, indexing="ij")
        return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)


@dataclass(frozen=True, eq=False)
class SphericalSignal:
    grid: SphereGrid
    values: np.ndarray
    coverage: np.ndarray = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ContractError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        cov = np.ones(v.shape, bool) if self.coverage is None else np.array(self.coverage, bool)
        v.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "coverage", cov)

    def with_values(self, values, coverage=None):
        return SphericalSignal(self.grid, values, self.coverage if coverage is None else coverage)

    def __add__(self, other):
        _same_grid(self, other)
        return SphericalSignal(self.grid, self.values + other.values, self.coverage | other.coverage)

    def __sub__(self, other):
        _same_grid(self, other)
        return SphericalSignal(self.grid, self.values - other.values, self.coverage | other.coverage)

    def __mul__(self, c):
        return SphericalSignal(self.grid, self.values * c, self.coverage)

    __rmul__ = __mul__


def _same_grid(f, g):
    if f.grid != g.grid:
        raise ContractError(f"grid mismatch: {f.grid} vs {g.grid}")


def to_spherical_coords(points, center):
    """(r, theta, phi) of each point about ``center``.

    theta = arccos(dz / r) in [0, pi]; phi = atan2(dy, dx) in [-pi, pi).
    """
    d = np.asarray(points, dtype=float).reshape(-1, 3) - np.asarray(center, dtype=float)
    r = np.linalg.norm(d, axis=1)
    if np.any(r == 0):
        raise ZeroNormError("a point coincides with the projection centre")
    theta = np.arccos(np.clip(d[:, 2] / r, -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    phi = np.where(phi >= np.pi, phi - 2 * np.pi, phi)
    return np.column_stack([r, theta, phi])


def from_spherical_coords(samples, center):
    r, t, p = np.asarray(samples, dtype=float).T
    st = np.sin(t)
    return np.column_stack([r * st * np.cos(p), r * st * np.sin(p), r * np.cos(t)]) + center


def _directions(theta, phi):
    st = np.sin(theta)
    return np.column_stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])


def resample_to_grid(samples, grid, k=4, cutoff_steps=3.0):
    """k-nearest-neighbour average of scattered (r, theta, phi) samples on the grid.

    Distances are geodesic; a node whose k-th neighbour is more than
    ``cutoff_steps`` grid steps away is marked uncovered and set to 0.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1, 3)
    if k < 1 or len(samples) < k:
        raise ConfigurationError(f"need at least k={k} samples, got {len(samples)}")
    # canonical order so the result does not depend on input ordering
    samples = samples[np.lexsort(samples.T[::-1])]
    tree = cKDTree(_directions(samples[:, 1], samples[:, 2]))
    nodes = grid.unit_vectors.reshape(-1, 3)
    chord, idx = tree.query(nodes, k=k)
    if k == 1:
        chord, idx = chord[:, None], idx[:, None]
    angle = 2 * np.arcsin(np.clip(chord[:, -1] / 2, 0, 1))
    covered = angle <= cutoff_steps * grid.step
    values = samples[idx, 0].mean(axis=1)
    values = np.where(covered, values, 0.0)
    return SphericalSignal(grid, values.reshape(grid.shape), covered.reshape(grid.shape))


def sphere_inner(f, g):
    """Quadrature of the L2(S^2) inner product: sum f g sin(theta) dtheta dphi."""
    _same_grid(f, g)
    return float(np.dot(f.values.ravel(), (g.values * f.grid.weights).ravel()))


def sphere_norm(f):
    return math.sqrt(max(sphere_inner(f, f), 0.0))


def normalize(f):
    n = sphere_norm(f)
    if n == 0:
        raise ZeroNormError("cannot normalise a zero signal")
    return f * (1.0 / n)


def projection_center(cloud_points):
    """Centroid pushed back (away from the sensor) by half the cloud's depth extent."""
    p = np.asarray(cloud_points, dtype=float)
    c = p.mean(axis=0)
    depth = p[:, 2].max() - p[:, 2].min()
    return c + np.array([0.0, 0.0, 0.5 * depth])


def cloud_to_signal(points, grid, center, k=4, cutoff_steps=3.0):
    return resample_to_grid(to_spherical_coords(points, center), grid, k, cutoff_steps)


def conform_to(signal, reference):
    """Put ``signal`` on the support of ``reference``.

    Cells outside the reference coverage are zeroed; reference cells the
    signal does not cover take the reference value.
    """
    _same_grid(signal, reference)
    ref = reference.coverage
    values = np.where(ref, np.where(signal.coverage, signal.values, reference.values), 0.0)
    return SphericalSignal(signal.grid, values, ref.copy())
