"""Overcomplete dictionary of anisotropic Gaussian atoms on the sphere.

An atom is the generating Gaussian exp(-tan^2(theta/2)) moved to
(tau, nu), rotated in-plane by psi and squeezed by scales (alpha, beta).
Scale 1 is the widest atom (about half the sphere); larger scales shrink
the atom along the corresponding local axis.
"""

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError
from .spherical import SphereGrid, SphericalSignal

# relative gap below which two lattice scores count as a tie
TIE_RTOL = 1e-9


class AtomIndex(NamedTuple):
    tau: float    # elevation of the atom centre, [0, pi]
    nu: float     # azimuth of the atom centre, [-pi, pi)
    psi: float    # in-plane rotation, [-pi, pi)
    alpha: float  # scale along the local x axis, >= 1
    beta: float   # scale along the local y axis, >= 1


def generating_gaussian(theta, phi=0.0):
    """exp(-tan^2(theta/2)), independent of ``phi``; 0 at theta = pi."""
    theta = np.asarray(theta, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        t2 = np.tan(theta / 2.0) ** 2
    out = np.where(theta >= np.pi, 0.0, np.exp(-t2))
    return float(out) if out.ndim == 0 else out


def rotation_zyz(nu, tau, psi):
    """R = Rz(nu) Ry(tau) Rz(psi)."""
    def rz(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    c, s = math.cos(tau), math.sin(tau)
    ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return rz(nu) @ ry @ rz(psi)


def _atom_values(gamma, grid):
    """Unnormalised atom samples on ``grid``."""
    rot = rotation_zyz(gamma.nu, gamma.tau, gamma.psi)
    local = grid.unit_vectors @ rot  # rows are R^T w
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    # tan^2(theta'/2) [(a cos phi')^2 + (b sin phi')^2] = (a^2 x^2 + b^2 y^2) / (1 + z)^2
    num = gamma.alpha ** 2 * x * x + gamma.beta ** 2 * y * y
    den = (1.0 + z) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = num / den
    arg = np.where(den > 0, arg, np.inf)
    return np.exp(-arg)


def _normalise(values, grid):
    return values / math.sqrt(float(np.sum(values * values * grid.weights)))


@lru_cache(maxsize=4096)
def _cached_atom(gamma, grid):
    v = _normalise(_atom_values(gamma, grid), grid)
    v.setflags(write=False)
    return v


def synthesize_atom(gamma, grid):
    """Unit-norm atom ``gamma`` sampled on ``grid``."""
    gamma = AtomIndex(*map(float, gamma))
    return SphericalSignal(grid, _cached_atom(gamma, grid))


@dataclass(frozen=True)
class DictionarySpec:
    n_pos: int = 16
    n_rot: int = 8
    scale_min: float = 1.0
    scale_max: float = 4.0
    scales_per_octave: int = 1
    grid: SphereGrid = SphereGrid(64, 64)
    collapse_isotropic: bool = False  # single-scale dictionaries need only psi = 0

    def __post_init__(self):
        if self.n_pos < 1 or self.n_rot < 1 or self.scales_per_octave < 1:
            raise ConfigurationError("dictionary sizes must be positive")
        if not 1.0 <= self.scale_min <= self.scale_max:
            raise ConfigurationError("need 1 <= scale_min <= scale_max")
        if self.scale_max > self.n_pos / 2:
            raise ConfigurationError(
                f"scale_max={self.scale_max} exceeds half the position resolution ({self.n_pos / 2})")

    @classmethod
    def preset(cls, name, grid=None):
        if name == "paper":
            return cls(128, 128, 1.0, 64.0, 3, grid or SphereGrid(128, 128))
        if name == "desk":
            return cls(16, 8, 1.0, 4.0, 1, grid or SphereGrid(64, 64))
        raise ConfigurationError(f"unknown dictionary preset {name!r}")

    @property
    def taus(self):
        if self.n_pos == 1:
            return np.array([0.0])
        return np.linspace(0.0, np.pi, self.n_pos)

    @property
    def nus(self):
        return -np.pi + 2 * np.pi * np.arange(self.n_pos) / self.n_pos

    @property
    def psis(self):
        n = 1 if self.isotropic_only and self.collapse_isotropic else self.n_rot
        return -np.pi + 2 * np.pi * np.arange(n) / n

    @property
    def scales(self):
        n = int(round(self.scales_per_octave * math.log2(self.scale_max / self.scale_min)))
        return self.scale_min * 2.0 ** (np.arange(n + 1) / self.scales_per_octave)

    @property
    def isotropic_only(self):
        return len(self.scales) == 1

    @property
    def shape(self):
        """Lattice shape in enumeration order (tau, nu, psi, alpha, beta)."""
        ns = len(self.scales)
        return (len(self.taus), len(self.nus), len(self.psis), ns, ns)

    @property
    def size(self):
        return int(np.prod(self.shape))

    def atom_at(self, flat_index):
        i, j, k, a, b = np.unravel_index(flat_index, self.shape)
        s = self.scales
        return AtomIndex(float(self.taus[i]), float(self.nus[j]), float(self.psis[k]),
                         float(s[a]), float(s[b]))


def enumerate_atoms(spec):
    """Lattice atoms in deterministic (tau, nu, psi, alpha, beta) order."""
    s = spec.scales
    for t, n, p, a, b in itertools.product(spec.taus, spec.nus, spec.psis, s, s):
        yield AtomIndex(float(t), float(n), float(p), float(a), float(b))


# --------------------------------------------------------------------------
# lattice search

@lru_cache(maxsize=4)
def _bank(spec):
    """Atoms at nu = 0 for every (tau, psi, alpha, beta) plus their FFT along phi.

    Moving an atom in nu is a circular shift of the phi axis, so correlations
    over the whole nu axis come from one FFT per bank atom.
    """
    grid = spec.grid
    shifts = spec.nus * grid.n_phi / (2 * np.pi)
    if not np.allclose(shifts, np.rint(shifts), atol=1e-9):
        raise ConfigurationError(
            f"n_phi={grid.n_phi} must be a multiple of n_pos={spec.n_pos} for the shifted search")
    s = spec.scales
    combos = list(itertools.product(spec.taus, spec.psis, s, s))
    atoms = np.empty((len(combos),) + grid.shape)
    for m, (t, p, a, b) in enumerate(combos):
        atoms[m] = _normalise(_atom_values(AtomIndex(t, 0.0, p, a, b), grid), grid)
    spectra = np.fft.rfft(atoms, axis=-1)
    return np.rint(shifts).astype(int) % grid.n_phi, spectra


def lattice_correlations(residuals, spec):
    """Inner products of every residual with every lattice atom.

    Returns an array of shape ``(n_signals,) + spec.shape``.
    """
    grid = spec.grid
    shifts, spectra = _bank(spec)
    r = np.stack([np.asarray(getattr(x, "values", x), dtype=float) for x in residuals])
    xw = np.fft.rfft(r * grid.weights, axis=-1)  # (n, n_theta, F)
    # sum over theta rows per frequency: (n, M, F)
    cross = np.einsum("nif,mif->nmf", xw, spectra.conj(), optimize=True)
    corr = np.fft.irfft(cross, n=grid.n_phi, axis=-1)[:, :, shifts]  # (n, M, n_nu)
    nt, nn, npsi, na, nb = spec.shape
    corr = corr.reshape(len(r), nt, npsi, na, nb, nn)
    return np.moveaxis(corr, -1, 2)


def _first_max(scores):
    flat = scores.ravel()
    top = flat.max()
    tol = TIE_RTOL * max(abs(top), np.finfo(float).tiny)
    return int(np.flatnonzero(flat >= top - tol)[0])


def selection_scores(correlations, criterion="l2"):
    if criterion == "l2":
        return np.sum(correlations ** 2, axis=0)
    if criterion == "l1":
        return np.sum(np.abs(correlations), axis=0)
    raise ConfigurationError(f"unknown selection criterion {criterion!r}")


def best_atom(residuals, spec, criterion="l2"):
    """Lattice atom maximising sum_i <r_i, g>^2 (or sum_i |<r_i, g>|).

    Returns ``(gamma, inner_products)`` or ``(None, zeros)`` when all residuals
    vanish. The inner products are recomputed against the synthesised atom.
    """
    residuals = list(residuals)
    if not residuals:
        raise ValueError("best_atom needs at least one residual")
    scores = selection_scores(lattice_correlations(residuals, spec), criterion)
    if not np.any(scores > 0):
        return None, np.zeros(len(residuals))
    gamma = spec.atom_at(_first_max(scores))
    atom = synthesize_atom(gamma, spec.grid)
    wg = (atom.values * spec.grid.weights).ravel()
    inner = np.array([float(np.dot(np.asarray(getattr(x, "values", x)).ravel(), wg))
                      for x in residuals])
    return gamma, inner
