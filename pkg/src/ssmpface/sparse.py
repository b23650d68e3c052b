"""Simultaneous matching pursuit on the sphere, coefficient encoding and PCA."""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dictionary import AtomIndex, best_atom, synthesize_atom
from .errors import ConfigurationError, ContractError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SparseSupport:
    """Selected atoms (in selection order) and their samples as columns."""

    atoms: tuple
    grid: object
    synthesis: np.ndarray = field(default=None)

    def __post_init__(self):
        atoms = tuple(AtomIndex(*map(float, a)) for a in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if self.synthesis is None:
            cols = [synthesize_atom(a, self.grid).values.ravel() for a in atoms]
            phi = np.column_stack(cols) if cols else np.zeros((self.grid.n_theta * self.grid.n_phi, 0))
            phi.setflags(write=False)
            object.__setattr__(self, "synthesis", phi)

    def __len__(self):
        return len(self.atoms)

    def weighted(self):
        """Columns premultiplied by the quadrature weights (used for inner products)."""
        return self.synthesis * self.grid.weights.ravel()[:, None]


@dataclass
class SsmpResult:
    support: SparseSupport
    coefficients: np.ndarray       # K x n
    residual_energies: list        # sum_i ||r_i||^2 after each iteration
    initial_energy: float
    residuals: list = field(default=None, repr=False)


def _values(signal):
    return np.asarray(getattr(signal, "values", signal), dtype=float).ravel()


def _energy(r, w):
    return float(np.dot(r, r * w))


def _mp_step(residual, atom, weighted_atom):
    """One matching-pursuit update; returns (coefficient, new residual)."""
    c = float(np.dot(residual, weighted_atom))
    return c, residual - c * atom


def ssmp_select(signals, spec, n_atoms, criterion="l2", keep_residuals=False):
    """Greedy common support of ``n_atoms`` atoms for all ``signals``.

    Each iteration picks the lattice atom maximising the summed squared
    correlation with the current residuals, then applies the matching-pursuit
    update to every residual. Stops early if every residual vanishes.
    """
    if n_atoms < 1:
        raise ConfigurationError("n_atoms must be at least 1")
    signals = list(signals)
    grid = spec.grid
    for s in signals:
        if getattr(s, "grid", grid) != grid:
            raise ContractError("all signals must live on the dictionary grid")
    w = grid.weights.ravel()
    residuals = [_values(s).copy() for s in signals]
    e0 = sum(_energy(r, w) for r in residuals)
    atoms, coeffs, energies = [], [], []
    for k in range(n_atoms):
        gamma, _ = best_atom([r.reshape(grid.shape) for r in residuals], spec, criterion)
        if gamma is None:
            log.info("residuals vanished after %d atoms", k)
            break
        atom = synthesize_atom(gamma, grid).values.ravel()
        wa = atom * w
        col = np.empty(len(residuals))
        for i, r in enumerate(residuals):
            col[i], residuals[i] = _mp_step(r, atom, wa)
        atoms.append(gamma)
        coeffs.append(col)
        energies.append(sum(_energy(r, w) for r in residuals))
    support = SparseSupport(tuple(atoms), grid)
    c = np.array(coeffs).reshape(len(atoms), len(signals))
    out = SsmpResult(support, c, energies, e0)
    if keep_residuals:
        out.residuals = [r.reshape(grid.shape) for r in residuals]
    return out


def mp_single(signal, spec, n_atoms):
    """Plain matching pursuit of one signal over the full lattice."""
    res = ssmp_select([signal], spec, n_atoms)
    return res.support, res.coefficients[:, 0]


def encode(signal, support, mode="mp"):
    """Coefficients of ``signal`` on the support.

    ``mp`` runs one matching-pursuit pass over the atoms in selection order;
    ``ls`` solves the (ridge-stabilised) least-squares problem.
    """
    x = _values(signal)
    if x.size != support.synthesis.shape[0]:
        raise ContractError("signal does not live on the support grid")
    phi = support.synthesis
    w = support.grid.weights.ravel()
    if mode == "mp":
        c = np.empty(phi.shape[1])
        r = x.copy()
        for k in range(phi.shape[1]):
            atom = phi[:, k]
            c[k], r = _mp_step(r, atom, atom * w)
        return c
    if mode in ("ls", "least-squares"):
        pw = phi * w[:, None]
        gram = phi.T @ pw
        gram[np.diag_indices_from(gram)] += 1e-10
        return np.linalg.solve(gram, pw.T @ x)
    raise ConfigurationError(f"unknown encode mode {mode!r}")


def encode_many(signals, support, mode="mp"):
    """Coefficient matrix (K x n) of several signals."""
    return np.column_stack([encode(s, support, mode) for s in signals]) if signals else \
        np.zeros((len(support), 0))


def reconstruct(coeffs, support):
    return (support.synthesis @ np.asarray(coeffs)).reshape(support.grid.shape)


def residual_norm(signal, coeffs, support):
    r = _values(signal) - support.synthesis @ coeffs
    return float(np.sqrt(_energy(r, support.grid.weights.ravel())))


# --------------------------------------------------------------------------
# PCA baseline

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray      # dim x d, orthonormal columns
    variances: np.ndarray  # eigenvalues of the kept directions

    @property
    def d(self):
        return self.basis.shape[1]


def pca_fit(data, d):
    """Top-``d`` principal directions of the rows of ``data``.

    ``d`` larger than the rank of the centred data is clamped with a warning.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("pca_fit expects an (n_samples, dim) array")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = s.max(initial=0.0) * max(xc.shape) * np.finfo(float).eps
    rank = int(np.count_nonzero(s > tol))
    if d > rank:
        warnings.warn(f"PCA dimension {d} clamped to data rank {rank}", stacklevel=2)
        d = rank
    # deterministic signs: largest-magnitude entry of each direction is positive
    basis = vt[:d].T.copy()
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(d)])
    basis *= np.where(flip == 0, 1.0, flip)
    variances = s[:d] ** 2 / max(x.shape[0] - 1, 1)
    return PcaModel(mean, basis, variances)


def pca_encode(x, model):
    return (np.asarray(x, dtype=float) - model.mean) @ model.basis
