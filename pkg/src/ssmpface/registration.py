"""Rigid registration: ICP, the average face model (AFM) and elliptical cropping."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .data import PointCloud3D, ScanGrid
from .errors import DegenerateGeometryError, EmptyFaceError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def angle(self):
        """Rotation angle in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(math.acos(min(1.0, max(-1.0, c))))

    def orthonormality_error(self):
        r = self.rotation
        return float(np.max(np.abs(r.T @ r - np.eye(3)))), float(abs(np.linalg.det(r) - 1.0))


def rotation_about(axis, angle):
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * kx @ kx


def fit_rigid(src, dst):
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (paired rows).

    Cross-covariance SVD with the reflection fix on the smallest singular direction.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cd - rot @ cs)


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tolerance: float = 1e-6      # on the change of rms between iterations
    subsample: float = 1.0       # fraction of query points used for pairing
    reject_factor: float = 3.0   # drop pairs farther than this many median distances
    init_centroid: bool = True   # start from the centroid-matching translation
    seed: int = 0


@dataclass
class IcpResult:
    transform: RigidTransform
    rms: float
    iterations: int
    rms_history: list


def icp_align(query, model, cfg=IcpConfig(), tree=None):
    """Align ``query`` to ``model``; returns an :class:`IcpResult`.

    ``tree`` may carry a prebuilt KD-tree over the model points.
    """
    q = query.points if isinstance(query, PointCloud3D) else np.asarray(query, float)
    m = model.points if isinstance(model, PointCloud3D) else np.asarray(model, float)
    if len(q) == 0 or len(m) == 0:
        raise EmptyFaceError("ICP needs non-empty clouds")
    if cfg.subsample < 1.0 and len(q) > 3:
        rng = np.random.default_rng(cfg.seed)
        n = max(3, int(round(cfg.subsample * len(q))))
        q = q[np.sort(rng.choice(len(q), n, replace=False))]
    if tree is None:
        tree = cKDTree(m)

    total = RigidTransform.identity()
    if cfg.init_centroid:
        total = RigidTransform(np.eye(3), m.mean(axis=0) - q.mean(axis=0))
    n_distinct_query = len(np.unique(q, axis=0))
    history = []
    prev = math.inf
    rms = math.inf
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        moved = total.apply(q)
        dist, idx = tree.query(moved)
        if n_distinct_query > 1 and np.all(idx == idx[0]):
            raise DegenerateGeometryError(
                f"all query points of {getattr(query, 'scan_id', '')!r} pair with one model point")
        med = np.median(dist)
        keep = dist <= cfg.reject_factor * med if med > 0 else np.ones(len(dist), bool)
        rms_pairs = math.sqrt(float(np.mean(dist[keep] ** 2)))
        history.append(rms_pairs)
        step = fit_rigid(moved[keep], m[idx[keep]])
        total = step.compose(total)
        rms = rms_pairs
        if abs(prev - rms) < cfg.tolerance:
            break
        prev = rms
    dist, _ = tree.query(total.apply(q))
    rms = math.sqrt(float(np.mean(dist ** 2)))
    return IcpResult(total, rms, it, history)


# --------------------------------------------------------------------------
# AFM

@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def coords(self):
        xs = np.linspace(self.x_min, self.x_max, self.cols)
        ys = np.linspace(self.y_max, self.y_min, self.rows)
        return np.tile(xs, (self.rows, 1)), np.tile(ys[:, None], (1, self.cols))

    @property
    def step(self):
        return (max((self.x_max - self.x_min) / max(self.cols - 1, 1), 1e-12),
                max((self.y_max - self.y_min) / max(self.rows - 1, 1), 1e-12))

    def cell_of(self, points):
        """Fractional (row, col) of each point's (x, y)."""
        sx, sy = self.step
        col = (points[:, 0] - self.x_min) / sx
        row = (self.y_max - points[:, 1]) / sy
        return row, col

    @classmethod
    def around(cls, cloud, rows, cols, pad=0.05):
        p = cloud.points if isinstance(cloud, PointCloud3D) else cloud
        lo, hi = p[:, :2].min(axis=0), p[:, :2].max(axis=0)
        span = np.maximum(hi - lo, 1e-6)
        lo, hi = lo - pad * span, hi + pad * span
        return cls(rows, cols, float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))


def resample_depth(cloud, spec, max_dist=None):
    """Nearest-neighbour-in-(x, y) depth lookup on a uniform grid.

    Cells farther than ``max_dist`` from every point are invalid; the default
    is the larger of one cell diagonal and 1.5 median point spacings. Returns a :class:`ScanGrid`.
    """
    x, y = spec.coords()
    tree = cKDTree(cloud.points[:, :2])
    if max_dist is None:
        # tolerate gaps of about one sample spacing of the cloud itself
        spacing = 0.0
        if len(cloud) > 1:
            spacing = float(np.median(tree.query(cloud.points[:, :2], k=2)[0][:, 1]))
        max_dist = max(math.hypot(*spec.step), 1.5 * spacing)
    dist, idx = tree.query(np.column_stack([x.ravel(), y.ravel()]))
    z = cloud.points[idx, 2].reshape(x.shape)
    valid = (dist <= max_dist).reshape(x.shape)
    z = np.where(valid, z, 0.0)
    return ScanGrid(x, y, z, valid, cloud.subject_id, cloud.scan_id)


@dataclass(frozen=True, eq=False)
class AverageFaceModel:
    grid: ScanGrid
    support_count: np.ndarray
    spec: GridSpec

    def cloud(self):
        from .data import grid_to_cloud
        return grid_to_cloud(self.grid)


def average_faces(grids, spec):
    """Cell-wise mean over depth grids; cells need majority support."""
    total = np.zeros((spec.rows, spec.cols))
    count = np.zeros((spec.rows, spec.cols), dtype=int)
    for g in grids:
        total += np.where(g.valid, g.z, 0.0)
        count += g.valid
    need = math.ceil(len(grids) / 2)
    valid = (count >= need) & (count > 0)
    z = np.where(valid, total / np.maximum(count, 1), 0.0)
    x, y = spec.coords()
    grid = ScanGrid(x, y, z, valid, "", "afm")
    return AverageFaceModel(grid, count, spec)


def build_afm(faces, seed_index=0, grid_spec=None, icp=IcpConfig(), rows=64, cols=64):
    """Coarse-align every face to ``faces[seed_index]`` and average the depths.

    Returns ``(afm, aligned_faces)``.
    """
    if len(faces) < 2:
        raise ValueError("an average face needs at least two faces")
    seed = faces[seed_index]
    if grid_spec is None:
        grid_spec = GridSpec.around(seed, rows, cols)
    tree = cKDTree(seed.points)
    aligned = []
    for i, f in enumerate(faces):
        if i == seed_index:
            aligned.append(f)
            continue
        try:
            res = icp_align(f, seed, icp, tree=tree)
        except Exception as exc:
            raise type(exc)(f"coarse ICP failed for scan {f.scan_id!r}: {exc}") from exc
        aligned.append(f.with_points(res.transform.apply(f.points)))
    grids = [resample_depth(f, grid_spec) for f in aligned]
    return average_faces(grids, grid_spec), aligned


@dataclass(frozen=True)
class CropEllipse:
    center: tuple   # (row, col)
    semi_axes: tuple  # (a_row, a_col), grid cells

    @property
    def area(self):
        return math.pi * self.semi_axes[0] * self.semi_axes[1]

    def contains(self, rows, cols):
        cr, cc = self.center
        ar, ac = self.semi_axes
        return ((rows - cr) / ar) ** 2 + ((cols - cc) / ac) ** 2 <= 1.0


def fit_crop_ellipse(afm, coverage=0.95):
    """Smallest centred ellipse (axis ratio = row/col std ratio) covering ``coverage`` of the AFM."""
    valid = afm.grid.valid if isinstance(afm, AverageFaceModel) else np.asarray(afm, bool)
    if not 0 < coverage <= 1:
        raise ValueError("coverage must lie in (0, 1]")
    rr, cc = np.nonzero(valid)
    if rr.size == 0:
        raise EmptyFaceError("AFM has no valid cells")
    cr, ccol = rr.mean(), cc.mean()
    sr, sc = rr.std(), cc.std()
    if sr < 1e-12 or sc < 1e-12:
        sr = sc = 1.0
    rho = np.sqrt(((rr - cr) / sr) ** 2 + ((cc - ccol) / sc) ** 2)
    rho.sort()
    k = max(1, math.ceil(coverage * rho.size - 1e-9))
    s = rho[k - 1]
    if s <= 0:
        return CropEllipse((float(cr), float(ccol)), (1.0, 1.0))
    # nudge outward so the k-th cell is inside despite rounding
    s *= 1.0 + 1e-12
    return CropEllipse((float(cr), float(ccol)), (float(s * sr), float(s * sc)))


def apply_crop(face, ellipse, spec=None):
    """Drop cells (or points, located on ``spec``) that fall outside the ellipse."""
    if isinstance(face, ScanGrid):
        rr, cc = np.indices(face.valid.shape)
        out = face.with_mask(face.valid & ellipse.contains(rr, cc))
        if out.n_valid == 0:
            raise EmptyFaceError(f"crop emptied scan {face.scan_id!r}")
        return out
    if spec is None:
        raise ValueError("cropping a point cloud needs the AFM grid spec")
    row, col = spec.cell_of(face.points)
    keep = ellipse.contains(row, col)
    if not np.any(keep):
        raise EmptyFaceError(f"crop emptied cloud {face.scan_id!r}")
    return face.with_points(face.points[keep])


@dataclass(frozen=True)
class RegistrationConfig:
    icp: IcpConfig = IcpConfig()
    seed_index: int = 0
    afm_rows: int = 64
    afm_cols: int = 64
    crop_coverage: float = 0.95
    recrop: bool = True  # crop again after fine ICP so every face ends on the same footprint


@dataclass
class RegistrationResult:
    faces: list
    afm: AverageFaceModel
    ellipse: CropEllipse
    coarse: list
    fine_rms: list


def register_all(faces, cfg=RegistrationConfig()):
    """Coarse ICP to a seed face, AFM, elliptical crop, then fine ICP to the AFM."""
    afm, coarse = build_afm(faces, cfg.seed_index, icp=cfg.icp,
                            rows=cfg.afm_rows, cols=cfg.afm_cols)
    ellipse = fit_crop_ellipse(afm, cfg.crop_coverage)
    afm_cloud = afm.cloud()
    tree = cKDTree(afm_cloud.points)
    fine, rms = [], []
    for f in coarse:
        cropped = apply_crop(f, ellipse, afm.spec)
        try:
            res = icp_align(cropped, afm_cloud, cfg.icp, tree=tree)
        except Exception as exc:
            raise type(exc)(f"fine ICP failed for scan {f.scan_id!r}: {exc}") from exc
        if cfg.recrop:
            fine.append(apply_crop(f.with_points(res.transform.apply(f.points)), ellipse, afm.spec))
        else:
            fine.append(cropped.with_points(res.transform.apply(cropped.points)))
        rms.append(res.rms)
    log.debug("fine ICP rms: mean %.4f max %.4f", np.mean(rms), np.max(rms))
    return RegistrationResult(fine, afm, ellipse, coarse, rms)


def pairwise_rms(a, b):
    """Symmetric nearest-neighbour rms distance between two clouds."""
    da, _ = cKDTree(b.points).query(a.points)
    db, _ = cKDTree(a.points).query(b.points)
    return math.sqrt(0.5 * (np.mean(da ** 2) + np.mean(db ** 2)))
