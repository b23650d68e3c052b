"""Scan containers, text formats, dataset manifests and the synthetic face generator.

Depth convention throughout the package: larger ``z`` is farther from the
sensor, so the nose tip has the smallest depth of a frontal face.
"""

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EmptyFaceError, ScanParseError

_SPACING_RTOL = 1e-9


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _check_uniform(values, axis, name):
    if values.shape[axis] < 2:
        return
    steps = np.diff(values, axis=axis)
    ref = steps.flat[0]
    scale = max(abs(ref), np.max(np.abs(values)), 1.0)
    if not np.all(np.abs(steps - ref) <= _SPACING_RTOL * scale):
        raise ValueError(f"{name} does not form a uniform grid")


@dataclass(frozen=True, eq=False)
class ScanGrid:
    """Gridded range scan: X/Y on a uniform grid, depth Z and validity mask A."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    valid: np.ndarray
    subject_id: str = ""
    scan_id: str = ""

    def __post_init__(self):
        x, y, z = (_frozen(a) for a in (self.x, self.y, self.z))
        valid = _frozen(self.valid, dtype=bool)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError("grid must be a non-empty 2-D array")
        if not (x.shape == y.shape == z.shape == valid.shape):
            raise ValueError("x, y, z and valid must share one shape")
        # x varies along columns, y along rows
        _check_uniform(x, 1, "x")
        _check_uniform(y, 0, "y")
        if not (np.all(x == x[:1, :]) and np.all(y == y[:, :1])):
            raise ValueError("x must be constant down columns and y along rows")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "valid", valid)

    @property
    def rows(self):
        return self.valid.shape[0]

    @property
    def cols(self):
        return self.valid.shape[1]

    @property
    def n_valid(self):
        return int(np.count_nonzero(self.valid))

    def with_mask(self, valid):
        return ScanGrid(self.x, self.y, self.z, valid, self.subject_id, self.scan_id)

    def equals(self, other):
        """Bit-exact comparison, including values stored in invalid cells."""
        return (
            self.subject_id == other.subject_id
            and self.scan_id == other.scan_id
            and all(
                np.array_equal(a.view(np.uint64) if a.dtype == float else a,
                               b.view(np.uint64) if b.dtype == float else b)
                for a, b in ((self.x, other.x), (self.y, other.y),
                             (self.z, other.z), (self.valid, other.valid))
            )
        )


@dataclass(frozen=True, eq=False)
class PointCloud3D:
    points: np.ndarray
    subject_id: str = ""
    scan_id: str = ""

    def __post_init__(self):
        pts = _frozen(self.points).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points):
        return PointCloud3D(points, self.subject_id, self.scan_id)

    def equals(self, other):
        return (self.subject_id == other.subject_id and self.scan_id == other.scan_id
                and np.array_equal(self.points.view(np.uint64), other.points.view(np.uint64)))


def grid_to_cloud(scan):
    """One 3-D point per valid cell, in row-major order."""
    if scan.n_valid == 0:
        raise EmptyFaceError(f"scan {scan.scan_id!r} has no valid cells")
    m = scan.valid
    pts = np.column_stack([scan.x[m], scan.y[m], scan.z[m]])
    return PointCloud3D(pts, scan.subject_id, scan.scan_id)


# --------------------------------------------------------------------------
# text formats

def _fmt_row(values):
    return " ".join(repr(float(v)) for v in values)


def _format_grid(scan):
    lines = [f"{scan.rows} {scan.cols}"]
    lines += [" ".join("1" if v else "0" for v in row) for row in scan.valid]
    lines.append("")
    for arr in (scan.x, scan.y, scan.z):
        lines += [_fmt_row(row) for row in arr]
        lines.append("")
    return "\n".join(lines)


def _parse_grid(text, path=None):
    # blank lines are cosmetic section separators; keep original line numbers
    lines = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines())]
    lines = [(n, toks) for n, toks in lines if toks]
    if not lines:
        raise ScanParseError("empty file", path=path)
    n0, header = lines[0]
    if len(header) != 2:
        raise ScanParseError("header must be 'rows cols'", n0, path)
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError:
        raise ScanParseError("non-integer header", n0, path) from None
    if rows < 1 or cols < 1:
        raise ScanParseError("rows and cols must be positive", n0, path)

    body = lines[1:]
    sections = {}
    pos = 0
    last_line = n0
    for name in ("mask", "X", "Y", "Z"):
        out = np.empty((rows, cols))
        for r in range(rows):
            if pos >= len(body):
                raise ScanParseError(f"{name} row {r + 1}: unexpected end of file",
                                     last_line + 1, path)
            n, toks = body[pos]
            pos += 1
            last_line = n
            if len(toks) != cols:
                raise ScanParseError(
                    f"{name} row {r + 1}: expected {cols} values, got {len(toks)}", n, path)
            try:
                out[r] = [float(t) for t in toks]
            except ValueError:
                raise ScanParseError(f"{name} row {r + 1}: non-numeric token", n, path) from None
            if name == "mask" and not np.all((out[r] == 0) | (out[r] == 1)):
                raise ScanParseError(f"mask row {r + 1}: values must be 0 or 1", n, path)
        sections[name] = out
    if pos != len(body):
        raise ScanParseError("trailing data after Z section", body[pos][0], path)
    return sections


def _parse_xyz(text, path=None):
    pts = []
    for i, line in enumerate(text.splitlines()):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != 3:
            raise ScanParseError(f"expected 'x y z', got {len(toks)} tokens", i + 1, path)
        try:
            pts.append([float(t) for t in toks])
        except ValueError:
            raise ScanParseError("non-numeric token", i + 1, path) from None
    if not pts:
        raise ScanParseError("no points", path=path)
    return np.array(pts)


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_scan(path, format="grid-text", subject_id="", scan_id=None):
    """Read a scan from disk.

    ``grid-text`` yields a :class:`ScanGrid`, ``xyz-text`` a :class:`PointCloud3D`.
    """
    path = Path(path)
    if scan_id is None:
        scan_id = path.stem
    text = path.read_text()
    if format == "grid-text":
        s = _parse_grid(text, path)
        return ScanGrid(s["X"], s["Y"], s["Z"], s["mask"].astype(bool), subject_id, scan_id)
    if format == "xyz-text":
        return PointCloud3D(_parse_xyz(text, path), subject_id, scan_id)
    raise ConfigurationError(f"unknown scan format {format!r}")


def save_scan(scan, path):
    if isinstance(scan, ScanGrid):
        text = _format_grid(scan)
    else:
        text = "\n".join(_fmt_row(p) for p in scan.points) + "\n"
    _atomic_write(path, text)


# --------------------------------------------------------------------------
# dataset manifests

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    scan_id: str


@dataclass
class Dataset:
    """Labelled scans plus an optional training/test split."""

    entries: list
    root: str = "."
    split: dict = field(default_factory=dict)  # scan_id -> "train" | "test"

    @property
    def labels(self):
        return [e.subject_id for e in self.entries]

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else Path(self.root) / p

    def subjects(self):
        seen = {}
        for e in self.entries:
            seen.setdefault(e.subject_id, []).append(e)
        return seen


def load_manifest(path):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "subject_id", "scan_id"} - set(reader.fieldnames or [])
        if missing:
            raise ScanParseError(f"manifest lacks columns {sorted(missing)}", 1, path)
        entries = [ManifestEntry(r["path"], r["subject_id"], r["scan_id"]) for r in reader]
    ids = [e.scan_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ScanParseError("duplicate scan_id in manifest", path=path)
    return Dataset(entries, root=str(path.parent))


def write_manifest(entries, path):
    rows = ["path,subject_id,scan_id"] + [f"{e.path},{e.subject_id},{e.scan_id}" for e in entries]
    _atomic_write(path, "\n".join(rows) + "\n")


# --------------------------------------------------------------------------
# synthetic faces

@dataclass(frozen=True)
class SynthParams:
    size: int = 96            # grid rows = cols
    extent: float = 150.0     # half-width of the scanned window, mm
    standoff: float = 1000.0  # sensor-to-face distance, mm
    noise: float = 0.3        # std of additive depth noise, mm
    pose_deg: float = 5.0     # max |angle| per axis of the random pose
    pose_shift: float = 5.0   # max |translation| per axis, mm
    with_body: bool = True    # add neck, shoulders and chest behind the face
    n_outliers: int = 3       # small disconnected blobs of spurious points
    oversample: int = 3


# (x, y, sigma_x, sigma_y, amplitude) relative to the head centre
_FEATURES = (
    (0.0, -5.0, 9.0, 16.0, 28.0),     # nose
    (0.0, 20.0, 7.0, 12.0, 12.0),     # nasal bridge
    (-28.0, 40.0, 14.0, 6.0, 8.0),    # brows
    (28.0, 40.0, 14.0, 6.0, 8.0),
    (-30.0, 25.0, 11.0, 7.0, -8.0),   # eye sockets
    (30.0, 25.0, 11.0, 7.0, -8.0),
    (-40.0, -15.0, 16.0, 16.0, 7.0),  # cheeks
    (40.0, -15.0, 16.0, 16.0, 7.0),
    (0.0, -38.0, 14.0, 5.0, 6.0),     # lips
    (0.0, -65.0, 16.0, 10.0, 10.0),   # chin
)
_HEAD_CY = 45.0


def _subject_shape(subject_seed):
    rng = np.random.default_rng([subject_seed, 0x5eed])
    a = 75.0 * rng.uniform(0.92, 1.08)
    b = 100.0 * rng.uniform(0.92, 1.08)
    depth = 85.0 * rng.uniform(0.9, 1.1)
    feats = []
    for fx, fy, sx, sy, amp in _FEATURES:
        feats.append((
            fx + rng.uniform(-5, 5), fy + rng.uniform(-5, 5),
            sx * rng.uniform(0.8, 1.2), sy * rng.uniform(0.8, 1.2),
            amp * rng.uniform(0.6, 1.4),
        ))
    return a, b, depth, np.array(feats)


def _euler(yaw, pitch, roll):
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


def synth_surface(subject_seed, params, xs, ys):
    """Depth of the canonical (unposed) subject surface at points ``(xs, ys)``.

    Returns NaN where no surface exists.
    """
    a, b, depth, feats = _subject_shape(subject_seed)
    z0 = params.standoff
    u, v = xs / a, (ys - _HEAD_CY) / b
    rho2 = u * u + v * v
    inside = rho2 < 1.0
    h = depth * np.sqrt(np.clip(1.0 - rho2, 0.0, None))
    bumps = np.zeros_like(xs)
    for fx, fy, sx, sy, amp in feats:
        bumps += amp * np.exp(-0.5 * (((xs - fx) / sx) ** 2 + ((ys - _HEAD_CY - fy) / sy) ** 2))
    h += bumps * np.clip(4.0 * (1.0 - rho2), 0.0, 1.0)
    z = np.where(inside, z0 - h, np.nan)

    if params.with_body:
        neck_w = 32.0
        neck_top = _HEAD_CY - 0.8 * b
        neck_bot = _HEAD_CY - b - 30.0
        in_neck = (np.abs(xs) < neck_w) & (ys < neck_top) & (ys > neck_bot)
        zn = z0 + 30.0 - 20.0 * np.sqrt(np.clip(1 - (xs / neck_w) ** 2, 0, None))
        z = np.where(in_neck & ~inside, zn, z)
        body_w = 0.95 * params.extent
        in_body = (np.abs(xs) < body_w) & (ys <= neck_bot + 5.0)
        zb = z0 + 70.0 - 30.0 * np.sqrt(np.clip(1 - (xs / body_w) ** 2, 0, None))
        z = np.where(in_body & np.isnan(z), zb, z)
    return z


def synth_face(subject_seed, scan_seed, params=SynthParams()):
    """Render one synthetic range scan of subject ``subject_seed``.

    The identity (head shape, feature positions and amplitudes) depends only on
    ``subject_seed``; pose, depth noise and outlier blobs depend on ``scan_seed``.
    """
    n = params.size
    if n < 16:
        raise ConfigurationError("synthetic grid size must be at least 16")
    rng = np.random.default_rng([scan_seed, subject_seed, 0x5ca9])
    ext = params.extent
    step = 2.0 * ext / (n - 1)

    m = n * params.oversample
    dense = np.linspace(-ext, ext, m)
    dx, dy = np.meshgrid(dense, dense[::-1])
    dz = synth_surface(subject_seed, params, dx, dy)
    keep = np.isfinite(dz)
    pts = np.column_stack([dx[keep], dy[keep], dz[keep]])

    angles = np.deg2rad(rng.uniform(-params.pose_deg, params.pose_deg, size=3))
    shift = rng.uniform(-params.pose_shift, params.pose_shift, size=3)
    pivot = np.array([0.0, _HEAD_CY, params.standoff - 40.0])
    rot = _euler(*angles)
    pts = (pts - pivot) @ rot.T + pivot + shift

    cols = np.rint((pts[:, 0] + ext) / step).astype(int)
    rows = np.rint((ext - pts[:, 1]) / step).astype(int)
    ok = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
    cell = rows[ok] * n + cols[ok]
    depth = pts[ok, 2]
    # z-buffer: nearest surface to the sensor wins
    order = np.lexsort((depth, cell))
    cell, depth = cell[order], depth[order]
    first = np.ones(cell.size, dtype=bool)
    first[1:] = cell[1:] != cell[:-1]
    zflat = np.zeros(n * n)
    vflat = np.zeros(n * n, dtype=bool)
    zflat[cell[first]] = depth[first]
    vflat[cell[first]] = True
    z = zflat.reshape(n, n)
    valid = vflat.reshape(n, n)

    for _ in range(params.n_outliers):
        r0 = int(rng.integers(0, max(1, n // 6)))
        c0 = int(rng.integers(0, max(1, n // 8)))
        if rng.random() < 0.5:
            c0 = n - 2 - c0
        z[r0:r0 + 2, c0:c0 + 2] = params.standoff - 20.0
        valid[r0:r0 + 2, c0:c0 + 2] = True

    z = np.where(valid, z + params.noise * rng.standard_normal((n, n)), 0.0)
    coords = -ext + step * np.arange(n)
    x = np.tile(coords, (n, 1))
    y = np.tile(coords[::-1, None], (1, n))
    return ScanGrid(x, y, z, valid, str(subject_seed), f"s{subject_seed}_{scan_seed}")
