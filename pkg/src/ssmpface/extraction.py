"""Automatic removal of shoulders, chest and stray blobs from a raw scan.

Stages run in order lateral -> depth -> largest region, and every stage only
ever clears mask cells.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyFaceError


@dataclass(frozen=True)
class ExtractionConfig:
    smooth_divisor: int = 32     # moving-average window = max(3, cols // smooth_divisor)
    min_slope_frac: float = 0.1  # inflexions on flatter slopes than this are noise
    depth_bins: int = 256
    min_keep_frac: float = 0.25  # depth cut abandoned below this survivor fraction
    min_separability: float = 0.77  # between/total variance needed to call depths bimodal


@dataclass(frozen=True)
class ExtractionReport:
    scan_id: str
    left_col: int
    right_col: int
    depth_cutoff: float
    cells_removed_lateral: int
    cells_removed_depth: int
    cells_removed_morph: int

    @property
    def csv_header(self):
        return ("scan_id,left_col,right_col,depth_cutoff,"
                "cells_removed_lateral,cells_removed_depth,cells_removed_morph")

    def csv_row(self):
        return (f"{self.scan_id},{self.left_col},{self.right_col},{self.depth_cutoff!r},"
                f"{self.cells_removed_lateral},{self.cells_removed_depth},{self.cells_removed_morph}")


def _require_valid(scan):
    if scan.n_valid == 0:
        raise EmptyFaceError(f"scan {scan.scan_id!r} has no valid cells")


def projection_curve(scan):
    """Per-column count of valid cells."""
    return scan.valid.sum(axis=0)


def _crossing(d2, lo, hi, step):
    """Walk from ``lo`` towards ``hi`` looking for the first concave->convex change.

    Returns the fractional position of the sign change or None. Runs of exact
    zeros between the two signs put the crossing at the middle of the run.
    """
    last_neg = None
    idx = lo
    while 0 <= idx < len(d2) and (idx - hi) * step <= 0:
        v = d2[idx]
        if v < 0:
            last_neg = idx
        elif v > 0 and last_neg is not None:
            return 0.5 * (last_neg + idx)
        idx += step
    return None


def _inflexions(curve, cfg):
    """Fractional left and right inflexion positions flanking the curve maximum."""
    cols = curve.size
    window = max(3, cols // cfg.smooth_divisor)
    s = ndimage.uniform_filter1d(curve.astype(float), window, mode="nearest")
    if cols < 3:
        return None, None
    # d2[c] is the second difference centred on column c
    d2 = np.zeros(cols)
    d2[1:-1] = s[:-2] - 2.0 * s[1:-1] + s[2:]
    tol = 1e-9 * max(1.0, s.max())
    d2[np.abs(d2) < tol] = 0.0
    slope = np.gradient(s)
    peak = int(np.argmax(s))

    def pick(step):
        # among concave->convex changes on this side, the steepest one marks
        # the head boundary; flatter ones come from neck or shoulder steps
        limit = 0 if step < 0 else cols - 1
        side = slice(0, peak + 1) if step < 0 else slice(peak, cols)
        max_slope = np.max(np.abs(slope[side]))
        best, best_slope = None, 0.0
        start = peak
        while True:
            p = _crossing(d2, start, limit, step)
            if p is None:
                break
            a, b = int(np.floor(p)), int(np.ceil(p))
            local = max(abs(slope[a]), abs(slope[b]))
            if local >= cfg.min_slope_frac * max_slope and local > best_slope * (1 + 1e-9):
                best, best_slope = p, local
            start = (b if step > 0 else a) + step
        return best

    return pick(-1), pick(+1)


def lateral_threshold(scan, cfg=ExtractionConfig()):
    """Cut columns beyond the inflexion points of the smoothed projection curve.

    Returns ``(scan, left_col, right_col)``; a side without an inflexion point
    is left uncropped.
    """
    _require_valid(scan)
    left, right = _inflexions(projection_curve(scan), cfg)
    left_col = 0 if left is None else int(np.floor(left))
    right_col = scan.cols - 1 if right is None else int(np.ceil(right))
    if left_col >= right_col:
        return scan, 0, scan.cols - 1
    valid = scan.valid.copy()
    valid[:, :left_col] = False
    valid[:, right_col + 1:] = False
    return scan.with_mask(valid), left_col, right_col


def otsu_threshold(values, nbins=256, return_separability=False):
    """Otsu's threshold over a histogram of ``values`` (upper edge of the low class).

    Empty bins between two modes make a plateau of equally good thresholds;
    the middle of the first plateau is returned. With ``return_separability``
    the ratio of between-class to total variance is returned as well.
    """
    values = np.asarray(values, dtype=float)
    lo, hi = values.min(), values.max()
    if lo == hi:
        return (float(lo), 0.0) if return_separability else float(lo)
    hist, edges = np.histogram(values, bins=nbins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(float)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mt - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    between = between[:-1]
    top = between.max()
    ties = np.flatnonzero(between >= top - 1e-12 * abs(top))
    run_end = ties[0]
    while run_end + 1 < between.size and between[run_end + 1] >= top - 1e-12 * abs(top):
        run_end += 1
    k = (ties[0] + run_end) // 2
    t = float(edges[k + 1])
    if not return_separability:
        return t
    total = hist.sum() * np.sum(hist * (centers - mt / hist.sum()) ** 2)
    return t, float(top / total) if total > 0 else 0.0


def depth_threshold(scan, cfg=ExtractionConfig()):
    """Drop the far depth mode (chest) using Otsu's threshold.

    Returns ``(scan, cutoff)``. The scan is returned unchanged, with the largest
    valid depth as cutoff, when the histogram is not clearly bimodal or when
    fewer than ``min_keep_frac`` of the valid cells would survive.
    """
    _require_valid(scan)
    depths = scan.z[scan.valid]
    if depths.min() == depths.max():
        return scan, float(depths[0])
    cutoff, sep = otsu_threshold(depths, cfg.depth_bins, return_separability=True)
    if sep < cfg.min_separability:
        return scan, float(depths.max())
    keep = scan.valid & (scan.z <= cutoff)
    if np.count_nonzero(keep) < cfg.min_keep_frac * depths.size:
        return scan, float(depths.max())
    return scan.with_mask(keep), cutoff


_EIGHT = np.ones((3, 3), dtype=int)


def keep_largest_region(scan):
    """Keep the largest 8-connected component of the mask.

    Ties go to the component whose first cell comes first in row-major order.
    """
    _require_valid(scan)
    labels, n = ndimage.label(scan.valid, structure=_EIGHT)
    if n <= 1:
        return scan
    sizes = np.bincount(labels.ravel())[1:]
    # scipy numbers components in raster order of their first cell
    best = int(np.argmax(sizes)) + 1
    return scan.with_mask(labels == best)


def extract_face(scan, cfg=ExtractionConfig()):
    _require_valid(scan)
    n0 = scan.n_valid
    s1, left, right = lateral_threshold(scan, cfg)
    _require_valid(s1)
    s2, cutoff = depth_threshold(s1, cfg)
    _require_valid(s2)
    s3 = keep_largest_region(s2)
    report = ExtractionReport(
        scan.scan_id, left, right, cutoff,
        n0 - s1.n_valid, s1.n_valid - s2.n_valid, s2.n_valid - s3.n_valid,
    )
    return s3, report
