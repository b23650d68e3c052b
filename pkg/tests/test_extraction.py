from collections import deque

import numpy as np
import pytest

from ssmpface.data import SynthParams, synth_face
from ssmpface.errors import EmptyFaceError
from ssmpface.extraction import (depth_threshold, extract_face, keep_largest_region,
                                 lateral_threshold, otsu_threshold, projection_curve)

from conftest import make_grid


def flood_components(mask):
    """Plain BFS 8-connected labelling, components in raster order of first cell."""
    seen = np.zeros(mask.shape, bool)
    comps = []
    for r, c in zip(*np.nonzero(mask)):
        if seen[r, c]:
            continue
        cells, q = [], deque([(r, c)])
        seen[r, c] = True
        while q:
            a, b = q.popleft()
            cells.append((a, b))
            for da in (-1, 0, 1):
                for db in (-1, 0, 1):
                    u, v = a + da, b + db
                    if 0 <= u < mask.shape[0] and 0 <= v < mask.shape[1] and mask[u, v] and not seen[u, v]:
                        seen[u, v] = True
                        q.append((u, v))
        comps.append(cells)
    return comps


def head_shoulders(rows=80, cols=96):
    m = np.zeros((rows, cols), bool)
    m[5:, 36:60] = True      # head and neck column
    m[55:, 4:92] = True      # shoulders
    return m


def test_projection_curve_is_column_sum():
    m = head_shoulders()
    s = make_grid(np.zeros(m.shape), m)
    assert np.array_equal(projection_curve(s), m.sum(axis=0))


def test_head_and_shoulders_lateral_cut():
    m = head_shoulders()
    out, left, right = lateral_threshold(make_grid(np.zeros(m.shape), m))
    # oracle: brute inspection of surviving columns
    cols = np.nonzero(out.valid.any(axis=0))[0]
    assert cols.min() >= 36 - 1 and cols.max() <= 60
    assert np.array_equal(out.valid[5:55, 36:60], m[5:55, 36:60])
    assert not out.valid[:, :30].any() and not out.valid[:, 66:].any()
    assert left < right


def test_lateral_plateau_unchanged():
    m = np.ones((20, 40), bool)
    s = make_grid(np.zeros(m.shape), m)
    out, left, right = lateral_threshold(s)
    assert np.array_equal(out.valid, s.valid)
    assert (left, right) == (0, 39)


def test_lateral_idempotent():
    m = head_shoulders()
    once, _, _ = lateral_threshold(make_grid(np.zeros(m.shape), m))
    twice, _, _ = lateral_threshold(once)
    assert np.array_equal(once.valid, twice.valid)


def otsu_bruteforce(values, nbins):
    hist, edges = np.histogram(values, bins=nbins)
    scores = np.full(nbins, -1.0)
    for k in range(1, nbins):
        a, b = hist[:k], hist[k:]
        if a.sum() == 0 or b.sum() == 0:
            continue
        ca = 0.5 * (edges[:k] + edges[1:k + 1])
        cb = 0.5 * (edges[k:-1] + edges[k + 1:])
        ma, mb = (a * ca).sum() / a.sum(), (b * cb).sum() / b.sum()
        scores[k] = a.sum() * b.sum() * (ma - mb) ** 2
    best = np.flatnonzero(scores >= scores.max() * (1 - 1e-9))
    run = [best[0]]
    while run[-1] + 1 in best:
        run.append(run[-1] + 1)
    return edges[(run[0] + run[-1]) // 2]


def test_otsu_matches_bruteforce(rng):
    for _ in range(5):
        v = np.concatenate([rng.normal(0, 3, 400), rng.normal(50, 5, 300)])
        assert otsu_threshold(v, 256) == pytest.approx(otsu_bruteforce(v, 256), abs=1e-9)


def test_bimodal_depth_removes_far_mode(rng):
    z = np.concatenate([rng.normal(0, 1, 1000), rng.normal(100, 1, 1000)]).reshape(40, 50)
    z = rng.permuted(z.ravel()).reshape(40, 50)
    out, cutoff = depth_threshold(make_grid(z))
    assert out.n_valid == 1000
    assert np.all(z[out.valid] < 50) and 35 < cutoff < 65


@pytest.mark.parametrize("draw", ["normal", "uniform"])
def test_unimodal_depth_keeps_most(rng, draw):
    z = getattr(rng, draw)(size=(40, 40))
    out, _ = depth_threshold(make_grid(z))
    assert out.n_valid >= 0.75 * 1600


def test_separability_values(rng):
    # two spikes are perfectly separable; a Gaussian sits near 2 / pi
    _, sep = otsu_threshold(np.r_[np.zeros(50), np.ones(50)], return_separability=True)
    assert sep == pytest.approx(1.0)
    _, sep = otsu_threshold(rng.normal(size=20000), return_separability=True)
    assert sep == pytest.approx(2 / np.pi, abs=0.01)


def test_depth_guard_falls_back():
    # 5% near cells vs 95% far cells: Otsu would keep only the near ones
    z = np.full((20, 20), 100.0)
    z[:1, :] = 0.0
    s = make_grid(z)
    out, cutoff = depth_threshold(s)
    assert out.n_valid == s.n_valid
    assert cutoff == 100.0


def test_constant_depth_unmodified():
    s = make_grid(np.full((5, 5), 7.0))
    out, cutoff = depth_threshold(s)
    assert out.n_valid == 25 and cutoff == 7.0


def test_largest_region_matches_flood_fill(rng):
    m = np.zeros((60, 60), bool)
    m[2:27, 2:22] = True          # 500 cells
    m[40:46, 40:45] = True        # 30 cells
    m[50:51, 10:17] = True        # 7 cells
    out = keep_largest_region(make_grid(np.zeros(m.shape), m))
    comps = flood_components(m)
    assert sorted(len(c) for c in comps) == [7, 30, 500]
    biggest = max(comps, key=len)
    expect = np.zeros_like(m)
    expect[tuple(np.array(biggest).T)] = True
    assert np.array_equal(out.valid, expect)


def test_largest_region_tie_goes_to_first_cell():
    m = np.zeros((10, 10), bool)
    m[0, 0:5] = m[1, 0:5] = True
    m[6, 5:10] = m[7, 5:10] = True
    out = keep_largest_region(make_grid(np.zeros(m.shape), m))
    assert out.valid[0, 0] and not out.valid[7, 7]


def test_diagonal_cells_are_connected():
    m = np.eye(6, dtype=bool)
    out = keep_largest_region(make_grid(np.zeros(m.shape), m))
    assert out.n_valid == 6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_extract_synthetic_face(seed):
    scan = synth_face(seed, 0)
    face, rep = extract_face(scan)
    # single 8-connected component inside the lateral band and above the cutoff
    assert len(flood_components(face.valid)) == 1
    cols = np.nonzero(face.valid.any(axis=0))[0]
    assert rep.left_col <= cols.min() and cols.max() <= rep.right_col
    assert np.all(face.z[face.valid] <= rep.depth_cutoff)
    # never creates cells, and no body or outlier blobs survive
    assert not np.any(face.valid & ~scan.valid)
    assert face.n_valid == scan.n_valid - (rep.cells_removed_lateral + rep.cells_removed_depth
                                           + rep.cells_removed_morph)
    assert not face.valid[-10:].any()
    # applying it again barely changes anything
    again, _ = extract_face(face)
    assert face.n_valid - again.n_valid <= 0.01 * face.n_valid


def test_face_only_scan_survives():
    scan = synth_face(4, 0, SynthParams(with_body=False, n_outliers=0))
    face, _ = extract_face(scan)
    assert face.n_valid >= 0.75 * scan.n_valid


def test_empty_scan_raises():
    with pytest.raises(EmptyFaceError):
        extract_face(make_grid(np.zeros((4, 4)), np.zeros((4, 4), bool)))


def test_report_csv():
    _, rep = extract_face(synth_face(0, 0))
    assert rep.csv_header.count(",") == rep.csv_row().count(",") == 6
