import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmpface.data import PointCloud3D, SynthParams, grid_to_cloud, synth_face
from ssmpface.errors import DegenerateGeometryError, EmptyFaceError
from ssmpface.extraction import extract_face
from ssmpface.registration import (AverageFaceModel, CropEllipse, GridSpec, IcpConfig,
                                   RegistrationConfig, RigidTransform, apply_crop,
                                   average_faces, build_afm, fit_crop_ellipse, fit_rigid,
                                   icp_align, pairwise_rms, register_all, resample_depth,
                                   rotation_about)

from conftest import make_grid

NOISELESS = SynthParams(size=64, noise=0.0, pose_deg=0.0, pose_shift=0.0, n_outliers=0,
                        with_body=False)


def face_cloud(subject=0, scan=0, params=NOISELESS):
    face, _ = extract_face(synth_face(subject, scan, params))
    return grid_to_cloud(face)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def test_transform_algebra(rng):
    a = RigidTransform(random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(10, 3))
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    assert np.allclose(a.inverse().apply(a.apply(p)), p)


def test_composition_stays_in_se3(rng):
    t = RigidTransform.identity()
    for _ in range(100):
        t = RigidTransform(random_rotation(rng), rng.normal(size=3)).compose(t)
    ortho, det = t.orthonormality_error()
    assert ortho < 1e-8 and det < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(3, 40))
def test_fit_rigid_exact_on_true_pairs(seed, n):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(n, 3))
    truth = RigidTransform(random_rotation(rng), rng.normal(size=3) * 10)
    est = fit_rigid(src, truth.apply(src))
    assert np.allclose(est.rotation, truth.rotation, atol=1e-9)
    assert np.allclose(est.translation, truth.translation, atol=1e-8)
    assert np.linalg.det(est.rotation) > 0


def test_fit_rigid_no_reflection_on_planar_points(rng):
    src = np.column_stack([rng.normal(size=(20, 2)), np.zeros(20)])
    truth = RigidTransform(rotation_about([0, 0, 1], 0.3), [1, 2, 3])
    est = fit_rigid(src, truth.apply(src))
    assert np.linalg.det(est.rotation) == pytest.approx(1.0)
    assert np.allclose(est.apply(src), truth.apply(src), atol=1e-9)


def test_icp_recovers_known_transform():
    model = face_cloud()
    applied = RigidTransform(rotation_about([0, 0, 1], math.radians(10)), [5.0, 0.0, 0.0])
    query = model.with_points(applied.apply(model.points))
    res = icp_align(query, model, IcpConfig(tolerance=1e-12))
    roundtrip = res.transform.compose(applied)
    assert roundtrip.angle() < 1e-3
    assert np.linalg.norm(roundtrip.translation) < 1e-3
    assert res.iterations <= 50


def test_icp_rms_non_increasing():
    model = face_cloud()
    applied = RigidTransform(rotation_about([1, 1, 0], math.radians(8)), [3.0, -4.0, 2.0])
    query = model.with_points(applied.apply(model.points))
    hist = icp_align(query, model).rms_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_icp_equivariance(rng):
    # pre-rotating the query by Q is undone exactly by the recovered transform
    model = face_cloud()
    q = RigidTransform(rotation_about(rng.normal(size=3), 0.1), [2, 1, 0])
    query = model.with_points(q.apply(model.points))
    res = icp_align(query, model, IcpConfig(tolerance=1e-12))
    assert res.transform.compose(q).angle() < 1e-3


def test_icp_yaw_of_posed_sibling():
    base = SynthParams(size=64, noise=0.0, pose_deg=0.0, pose_shift=0.0, n_outliers=0)
    zero = grid_to_cloud(extract_face(synth_face(0, 0, base))[0])
    # same identity, rendered with a 10 degree yaw
    yawed = zero.with_points(
        (zero.points - zero.points.mean(0)) @ rotation_about([0, 1, 0], math.radians(10)).T
        + zero.points.mean(0))
    res = icp_align(yawed, zero, IcpConfig(tolerance=1e-10))
    assert math.degrees(res.transform.angle()) == pytest.approx(10.0, abs=0.5)


def test_icp_degenerate_pairing():
    model = PointCloud3D([[0.0, 0.0, 0.0]])
    query = PointCloud3D([[1.0, 0, 0], [2.0, 0, 0]])
    with pytest.raises(DegenerateGeometryError):
        icp_align(query, model)


def test_icp_empty():
    with pytest.raises(EmptyFaceError):
        icp_align(np.zeros((0, 3)), np.zeros((3, 3)))


def test_resample_depth_nearest_neighbour():
    spec = GridSpec(3, 3, 0.0, 2.0, 0.0, 2.0)
    pts = np.array([[0.1, 1.9, 5.0], [1.0, 1.0, 7.0], [1.9, 0.1, 9.0]])
    g = resample_depth(PointCloud3D(pts), spec, max_dist=0.5)
    assert g.valid.tolist() == [[True, False, False], [False, True, False], [False, False, True]]
    assert g.z[0, 0] == 5.0 and g.z[1, 1] == 7.0 and g.z[2, 2] == 9.0


def test_afm_identical_faces_exact():
    spec = GridSpec(8, 8, 0, 7, 0, 7)
    g = make_grid(np.arange(64.0).reshape(8, 8), step=1.0)
    afm = average_faces([g, g, g], spec)
    assert np.array_equal(afm.grid.z, g.z)
    assert np.all(afm.support_count == 3)


def test_afm_majority_rule():
    spec = GridSpec(1, 3, 0, 2, 0, 0)
    z = np.ones((1, 3))
    a = make_grid(z, np.array([[1, 1, 0]], bool))
    b = make_grid(z, np.array([[1, 0, 0]], bool))
    c = make_grid(z, np.array([[1, 1, 1]], bool))
    afm = average_faces([a, b, c], spec)
    assert afm.grid.valid.tolist() == [[True, True, False]]


@pytest.mark.parametrize("n", [2, 8, 32])
def test_afm_noise_shrinks(n):
    # Monte-Carlo over seeds: rms deviation of the mean ~ sigma / sqrt(n)
    spec = GridSpec(16, 16, 0, 15, 0, 15)
    base = np.linspace(0, 10, 256).reshape(16, 16)
    devs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        grids = [make_grid(base + rng.normal(0, 1.0, base.shape)) for _ in range(n)]
        afm = average_faces(grids, spec)
        devs.append(np.sqrt(np.mean((afm.grid.z - base) ** 2)))
    assert np.mean(devs) == pytest.approx(1 / math.sqrt(n), rel=0.15)


def disc(n, radius):
    rr, cc = np.indices((n, n))
    return (rr - n / 2) ** 2 + (cc - n / 2) ** 2 <= radius ** 2


def test_ellipse_on_filled_disc():
    m = disc(40, 12)
    e = fit_crop_ellipse(m, 1.0)
    rr, cc = np.nonzero(m)
    assert np.all(e.contains(rr, cc))
    assert abs(e.center[0] - rr.mean()) < 0.5 and abs(e.center[1] - cc.mean()) < 0.5
    assert fit_crop_ellipse(m, 0.5).area < e.area


def test_ellipse_on_known_ellipse():
    rr, cc = np.indices((60, 60))
    m = ((rr - 30) / 20.0) ** 2 + ((cc - 28) / 10.0) ** 2 <= 1
    e = fit_crop_ellipse(m, 1.0)
    assert e.semi_axes[0] / e.semi_axes[1] == pytest.approx(2.0, rel=0.05)
    assert np.all(e.contains(*np.nonzero(m)))


def test_ellipse_single_cell():
    m = np.zeros((5, 5), bool)
    m[2, 3] = True
    e = fit_crop_ellipse(m, 0.95)
    assert e.center == (2.0, 3.0) and e.semi_axes == (1.0, 1.0)


def test_crop_grid_and_cloud():
    e = CropEllipse((5.0, 5.0), (2.0, 3.0))
    g = make_grid(np.zeros((11, 11)))
    out = apply_crop(g, e)
    assert out.valid[5, 5] and not out.valid[5, 9] and not out.valid[1, 5]
    spec = GridSpec(11, 11, 0, 10, 0, 10)
    pts = np.array([[5.0, 5.0, 1.0], [5.0 + 6.0, 5.0, 1.0]])
    kept = apply_crop(PointCloud3D(pts), e, spec)
    assert len(kept) == 1
    with pytest.raises(EmptyFaceError):
        apply_crop(PointCloud3D(pts[1:]), e, spec)


def test_crop_area_rasterisation():
    e = CropEllipse((50.0, 50.0), (20.0, 30.0))
    out = apply_crop(make_grid(np.zeros((101, 101))), e)
    assert out.n_valid == pytest.approx(e.area, rel=0.02)


def test_register_identical_up_to_rigid():
    base = face_cloud()
    rng = np.random.default_rng(0)
    faces = [base]
    for i in range(3):
        t = RigidTransform(rotation_about(rng.normal(size=3), math.radians(4)), rng.normal(size=3) * 3)
        faces.append(PointCloud3D(t.apply(base.points), "0", f"f{i}"))
    cfg = RegistrationConfig(icp=IcpConfig(tolerance=1e-12, max_iterations=100))
    res = register_all(faces, cfg)
    for f in res.faces[1:]:
        assert pairwise_rms(res.faces[0], f) < 1e-2


def test_register_copy_pair():
    base = face_cloud()
    res = register_all([base, base.with_points(base.points.copy())])
    assert pairwise_rms(res.faces[0], res.faces[1]) < 1e-6


def test_fine_beats_coarse():
    faces = [face_cloud(0, j, SynthParams()) for j in range(5)]
    res = register_all(faces)

    def mean_pairwise(cl):
        return np.mean([pairwise_rms(a, b) for i, a in enumerate(cl) for b in cl[i + 1:]])
    # compare on the same cropped footprint
    coarse = [apply_crop(f, res.ellipse, res.afm.spec) for f in res.coarse]
    assert mean_pairwise(res.faces) < mean_pairwise(coarse)


def test_build_afm_returns_aligned():
    faces = [face_cloud(0, j) for j in range(3)]
    afm, aligned = build_afm(faces, rows=32, cols=32)
    assert isinstance(afm, AverageFaceModel) and len(aligned) == 3
    assert afm.grid.rows == 32 and afm.grid.n_valid > 0
