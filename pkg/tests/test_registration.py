import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simgrasp.cloud import PointCloud, voxel_downsample
from simgrasp.errors import CoarseFailureError
from simgrasp.registration import (PlaneSegment, RegistrationParams, RegistrationTarget, choose_model_plane,
                                   detect_planes, icp, kabsch, pdm_coarse, ransac_coarse, register)
from simgrasp.scene import box
from simgrasp.transforms import axis_angle, invert, make_transform

from conftest import rigid, sphere_cloud


def pose_error(T, truth):
    d = invert(truth) @ T
    ang = math.degrees(math.acos(np.clip((np.trace(d[:3, :3]) - 1) / 2, -1, 1)))
    return float(np.linalg.norm(d[:3, 3])), ang


def box_surface(size=(0.12, 0.08, 0.05), spacing=0.003, seed=0):
    cloud, _ = box(size).sample_surface(spacing, seed)
    return cloud


def three_faces(size=(0.12, 0.08, 0.05)):
    full = box_surface(size, spacing=0.002)
    keep = np.any(full.normals > 0.5, axis=1)
    return voxel_downsample(full.subset(np.flatnonzero(keep)), 0.004)


def test_three_visible_faces_give_three_planes():
    size = (0.12, 0.08, 0.05)
    planes = detect_planes(three_faces(size))
    assert len(planes) == 3
    truth = sorted([size[0] * size[1], size[0] * size[2], size[1] * size[2]], reverse=True)
    for seg, area in zip(planes, truth):
        assert seg.area == pytest.approx(area, rel=0.05)
    assert [p.area for p in planes] == sorted([p.area for p in planes], reverse=True)


def test_sphere_has_no_plane():
    assert detect_planes(sphere_cloud(3000, 0.05)) == []


def test_noisy_plane_recovered():
    from simgrasp.cloud import estimate_normals

    rng = np.random.default_rng(0)
    xy = rng.uniform(-0.1, 0.1, (3000, 2))
    pts = np.column_stack([xy, rng.normal(0, 0.001, 3000)])
    cloud = estimate_normals(PointCloud(pts), 0.01, viewpoint=(0, 0, 1))
    planes = detect_planes(cloud)
    assert planes
    assert math.degrees(math.acos(abs(planes[0].normal[2]))) < 3.0


def test_kabsch_recovers_transform():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(20, 3))
    T = rigid(rng)
    b = a @ T[:3, :3].T + T[:3, 3]
    assert np.allclose(kabsch(a, b), T, atol=1e-12)


def test_pdm_half_box_recovers_pose():
    c = voxel_downsample(box_surface(), 0.004)
    T = make_transform(axis_angle([0.3, -0.5, 0.8], 0.9), [0.2, -0.1, 0.3])
    # the half of the box with z > 0 keeps the full top face, the largest plane
    half = c.subset(np.flatnonzero(c.points[:, 2] > -0.005))
    p = half.transformed(T)
    planes = detect_planes(p)
    target = RegistrationTarget(c)
    est = pdm_coarse(p, planes[0], target)
    res = icp(p, target, est)
    dist, ang = pose_error(res.transform, invert(T))
    assert dist < 0.005 and ang < 10.0


def test_pdm_sweep_recovers_rotation_about_normal():
    c = voxel_downsample(box_surface(), 0.004)
    T = make_transform(axis_angle([0, 0, 1.0], math.radians(40)))
    p = c.transformed(T)
    target = RegistrationTarget(c)
    est = pdm_coarse(p, detect_planes(p)[0], target)
    dist, ang = pose_error(est, invert(T))
    assert ang <= 10.0 + 1e-6


def test_choose_model_plane_single_and_empty():
    seg = PlaneSegment(np.zeros(3), np.array([0, 0, 1.0]), np.eye(3)[:2], 0.5, np.arange(3))
    tiny = PlaneSegment(np.ones(3), np.array([0, 0, 1.0]), np.eye(3)[:2], 0.001, np.arange(3))
    assert choose_model_plane(seg, [tiny], np.zeros(3)) is tiny
    from simgrasp.errors import NoPlaneError
    with pytest.raises(NoPlaneError):
        choose_model_plane(seg, [], np.zeros(3))


def test_icp_examples():
    c = voxel_downsample(box_surface(), 0.004)
    truth = make_transform(axis_angle([1.0, 1.0, 0], math.radians(8)), [0.01, -0.012, 0.005])
    p = c.transformed(invert(truth))
    res = icp(p, c, np.eye(4))
    assert res.fitness > 0.99 and res.inlier_rmse < 1e-4
    same = icp(c, c, np.eye(4))
    assert same.fitness == 1.0 and np.allclose(same.transform, np.eye(4))
    far = c.transformed(make_transform(np.eye(3), [1.0, 0, 0]))
    out = icp(far, c, np.eye(4))
    assert out.fitness == 0.0 and np.array_equal(out.transform, np.eye(4))


@given(st.integers(0, 10_000))
@settings(max_examples=15)
def test_icp_never_worsens(seed):
    rng = np.random.default_rng(seed)
    c = voxel_downsample(box_surface(seed=seed % 5), 0.006)
    init = make_transform(axis_angle(rng.normal(size=3), rng.uniform(0, 0.6)), rng.uniform(-0.04, 0.04, 3))
    target = RegistrationTarget(c)
    moved = c.points @ init[:3, :3].T + init[:3, 3]
    d, _ = target.index.nearest(moved)
    before = float((d <= 0.02).mean())
    assert icp(c, target, init).fitness >= before


def test_ransac_exact_copy_and_minimal_set():
    c = voxel_downsample(box_surface(), 0.006)
    T = rigid(np.random.default_rng(2), 0.1)
    p = c.transformed(invert(T))
    corr = np.column_stack([np.arange(len(c)), np.arange(len(c))])
    est = ransac_coarse(p, c, corr, iterations=200, seed=0)
    moved = p.points @ est[:3, :3].T + est[:3, 3]
    assert (np.linalg.norm(moved - c.points, axis=1) <= 0.02).mean() > 0.9
    three = ransac_coarse(p, c, corr[:3], iterations=10)
    assert np.allclose(three, kabsch(p.points[:3], c.points[:3]), atol=1e-9)
    with pytest.raises(CoarseFailureError):
        ransac_coarse(p, c, corr[:2])


def test_ransac_seeded_is_repeatable():
    c = voxel_downsample(box_surface(), 0.006)
    rng = np.random.default_rng(3)
    corr = np.column_stack([np.arange(len(c)), rng.integers(0, len(c), len(c))])
    a = ransac_coarse(c, c, corr, iterations=500, seed=9)
    b = ransac_coarse(c, c, corr, iterations=500, seed=9)
    assert a.tobytes() == b.tobytes()


def test_register_partial_box_against_larger_box():
    model = box_surface((0.14, 0.09, 0.055))
    part = three_faces((0.12, 0.08, 0.05)).transformed(rigid(np.random.default_rng(4), 0.2))
    res = register(part, model)
    assert res.method == "pdm-icp"
    assert res.fitness > 0.8


def test_register_sparse_noisy_cloud_uses_ransac():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(150, 3)) * 0.03
    nrm = rng.normal(size=(150, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cloud = PointCloud(pts, nrm)
    assert register(cloud, cloud).method == "ransac-icp"


def test_register_self_is_identity():
    c = box_surface()
    res = register(c, c)
    dist, ang = pose_error(res.transform, np.eye(4))
    assert res.fitness >= 0.99 and dist < 1e-3 and ang < 0.5


def test_pdm_is_deterministic():
    model = box_surface((0.14, 0.09, 0.055))
    part = three_faces().transformed(rigid(np.random.default_rng(6), 0.2))
    runs = [register(part, model, coarse="pdm") for _ in range(3)]
    assert all(r.transform.tobytes() == runs[0].transform.tobytes() for r in runs)


def test_params_validation():
    with pytest.raises(ValueError):
        RegistrationParams(voxel=0)
    with pytest.raises(ValueError):
        RegistrationParams(sweep_steps=0)
