import numpy as np
import pytest
from hypothesis import given, strategies as st

from simgrasp.cloud import (PointCloud, SpatialIndex, detect_boundary, estimate_normals, knn, pca3, read_ply,
                            voxel_downsample, voxel_downsample_indices, write_ply)
from simgrasp.errors import InsufficientPointsError, InvalidInputError

from conftest import plane_cloud, random_rotation, sphere_cloud


def linear_knn(points, query, k):
    d = np.linalg.norm(points - query, axis=1)
    return sorted(range(len(points)), key=lambda i: (d[i], i))[:k]


def angular_gap_deg(points, normal, center):
    # brute force: try every neighbor as the start of a gap
    a = np.cross(normal, [1.0, 0, 0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(normal, [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    ang = sorted(np.degrees(np.arctan2((points - center) @ b, (points - center) @ a)) % 360)
    if len(ang) < 2:
        return 360.0
    gaps = [ang[i + 1] - ang[i] for i in range(len(ang) - 1)] + [360 - ang[-1] + ang[0]]
    return max(gaps)


def test_pointcloud_rejects_bad_normals():
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((3, 3)), np.ones((3, 3)))
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((3, 3)), np.tile([0, 0, 1.0], (2, 1)))


def test_normals_on_plane_face_viewpoint():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-0.1, 0.1, (100, 2)), np.zeros(100)])
    out = estimate_normals(PointCloud(pts), radius=0.05, viewpoint=(0, 0, 1))
    assert np.allclose(out.normals, [0, 0, 1], atol=1e-3)


def test_normals_on_sphere_are_radial():
    sph = sphere_cloud(3000, radius=1.0)
    out = estimate_normals(PointCloud(sph.points), radius=0.15, viewpoint=(0, 0, 0))
    # viewpoint at the center orients inward; compare directions up to that sign
    cosang = np.abs(np.sum(out.normals * sph.normals, axis=1))
    assert np.degrees(np.arccos(np.clip(cosang, -1, 1))).max() < 5.0


def test_normals_sparse_neighborhood_falls_back():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [1, 1, 0], [5, 5, 0.0]])
    out = estimate_normals(PointCloud(pts), radius=1.2, viewpoint=(0, 0, 10))
    assert np.allclose(out.normals[-1], [0, 0, 1], atol=1e-9)


def test_normals_empty_cloud_is_error():
    with pytest.raises(InvalidInputError):
        estimate_normals(PointCloud(np.zeros((0, 3))))


@given(st.integers(0, 10_000))
def test_normals_rotation_equivariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(200, 3)) * [0.05, 0.03, 0.005]
    view = np.array([0.0, 0.0, 1.0])
    R = random_rotation(rng)
    a = estimate_normals(PointCloud(pts), 0.03, view)
    b = estimate_normals(PointCloud(pts @ R.T), 0.03, R @ view)
    assert np.allclose(a.normals @ R.T, b.normals, atol=1e-6)


def test_voxel_small_cube_collapses():
    corners = np.array([[x, y, z] for x in (0, 0.01) for y in (0, 0.01) for z in (0, 0.01)]) + 0.001
    assert len(voxel_downsample(PointCloud(corners), 0.05)) == 1


def test_voxel_large_cube_keeps_corners():
    corners = np.array([[x, y, z] for x in (0, 0.1) for y in (0, 0.1) for z in (0, 0.1)]) + 0.001
    assert len(voxel_downsample(PointCloud(corners), 0.05)) == 8


def test_voxel_count_matches_hash_grid():
    g = np.arange(0, 0.1, 0.001)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])
    occupied = set()
    for p in pts:
        occupied.add(tuple(int(v) for v in np.floor(p / 0.015)))
    assert len(voxel_downsample(PointCloud(pts), 0.015)) == len(occupied)


@given(st.integers(0, 10_000), st.floats(0.005, 0.05))
def test_voxel_output_is_subset(seed, voxel):
    pts = np.random.default_rng(seed).uniform(-0.1, 0.1, (300, 3))
    idx = voxel_downsample_indices(pts, voxel)
    assert len(set(idx.tolist())) == len(idx) <= len(pts)
    keys = {tuple(k) for k in np.floor(pts[idx] / voxel).astype(int)}
    assert len(keys) == len(idx)


def test_boundary_disc_interior_and_half_plane_rim():
    g = np.arange(-0.05, 0.0501, 0.002)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])
    cloud = PointCloud(pts, np.tile([0, 0, 1.0], (len(pts), 1)))
    mask = detect_boundary(cloud, 0.01)
    center = int(np.argmin(np.linalg.norm(pts, axis=1)))
    assert not mask[center]
    rim = int(np.argmin(np.linalg.norm(pts - [0.0, -0.05, 0], axis=1)))
    assert mask[rim]


def test_boundary_matches_bruteforce_on_l_patch():
    g = np.arange(0, 0.06, 0.003)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])
    keep = (pts[:, 0] < 0.03) | (pts[:, 1] < 0.03)
    pts = pts[keep]
    cloud = PointCloud(pts, np.tile([0, 0, 1.0], (len(pts), 1)))
    mask = detect_boundary(cloud, 0.01)
    expected = []
    for i, p in enumerate(pts):
        d = np.linalg.norm(pts - p, axis=1)
        nb = pts[(d <= 0.01) & (np.arange(len(pts)) != i)]
        expected.append(angular_gap_deg(nb, np.array([0, 0, 1.0]), p) > 90.0)
    assert mask.tolist() == expected


def test_boundary_empty_on_closed_sphere():
    assert not detect_boundary(sphere_cloud(4000, 0.05), 0.015).any()


def test_knn_self_query_and_exhaustive():
    pts = np.random.default_rng(3).normal(size=(50, 3))
    assert knn(PointCloud(pts), pts[7], 1).tolist() == [7]
    full = knn(PointCloud(pts), np.zeros(3), 50)
    assert sorted(full.tolist()) == list(range(50))


def test_knn_matches_linear_scan():
    rng = np.random.default_rng(4)
    pts = rng.uniform(size=(500, 3))
    for q in rng.uniform(size=(5, 3)):
        assert knn(PointCloud(pts), q, 100).tolist() == linear_knn(pts, q, 100)


def test_knn_ties_break_by_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 2.0]])
    assert knn(PointCloud(pts), np.zeros(3), 3).tolist() == [0, 1, 2]


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_knn_distances_non_decreasing(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(60, 3))
    q = rng.normal(size=3)
    idx = SpatialIndex(pts).knn(q, k)
    d = np.linalg.norm(pts[idx] - q, axis=1)
    assert len(idx) == min(k, 60)
    assert np.all(np.diff(d) >= 0)


def test_pca_line_and_ellipse():
    t = np.linspace(0, 1, 50)
    line = np.outer(t, [1.0, 2.0, 3.0])
    assert np.allclose(pca3(line).singular_values[1:], 0, atol=1e-9)
    ang = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    ell = np.column_stack([2 * np.cos(ang), np.sin(ang), np.zeros_like(ang)])
    cov = np.cov(ell.T, bias=True)
    w, v = np.linalg.eigh(cov)
    res = pca3(ell)
    for k in range(3):
        assert abs(abs(res.axes[k] @ v[:, 2 - k]) - 1) < 1e-9
    assert np.allclose(res.singular_values ** 2 / len(ell), w[::-1], atol=1e-12)


def test_pca_needs_three_points():
    with pytest.raises(InsufficientPointsError):
        pca3(np.zeros((2, 3)))


@given(st.integers(0, 10_000))
def test_pca_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(100, 3)) * [3, 2, 1]
    R = random_rotation(rng)
    a = pca3(pts).singular_values
    b = pca3(pts @ R.T + rng.normal(size=3)).singular_values
    assert np.allclose(a, b, atol=1e-9)
    assert np.all(np.diff(a) <= 0)


def test_ply_round_trip(tmp_path):
    cloud = plane_cloud(50)
    write_ply(cloud, tmp_path / "c.ply")
    back = read_ply(tmp_path / "c.ply")
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.normals, cloud.normals)
