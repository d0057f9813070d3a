"""Rigid alignment of an observed partial cloud onto a complete model cloud.

Coarse alignment matches the largest observed plane to the model plane of
most similar area and sweeps rotations about the shared normal; when no
plane is found, a seeded RANSAC over FPFH correspondences takes over.
Point-to-point ICP refines either result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .cloud import PointCloud, SpatialIndex, self_pairs, surface_variation, voxel_downsample
from .descriptor import fpfh_batch
from .errors import CoarseFailureError, InvalidInputError, NoPlaneError, RegistrationFailedError
from .transforms import axis_angle, invert, make_transform


@dataclass(frozen=True)
class RegistrationParams:
    voxel: float = 0.005
    plane_dist_tol: float = 0.005
    plane_min_inliers: int = 30
    plane_normal_deg: float = 20.0
    plane_flat_deg: float = 5.0
    sweep_steps: int = 36
    area_tie: float = 0.05
    icp_max_iter: int = 50
    icp_corr_dist: float = 0.02
    icp_rel_tol: float = 1e-6
    ransac_iters: int = 10000
    ransac_inlier: float = 0.02
    ransac_seed: int = 0
    fpfh_radius: float = 0.025

    def __post_init__(self):
        for name in ("voxel", "plane_dist_tol", "icp_corr_dist", "ransac_inlier", "fpfh_radius"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.sweep_steps < 1 or self.icp_max_iter < 1 or self.ransac_iters < 1:
            raise InvalidInputError("iteration counts must be >= 1")


@dataclass(frozen=True, eq=False)
class PlaneSegment:
    centroid: np.ndarray
    normal: np.ndarray
    in_plane_axes: np.ndarray
    area: float
    inlier_indices: np.ndarray

    @property
    def frame(self) -> np.ndarray:
        """Rigid transform whose columns are (axis1, axis2, normal) at the centroid."""
        R = np.column_stack([self.in_plane_axes[0], self.in_plane_axes[1], self.normal])
        return make_transform(R, self.centroid)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: np.ndarray
    fitness: float
    inlier_rmse: float
    method: str

    def to_dict(self) -> dict:
        return {"transform": self.transform.tolist(), "fitness": self.fitness,
                "inlier_rmse": self.inlier_rmse, "method": self.method}


# --------------------------------------------------------------- planes

def _csr_neighbors(points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    i, j = self_pairs(points, radius)
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    indptr = np.searchsorted(i, np.arange(len(points) + 1))
    return indptr, j


def _fit_plane(pts: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    n = np.linalg.svd(pts - c, full_matrices=False)[2][2]
    if n @ reference < 0:
        n = -n
    return c, n


def _segment(points: np.ndarray, members: np.ndarray, normal: np.ndarray) -> PlaneSegment | None:
    pts = points[members]
    c = pts.mean(axis=0)
    centered = pts - c
    centered_in = centered - np.outer(centered @ normal, normal)
    vt = np.linalg.svd(centered_in, full_matrices=False)[2]
    a1 = vt[0] - (vt[0] @ normal) * normal
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(normal, a1)
    uv = np.column_stack([centered @ a1, centered @ a2])
    try:
        area = ConvexHull(uv).volume
    except QhullError:
        return None
    if area <= 0:
        return None
    return PlaneSegment(c, normal, np.vstack([a1, a2]), float(area), np.sort(members))


def default_neighbor_radius(points: np.ndarray) -> float:
    if len(points) < 2:
        return 1e-3
    # about ten neighbors per point keeps irregular samplings connected
    k = min(9, len(points))
    d, _ = cKDTree(points).query(points, k=k)
    return max(1.2 * float(np.median(d[:, -1])), 1e-4)


def detect_planes(cloud: PointCloud, dist_tol: float = 0.005, min_inliers: int = 30, normal_deg: float = 20.0,
                  flat_deg: float = 5.0, neighbor_radius: float | None = None) -> list[PlaneSegment]:
    """Region-growing plane segmentation, largest area first.

    Seeds are taken in order of increasing surface variation. A region
    grows through neighbors within ``dist_tol`` of the current plane whose
    normals are within ``normal_deg`` of it, refitting after every round.
    Regions whose member normals deviate on average by more than
    ``flat_deg`` from the fitted normal are curved patches and are dropped.
    """
    if not cloud.has_normals:
        raise InvalidInputError("plane detection needs normals")
    pts, nrm = cloud.points, cloud.normals
    if len(pts) < max(min_inliers, 3):
        return []
    radius = neighbor_radius or default_neighbor_radius(pts)
    indptr, nbr = _csr_neighbors(pts, radius)
    curvature = surface_variation(pts, radius)
    cos_gate = np.cos(np.radians(normal_deg))
    assigned = np.zeros(len(pts), dtype=bool)
    tried = np.zeros(len(pts), dtype=bool)
    segments = []
    for seed in np.argsort(curvature, kind="stable"):
        if assigned[seed] or tried[seed]:
            continue
        in_region = np.zeros(len(pts), dtype=bool)
        in_region[seed] = True
        region = [seed]
        frontier = np.array([seed])
        # boundary points rejected under an earlier fit are tested again after each refit
        pending = np.empty(0, dtype=np.int64)
        c, n = pts[seed], nrm[seed]
        while len(frontier):
            cand = np.unique(np.concatenate([pending] + [nbr[indptr[f]:indptr[f + 1]] for f in frontier]))
            cand = cand[~in_region[cand] & ~assigned[cand]]
            if not len(cand):
                break
            ok = (np.abs((pts[cand] - c) @ n) <= dist_tol) & (nrm[cand] @ n >= cos_gate)
            frontier, pending = cand[ok], cand[~ok]
            in_region[frontier] = True
            region.extend(frontier.tolist())
            if len(region) >= 3:
                c, n = _fit_plane(pts[region], nrm[seed])
        members = np.array(region)
        # points of a rejected region do not seed again
        tried[members] = True
        if len(region) < min_inliers:
            continue
        dev = np.degrees(np.arccos(np.clip(nrm[members] @ n, -1, 1)))
        if dev.mean() > flat_deg:
            continue
        seg = _segment(pts, members, n)
        if seg is None:
            continue
        assigned[members] = True
        segments.append(seg)
    segments.sort(key=lambda s: (-s.area, tuple(s.centroid)))
    return segments


# ----------------------------------------------------------------- core

def kabsch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Least-squares rigid transform mapping points ``a`` onto ``b``."""
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    H = (a - ca).T @ (b - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return make_transform(R, cb - R @ ca)


def _batch_kabsch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized Kabsch over the leading axis of (m, k, 3) arrays."""
    ca, cb = a.mean(axis=1, keepdims=True), b.mean(axis=1, keepdims=True)
    H = np.einsum("mki,mkj->mij", a - ca, b - cb)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.tile(np.eye(3), (len(a), 1, 1))
    D[:, 2, 2] = d
    R = V @ D @ np.swapaxes(U, 1, 2)
    t = cb[:, 0] - np.einsum("mij,mj->mi", R, ca[:, 0])
    T = np.tile(np.eye(4), (len(a), 1, 1))
    T[:, :3, :3] = R
    T[:, :3, 3] = t
    return T


@dataclass
class RegistrationTarget:
    """A model cloud prepared for repeated registration (downsampled, indexed)."""

    cloud: PointCloud
    params: RegistrationParams = field(default_factory=RegistrationParams)
    _planes: list | None = field(default=None, repr=False)
    _features: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.index = SpatialIndex(self.cloud.points)

    @classmethod
    def from_cloud(cls, cloud: PointCloud, params: RegistrationParams = RegistrationParams()) -> "RegistrationTarget":
        return cls(voxel_downsample(cloud, params.voxel), params)

    @property
    def planes(self) -> list[PlaneSegment]:
        if self._planes is None:
            p = self.params
            self._planes = detect_planes(self.cloud, p.plane_dist_tol, p.plane_min_inliers, p.plane_normal_deg,
                                         p.plane_flat_deg)
        return self._planes

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            self._features = fpfh_batch(self.cloud, np.arange(len(self.cloud)), self.params.fpfh_radius)
        return self._features


def _evaluate(p_pts: np.ndarray, target: RegistrationTarget, T: np.ndarray, corr_dist: float):
    moved = p_pts @ T[:3, :3].T + T[:3, 3]
    d, j = target.index.nearest(moved)
    mask = d <= corr_dist
    fitness = float(mask.mean())
    rmse = float(np.sqrt(np.mean(d[mask] ** 2))) if mask.any() else 0.0
    return fitness, rmse, mask, j, moved


def icp(p: PointCloud, target: RegistrationTarget | PointCloud, init: np.ndarray, max_iter: int = 50,
        corr_dist: float = 0.02, rel_tol: float = 1e-6, method: str = "icp") -> RegistrationResult:
    """Point-to-point ICP. The best pose seen, init included, is returned, so
    the fitness never drops below that of ``init``."""
    if not isinstance(target, RegistrationTarget):
        target = RegistrationTarget(target)
    init = np.asarray(init, dtype=float)
    pts = p.points
    c_pts = target.cloud.points
    T = init.copy()
    fitness, rmse, mask, j, moved = _evaluate(pts, target, T, corr_dist)
    best = (fitness, -rmse, T)
    if not mask.any():
        return RegistrationResult(init, 0.0, 0.0, method)
    prev = rmse
    for _ in range(max_iter):
        if mask.sum() < 3:
            break
        step = kabsch(moved[mask], c_pts[j[mask]])
        T = step @ T
        fitness, rmse, mask, j, moved = _evaluate(pts, target, T, corr_dist)
        if (fitness, -rmse) > best[:2]:
            best = (fitness, -rmse, T)
        if not mask.any():
            break
        if prev > 0 and abs(prev - rmse) / prev < rel_tol:
            break
        prev = rmse
    fitness, neg_rmse, T = best
    return RegistrationResult(T, fitness, -neg_rmse, method)


def _rotation_about_z(angle: float) -> np.ndarray:
    return make_transform(axis_angle([0.0, 0.0, 1.0], angle))


_FLIP = make_transform(np.diag([1.0, -1.0, -1.0]))


def choose_model_plane(o_p: PlaneSegment, planes_c: list[PlaneSegment], c_centroid: np.ndarray,
                       area_tie: float = 0.05) -> PlaneSegment:
    if not planes_c:
        raise NoPlaneError("model has no planes")
    gaps = np.array([abs(pc.area - o_p.area) for pc in planes_c])
    close = np.flatnonzero(gaps <= gaps.min() + area_tie * o_p.area)
    dist = [np.linalg.norm(planes_c[k].centroid - c_centroid) for k in close]
    return planes_c[int(close[int(np.argmin(dist))])]


def pdm_coarse(p: PointCloud, o_p: PlaneSegment, target: RegistrationTarget | PointCloud,
               planes_c: list[PlaneSegment] | None = None, steps: int = 36, area_tie: float = 0.05) -> np.ndarray:
    """Overlay the observed plane frame on the best-matching model plane and
    sweep rotations about the shared normal, with and without flipping it."""
    if not isinstance(target, RegistrationTarget):
        target = RegistrationTarget(target)
    if planes_c is None:
        planes_c = target.planes
    o_c = choose_model_plane(o_p, planes_c, target.cloud.centroid(), area_tie)
    to_p = invert(o_p.frame)
    best_score, best_T = np.inf, None
    for flip in (False, True):
        for k in range(steps):
            R = _rotation_about_z(2 * np.pi * k / steps)
            if flip:
                R = R @ _FLIP
            T = o_c.frame @ R @ to_p
            moved = p.points @ T[:3, :3].T + T[:3, 3]
            d, _ = target.index.nearest(moved)
            score = float(d.mean())
            if score < best_score:
                best_score, best_T = score, T
    return best_T


def fpfh_correspondences(p: PointCloud, target: RegistrationTarget, radius: float) -> np.ndarray:
    """(i, j) pairs linking each observed point to its nearest model point in FPFH space."""
    fp = fpfh_batch(p, np.arange(len(p)), radius)
    fc = target.features
    _, j = cKDTree(fc).query(fp, k=1)
    return np.column_stack([np.arange(len(p)), j])


def _distinct_triples(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    """``m`` uniformly drawn triples of distinct indices below ``n``."""
    i0 = rng.integers(0, n, m)
    i1 = rng.integers(0, n - 1, m)
    i1 += i1 >= i0
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 = rng.integers(0, n - 2, m)
    i2 += i2 >= lo
    i2 += i2 >= hi
    return np.column_stack([i0, i1, i2])


def ransac_coarse(p: PointCloud, target: RegistrationTarget | PointCloud, correspondences: np.ndarray,
                  iterations: int = 10000, inlier_dist: float = 0.02, seed: int = 0) -> np.ndarray:
    """Best three-correspondence rigid hypothesis by inlier count, refit on its inliers."""
    if not isinstance(target, RegistrationTarget):
        target = RegistrationTarget(target)
    corr = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
    if len(corr) < 3:
        raise CoarseFailureError("RANSAC needs at least 3 correspondences")
    a = p.points[corr[:, 0]]
    b = target.cloud.points[corr[:, 1]]
    rng = np.random.default_rng(seed)
    best_count, best_T = -1, None
    batch = 1000
    for start in range(0, iterations, batch):
        m = min(batch, iterations - start)
        picks = _distinct_triples(rng, len(corr), m)
        A, B = a[picks], b[picks]
        T = _batch_kabsch(A, B)
        resid = np.matmul(a, np.swapaxes(T[:, :3, :3], 1, 2)) + (T[:, None, :3, 3] - b)
        counts = (np.einsum("mki,mki->mk", resid, resid) <= inlier_dist ** 2).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_T = int(counts[k]), T[k]
    inliers = np.linalg.norm(a @ best_T[:3, :3].T + best_T[:3, 3] - b, axis=1) <= inlier_dist
    if inliers.sum() >= 3:
        return kabsch(a[inliers], b[inliers])
    return best_T


def register(p: PointCloud, target: RegistrationTarget | PointCloud,
             params: RegistrationParams = RegistrationParams(), coarse: str = "auto") -> RegistrationResult:
    """Coarse alignment (planes when the observation has one, else RANSAC)
    followed by ICP. ``coarse`` may force "pdm" or "ransac"."""
    if not p.has_normals:
        raise InvalidInputError("registration needs normals on the observed cloud")
    if not isinstance(target, RegistrationTarget):
        target = RegistrationTarget.from_cloud(target, params)
    pd = voxel_downsample(p, params.voxel)
    init, method = None, None
    if coarse in ("auto", "pdm"):
        planes = detect_planes(pd, params.plane_dist_tol, params.plane_min_inliers, params.plane_normal_deg,
                               params.plane_flat_deg)
        if planes and target.planes:
            init = pdm_coarse(pd, planes[0], target, target.planes, params.sweep_steps, params.area_tie)
            method = "pdm-icp"
        elif coarse == "pdm":
            raise NoPlaneError("no plane in observation or model")
    if init is None:
        try:
            corr = fpfh_correspondences(pd, target, params.fpfh_radius)
            init = ransac_coarse(pd, target, corr, params.ransac_iters, params.ransac_inlier, params.ransac_seed)
        except CoarseFailureError as exc:
            raise RegistrationFailedError(str(exc)) from exc
        method = "ransac-icp"
    return icp(pd, target, init, params.icp_max_iter, params.icp_corr_dist, params.icp_rel_tol, method)
