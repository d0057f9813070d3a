"""Support-aligned bounding boxes and size similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, SpatialIndex
from .errors import DegenerateProjectionError, InsufficientPointsError, InvalidInputError, NoContactRegionError
from .transforms import orthonormal_basis

PROJECTION_GRID = 0.005
MIN_EXTENT = 1e-6


@dataclass(frozen=True)
class SortedExtents:
    """Box side lengths in descending order (meters)."""

    values: tuple[float, float, float]

    def __post_init__(self):
        v = tuple(float(x) for x in self.values)
        if len(v) != 3:
            raise InvalidInputError("extents need three values")
        if not (v[0] >= v[1] >= v[2] > 0):
            raise InvalidInputError(f"extents must be positive and descending, got {v}")
        object.__setattr__(self, "values", v)

    @classmethod
    def of(cls, lengths) -> "SortedExtents":
        lengths = [max(float(x), MIN_EXTENT) for x in lengths]
        return cls(tuple(sorted(lengths, reverse=True)))

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


@dataclass(frozen=True, eq=False)
class SOBB:
    """Box with one axis pinned to the support normal.

    ``axes`` rows are (n, u, v); ``extents`` are full lengths along them.
    """

    center: np.ndarray
    axes: np.ndarray
    extents: np.ndarray

    @property
    def sorted_extents(self) -> SortedExtents:
        return SortedExtents.of(self.extents)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) @ self.axes.T

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        return np.all(np.abs(self.to_local(points)) <= self.extents / 2 + tol, axis=-1)

    def segment_intersection(self, a: np.ndarray, b: np.ndarray) -> tuple[float, float] | None:
        """Parameters (t0, t1) in [0, 1] where segment a->b is inside the box (slab test)."""
        a_l, b_l = self.to_local(a), self.to_local(b)
        d = b_l - a_l
        half = self.extents / 2
        t0, t1 = 0.0, 1.0
        for k in range(3):
            if abs(d[k]) < 1e-15:
                if abs(a_l[k]) > half[k]:
                    return None
                continue
            ta, tb = (-half[k] - a_l[k]) / d[k], (half[k] - a_l[k]) / d[k]
            t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
            if t0 > t1:
                return None
        return t0, t1


def aabb_extents(cloud: PointCloud) -> SortedExtents:
    """Sorted axis-aligned extents, used for canonically posed database models."""
    pts = cloud.points
    return SortedExtents.of(pts.max(axis=0) - pts.min(axis=0))


def _angle_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.degrees(np.arccos(np.clip(a @ b, -1.0, 1.0)))


def support_normal_nonflat(obj: PointCloud, support: PointCloud, d_max: float = 0.02,
                           outlier_deg: float = 30.0) -> np.ndarray:
    """Mean normal of the support region touching the object.

    Support points farther than ``d_max`` from every object point are
    ignored; normals deviating more than ``outlier_deg`` from the mean are
    rejected and the mean recomputed until the inlier set stops changing.
    """
    if not support.has_normals:
        raise InvalidInputError("support cloud needs normals")
    dist, _ = SpatialIndex(obj.points).nearest(support.points)
    near = dist <= d_max
    if not near.any():
        raise NoContactRegionError(f"no support point within {d_max} m of the object")
    normals = support.normals[near]
    keep = np.ones(len(normals), dtype=bool)
    for _ in range(100):
        mean = normals[keep].sum(axis=0)
        mean /= np.linalg.norm(mean)
        new_keep = _angle_deg(normals, mean) <= outlier_deg
        if not new_keep.any() or np.array_equal(new_keep, keep):
            break
        keep = new_keep
    mean = normals[keep].sum(axis=0)
    return mean / np.linalg.norm(mean)


def _grid_means(xy: np.ndarray, grid: float) -> np.ndarray:
    cells = np.floor(xy / grid + 0.5).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 2))
    np.add.at(sums, inverse, xy)
    return sums / counts[:, None]


def _frame_box(pts: np.ndarray, n: np.ndarray, u: np.ndarray):
    R = np.vstack([n, u, np.cross(n, u)])
    coords = pts @ R.T
    return R, coords.min(axis=0), coords.max(axis=0)


def build_sobb(cloud: PointCloud, support_normal, grid: float = PROJECTION_GRID) -> SOBB:
    """Bounding box with one axis along ``support_normal`` and the other two
    from the 2D principal axes of the grid-thinned projection.

    When the footprint aligned with the world axes is strictly smaller than
    the principal one, that footprint is used instead.
    """
    pts = cloud.points
    if len(pts) < 3:
        raise InsufficientPointsError("bounding box needs at least 3 points")
    n = np.asarray(support_normal, dtype=float)
    if abs(np.linalg.norm(n) - 1) > 1e-6:
        raise InvalidInputError("support normal must be unit length")
    e1, e2 = orthonormal_basis(n)
    centered = pts - pts.mean(axis=0)
    xy = np.column_stack([centered @ e1, centered @ e2])
    raw_sv, raw_axes = np.linalg.svd(xy, full_matrices=False)[1:]
    if raw_sv[1] <= 1e-9 * max(raw_sv[0], 1e-12):
        raise DegenerateProjectionError("projected points are collinear")
    # thin in the raw principal frame so symmetric clouds stay symmetric
    local = xy @ raw_axes.T
    thinned = _grid_means(local, grid)
    thinned -= thinned.mean(axis=0)
    sv, axes = np.linalg.svd(thinned, full_matrices=False)[1:] if len(thinned) >= 2 else (raw_sv, np.eye(2))
    d2 = raw_axes.T @ axes[0]
    # in-plane direction closest to world x
    x = np.array([1.0, 0.0, 0.0]) - n[0] * n
    if np.linalg.norm(x) < 1e-6:
        x = np.array([0.0, 1.0, 0.0]) - n[1] * n
    u_world = x / np.linalg.norm(x)
    if len(thinned) < 2 or sv[0] - sv[1] <= 1e-9 * sv[0]:
        u = u_world
    else:
        u = d2[0] * e1 + d2[1] * e2
        u /= np.linalg.norm(u)
        lead = np.flatnonzero(np.abs(u) > 1e-9)[0]
        if u[lead] < 0:
            u = -u
    R, lo, hi = _frame_box(pts, n, u)
    # the world-aligned footprint wins only when strictly smaller
    R_w, lo_w, hi_w = _frame_box(pts, n, u_world)
    if np.prod((hi_w - lo_w)[1:]) < np.prod((hi - lo)[1:]) * (1 - 1e-12):
        R, lo, hi = R_w, lo_w, hi_w
    extents = np.maximum(hi - lo, MIN_EXTENT)
    center = ((lo + hi) / 2) @ R
    return SOBB(center=center, axes=R, extents=extents)


def ss(observed: SortedExtents, model: SortedExtents) -> float:
    """Euclidean distance between descending-sorted extent triples."""
    a = np.sort(np.asarray(observed.values))[::-1]
    b = np.sort(np.asarray(model.values))[::-1]
    return float(np.sqrt(np.sum((a - b) ** 2)))


def dimensional_match(observed: SortedExtents, model: SortedExtents, ss_max: float = 0.1) -> bool:
    return ss(observed, model) < ss_max
