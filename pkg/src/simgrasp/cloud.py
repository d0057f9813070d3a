"""Point cloud container and the geometry kernel shared by every module.

Neighbor queries go through :class:`SpatialIndex` (a thin layer over
``scipy.spatial.cKDTree``); :func:`knn_bruteforce` is the linear-scan
reference used to check it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientPointsError, InvalidInputError
from .transforms import apply_points, apply_vectors

NORMAL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions in meters with optional unit normals, parallel to points."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise InvalidInputError(
                    f"{len(nrm)} normals for {len(pts)} points"
                )
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > NORMAL_TOL:
                raise InvalidInputError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=int)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    def transformed(self, T: np.ndarray) -> "PointCloud":
        normals = None if self.normals is None else apply_vectors(T, self.normals)
        return PointCloud(apply_points(T, self.points), normals)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def normalize_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return v / n


class SpatialIndex:
    """Immutable k-d tree over a fixed set of points.

    Safe to query from several threads once built.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, query, k: int) -> np.ndarray:
        """Indices of the ``k`` nearest points, nearest first, ties by lower index."""
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        n = len(self.points)
        k = min(k, n)
        q = np.asarray(query, dtype=float)
        dist, _ = self._tree.query(q, k=k)
        radius = float(np.max(dist))
        # everything at the k-th distance is a tie candidate
        cand = np.asarray(
            self._tree.query_ball_point(q, radius * (1 + 1e-12) + 1e-15), dtype=int
        )
        d = np.linalg.norm(self.points[cand] - q, axis=1)
        order = np.lexsort((cand, d))
        return cand[order][:k]

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Batch nearest neighbor: (distances, indices) per query row."""
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=1)
        return d, i

    def query_knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batch kNN without exact tie handling (fast path for inner loops)."""
        return self._tree.query(np.asarray(queries, dtype=float), k=k)

    def radius(self, query, r: float) -> np.ndarray:
        return np.sort(np.asarray(self._tree.query_ball_point(np.asarray(query, float), r), dtype=int))

    def radius_pairs(self, queries: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All (query row, point index, distance) triples within ``r``, self pairs included."""
        qtree = cKDTree(np.asarray(queries, dtype=float))
        m = qtree.sparse_distance_matrix(self._tree, r, output_type="ndarray")
        order = np.lexsort((m["j"], m["i"]))
        m = m[order]
        return m["i"].astype(int), m["j"].astype(int), m["v"].astype(float)


def self_pairs(points: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric neighbor pairs (i, j), i != j, with |p_i - p_j| <= r, sorted by (i, j)."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(r, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((j, i))
    return i[order], j[order]


def knn(cloud: PointCloud, query, k: int) -> np.ndarray:
    if len(cloud) == 0:
        raise InvalidInputError("empty cloud")
    return SpatialIndex(cloud.points).knn(query, k)


def knn_bruteforce(points: np.ndarray, query, k: int) -> np.ndarray:
    """Linear-scan reference for :func:`knn` (same ordering contract)."""
    points = np.asarray(points, dtype=float)
    d = np.sqrt(((points - np.asarray(query, dtype=float)) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(points)), d))
    return order[: min(k, len(points))]


@dataclass(frozen=True)
class PcaTriple:
    singular_values: np.ndarray
    axes: np.ndarray  # rows are the principal axes


def pca3(points) -> PcaTriple:
    """Singular values and axes of the mean-centered point matrix, descending."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise InsufficientPointsError(f"pca3 needs >= 3 points, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if len(s) < 3:
        s = np.concatenate([s, np.zeros(3 - len(s))])
    return PcaTriple(singular_values=s, axes=_complete_basis(vt))


def _complete_basis(vt: np.ndarray) -> np.ndarray:
    axes = np.zeros((3, 3))
    axes[: len(vt)] = vt[:3]
    if len(vt) < 3:
        axes[2] = np.cross(axes[0], axes[1])
    return axes


def _normal_from_covariances(cov: np.ndarray) -> np.ndarray:
    _, vecs = np.linalg.eigh(cov)
    return vecs[..., :, 0]


def local_covariances(points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Covariance of every point's radius neighborhood (itself included) and
    the neighborhood sizes."""
    n = len(points)
    i, j = self_pairs(points, radius)
    ii = np.concatenate([i, np.arange(n)])
    jj = np.concatenate([j, np.arange(n)])
    counts = np.bincount(ii, minlength=n).astype(float)
    q = points[jj]
    mean = np.stack([np.bincount(ii, q[:, a], minlength=n) for a in range(3)], axis=1) / counts[:, None]
    second = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(ii, q[:, a] * q[:, b], minlength=n) / counts
            second[:, a, b] = s
            second[:, b, a] = s
    return second - mean[:, :, None] * mean[:, None, :], counts


def surface_variation(points: np.ndarray, radius: float) -> np.ndarray:
    """Smallest covariance eigenvalue over the eigenvalue sum (0 on a plane)."""
    cov, _ = local_covariances(points, radius)
    w = np.linalg.eigvalsh(cov)
    total = w.sum(axis=1)
    return np.where(total > 0, np.clip(w[:, 0], 0, None) / np.where(total > 0, total, 1), 0.0)


def estimate_normals(cloud: PointCloud, radius: float = 0.01, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals from radius neighborhoods, oriented toward ``viewpoint``.

    Points with fewer than three neighbors take the normal of the whole
    cloud's PCA.
    """
    if len(cloud) == 0:
        raise InvalidInputError("cannot estimate normals of an empty cloud")
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    pts = cloud.points
    n = len(pts)
    cov, counts = local_covariances(pts, radius)
    normals = _normal_from_covariances(cov)

    few = counts - 1 < 3
    if few.any():
        if n >= 3:
            global_normal = pca3(pts).axes[2]
        else:
            global_normal = np.array([0.0, 0.0, 1.0])
        normals[few] = global_normal
    normals = normalize_rows(normals)
    to_view = np.asarray(viewpoint, dtype=float) - pts
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1
    return PointCloud(pts, normals)


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel).astype(np.int64)


def voxel_downsample_indices(points: np.ndarray, voxel: float) -> np.ndarray:
    """Index of the input point nearest each occupied voxel's centroid.

    Output is ordered by voxel key (lexicographic), so it is deterministic.
    """
    if voxel <= 0:
        raise InvalidInputError("voxel must be positive")
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        raise InvalidInputError("empty cloud")
    keys = voxel_keys(pts, voxel)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(float)
    centroids = np.stack([np.bincount(inverse, pts[:, a], minlength=m) for a in range(3)], axis=1)
    centroids /= counts[:, None]
    d2 = ((pts - centroids[inverse]) ** 2).sum(axis=1)
    # lattice-like scans give exact ties up to rounding; quantize so they resolve by index
    d2 = np.round(d2 / (voxel * voxel * 1e-9))
    # per voxel: smallest distance, ties by lower index
    order = np.lexsort((np.arange(len(pts)), d2, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    return order[first]


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    return cloud.subset(voxel_downsample_indices(cloud.points, voxel))


def tangent_gap_deg(points: np.ndarray, normal: np.ndarray, center: np.ndarray) -> float:
    """Largest angular gap (degrees) of ``points`` around ``center`` in the tangent plane."""
    from .transforms import orthonormal_basis

    if len(points) == 0:
        return 360.0
    u, v = orthonormal_basis(normal)
    d = points - center
    ang = np.sort(np.arctan2(d @ v, d @ u))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    return float(np.degrees(gaps.max()))


def detect_boundary(cloud: PointCloud, radius: float = 0.01, max_gap_deg: float = 90.0,
                    indices=None, neighbors: PointCloud | None = None) -> np.ndarray:
    """Boundary mask from the angular-gap criterion.

    A point is on the boundary when its radius neighbors, projected into its
    tangent plane, leave an angular gap wider than ``max_gap_deg``.

    Args:
        cloud: cloud with normals.
        radius: neighborhood radius in meters.
        max_gap_deg: gap threshold.
        indices: optional subset of points to test; the mask then has one
            entry per index.
        neighbors: cloud supplying the neighborhoods (defaults to ``cloud``).
    """
    if not cloud.has_normals:
        raise InvalidInputError("detect_boundary needs normals")
    src = cloud if neighbors is None else neighbors
    idx = np.arange(len(cloud)) if indices is None else np.asarray(indices, dtype=int)
    q = cloud.points[idx]
    nq = cloud.normals[idx]
    index = SpatialIndex(src.points)
    qi, nj, dist = index.radius_pairs(q, radius)
    keep = dist > 1e-12
    qi, nj = qi[keep], nj[keep]
    m = len(idx)
    counts = np.bincount(qi, minlength=m)
    if len(qi) == 0:
        return np.ones(m, dtype=bool)

    # tangent bases per query point, vectorised version of orthonormal_basis
    helper = np.eye(3)[np.argmin(np.abs(nq), axis=1)]
    u = normalize_rows(helper - nq * np.einsum("ij,ij->i", helper, nq)[:, None])
    v = np.cross(nq, u)
    d = src.points[nj] - q[qi]
    ang = np.arctan2(np.einsum("ij,ij->i", d, v[qi]), np.einsum("ij,ij->i", d, u[qi]))

    width = counts.max()
    table = np.full((m, width + 1), 4 * np.pi)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    col = np.arange(len(qi)) - starts[qi]
    table[qi, col] = ang
    table[:, :width].sort(axis=1)
    rows = np.arange(m)
    table[rows, counts] = table[:, 0] + 2 * np.pi
    gaps = np.diff(table, axis=1)
    gaps[np.arange(width)[None, :] >= counts[:, None]] = -np.inf
    max_gap = np.degrees(gaps.max(axis=1))
    max_gap[counts == 0] = 360.0
    return max_gap > max_gap_deg


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY with x,y,z and optional nx,ny,nz vertex properties."""
    path = Path(path)
    with path.open("r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise InvalidInputError(f"{path}: not a PLY file")
        count = None
        props: list[str] = []
        in_vertex = False
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise InvalidInputError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    count = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if count is None:
            raise InvalidInputError(f"{path}: no vertex element")
        values = fh.read().split()
    need = count * len(props)
    if len(values) < need:
        raise InvalidInputError(f"{path}: truncated vertex data")
    data = np.array(values[:need], dtype=float).reshape(count, len(props))
    col = {name: k for k, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(k in col for k in ("nx", "ny", "nz")):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
    return PointCloud(pts, normals)


def write_ply(cloud: PointCloud, path) -> None:
    """Write ASCII PLY; floats use shortest round-trip repr so reads are exact."""
    path = Path(path)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property double x", "property double y", "property double z"]
    if cloud.has_normals:
        lines += ["property double nx", "property double ny", "property double nz"]
    lines.append("end_header")
    data = cloud.points if not cloud.has_normals else np.hstack([cloud.points, cloud.normals])
    body = "\n".join(" ".join(repr(float(x)) for x in row) for row in data)
    path.write_text("\n".join(lines) + "\n" + body + ("\n" if len(data) else ""), encoding="ascii")
