"""FPFH features and the clustered C-FPFH descriptor used for geometric matching.

A C-FPFH descriptor summarises a cloud by the dominant bin pair of each
sampled point's FPFH histogram (``pair_counts``) plus the PCA shape of every
connected cluster of samples sharing a pair (``pair_distributions``).
Partial-vs-complete comparison uses :func:`qs` and :func:`ds`.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .cloud import PointCloud, SpatialIndex, detect_boundary, pca3, self_pairs, voxel_downsample_indices
from .errors import DegenerateHistogramError, InvalidInputError, TooSparseError

N_BINS = 11
FPFH_DIM = 3 * N_BINS
DESCRIPTOR_VERSION = 1

FeaturePair = tuple[int, int]


def feature_pair(a: int, b: int) -> FeaturePair:
    a, b = int(a), int(b)
    if a == b:
        raise InvalidInputError("a feature pair needs two distinct bins")
    if not (0 <= a < FPFH_DIM and 0 <= b < FPFH_DIM):
        raise InvalidInputError(f"bin index out of range: {(a, b)}")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class DescriptorParams:
    sample_voxel: float = 0.015
    fpfh_radius: float = 0.01
    cluster_radius: float = 0.02
    normal_angle_max: float = 20.0
    boundary_radius: float = 0.01
    boundary_gap_deg: float = 90.0

    def __post_init__(self):
        for name in ("sample_voxel", "fpfh_radius", "cluster_radius", "normal_angle_max",
                     "boundary_radius", "boundary_gap_deg"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.cluster_radius <= self.sample_voxel:
            raise InvalidInputError("cluster_radius must exceed sample_voxel")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptorParams":
        return cls(**{k: float(v) for k, v in d.items()})


# ---------------------------------------------------------------- FPFH

def pair_features(ps, ns, pt, nt):
    """Darboux-frame features (alpha, phi, theta) for point pairs.

    Follows the usual convention: the source of the pair is the point whose
    normal makes the smaller angle with the connecting line. Returns the
    three feature arrays and a validity mask (False when the connecting line
    is parallel to the source normal).
    """
    d = pt - ps
    dist = np.linalg.norm(d, axis=1)
    dn = d / dist[:, None]
    a1 = np.einsum("ij,ij->i", ns, dn)
    a2 = np.einsum("ij,ij->i", nt, dn)
    swap = np.abs(a1) < np.abs(a2)
    n1 = np.where(swap[:, None], nt, ns)
    n2 = np.where(swap[:, None], ns, nt)
    dn = np.where(swap[:, None], -dn, dn)
    phi = np.where(swap, -a2, a1)
    v = np.cross(dn, n1)
    vn = np.linalg.norm(v, axis=1)
    valid = vn > 1e-12
    v = v / np.where(valid, vn, 1.0)[:, None]
    w = np.cross(n1, v)
    alpha = np.einsum("ij,ij->i", v, n2)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n2), np.einsum("ij,ij->i", n1, n2))
    return alpha, phi, theta, valid


def feature_bins(alpha, phi, theta) -> np.ndarray:
    """(M, 3) bin indices into the 33-bin layout [alpha | phi | theta]."""
    b_alpha = np.floor(N_BINS * (alpha + 1.0) * 0.5)
    b_phi = np.floor(N_BINS * (phi + 1.0) * 0.5)
    b_theta = np.floor(N_BINS * (theta + np.pi) / (2 * np.pi))
    b = np.stack([b_alpha, b_phi, b_theta], axis=1)
    b = np.clip(b, 0, N_BINS - 1).astype(int)
    return b + np.array([0, N_BINS, 2 * N_BINS])


def _spfh(cloud: PointCloud, centers: np.ndarray, index: SpatialIndex, radius: float,
          chunk: int = 4000) -> np.ndarray:
    """Simplified point feature histograms, each sub-histogram summing to 1."""
    out = np.zeros((len(centers), FPFH_DIM))
    pts, nrm = cloud.points, cloud.normals
    for start in range(0, len(centers), chunk):
        block = centers[start:start + chunk]
        qi, nj, dist = index.radius_pairs(pts[block], radius)
        keep = dist > 1e-12
        qi, nj = qi[keep], nj[keep]
        src = block[qi]
        alpha, phi, theta, valid = pair_features(pts[src], nrm[src], pts[nj], nrm[nj])
        qi = qi[valid]
        bins = feature_bins(alpha[valid], phi[valid], theta[valid])
        m = len(block)
        npairs = np.bincount(qi, minlength=m).astype(float)
        hist = np.zeros(m * FPFH_DIM)
        for col in range(3):
            hist += np.bincount(qi * FPFH_DIM + bins[:, col], minlength=m * FPFH_DIM)
        hist = hist.reshape(m, FPFH_DIM)
        nz = npairs > 0
        hist[nz] /= npairs[nz, None]
        out[start:start + chunk] = hist
    return out


def fpfh_batch(cloud: PointCloud, indices, radius: float = 0.01,
               index: SpatialIndex | None = None) -> np.ndarray:
    """FPFH histograms for the points at ``indices``, each normalised to sum 1.

    FPFH(p) = SPFH(p) + 1/k * sum_k SPFH(p_k) / |p - p_k| over the radius
    neighbors of p; a point without neighbors gets the all-zero vector.
    """
    if not cloud.has_normals:
        raise InvalidInputError("FPFH needs normals")
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    idx = np.asarray(indices, dtype=int).reshape(-1)
    if index is None:
        index = SpatialIndex(cloud.points)
    qi, nj, dist = index.radius_pairs(cloud.points[idx], radius)
    keep = dist > 1e-12
    qi, nj, dist = qi[keep], nj[keep], dist[keep]

    needed = np.unique(np.concatenate([idx, nj]))
    spfh = _spfh(cloud, needed, index, radius)
    row = np.searchsorted(needed, idx)
    own = spfh[row]

    m = len(idx)
    k = np.bincount(qi, minlength=m).astype(float)
    weights = 1.0 / dist
    contrib = spfh[np.searchsorted(needed, nj)] * weights[:, None]
    acc = np.zeros((m, FPFH_DIM))
    np.add.at(acc, qi, contrib)
    has = k > 0
    result = own.copy()
    result[has] += acc[has] / k[has, None]
    result[~has] = 0.0
    total = result.sum(axis=1)
    nz = total > 0
    result[nz] /= total[nz, None]
    return result


def fpfh(cloud: PointCloud, index: int, radius: float = 0.01) -> np.ndarray:
    return fpfh_batch(cloud, [index], radius)[0]


def dominant_pair(histogram, rel_tol: float = 1e-9) -> FeaturePair:
    """Indices of the two largest bins; near-equal values tie to the lower index."""
    h = np.asarray(histogram, dtype=float)
    if np.count_nonzero(h > 0) < 2:
        raise DegenerateHistogramError("histogram has fewer than two nonzero bins")
    top = h.max()
    first = int(np.flatnonzero(h >= top * (1 - rel_tol))[0])
    rest = h.copy()
    rest[first] = -np.inf
    second_val = rest.max()
    second = int(np.flatnonzero(rest >= second_val * (1 - rel_tol))[0])
    return feature_pair(first, second)


# ------------------------------------------------------------ clusters

@dataclass
class Cluster:
    members: np.ndarray
    pair: FeaturePair
    distribution: np.ndarray | None = None


def normalized_singular_values(points) -> np.ndarray:
    s = pca3(points).singular_values
    total = s.sum()
    if total <= 0:
        return np.array([1.0, 0.0, 0.0])
    return s / total


def _cluster_edges(samples: PointCloud, pairs: list, params: DescriptorParams):
    i, j = self_pairs(samples.points, params.cluster_radius)
    if len(i) == 0:
        return i, j
    codes = np.array([a * FPFH_DIM + b for a, b in pairs], dtype=int)
    cos_max = math.cos(math.radians(params.normal_angle_max))
    dots = np.einsum("ij,ij->i", samples.normals[i], samples.normals[j])
    ok = (codes[i] == codes[j]) & (dots >= cos_max - 1e-12)
    return i[ok], j[ok]


def cluster_samples(samples: PointCloud, pairs: list, params: DescriptorParams = DescriptorParams()) -> list[Cluster]:
    """Flood-fill clusters: neighbors within ``cluster_radius`` that share the
    feature pair and whose normals differ by at most ``normal_angle_max``.

    Clusters are ordered by their lowest member index; members ascending.
    """
    n = len(samples)
    if len(pairs) != n:
        raise InvalidInputError("pairs must be parallel to samples")
    if n == 0:
        return []
    i, j = _cluster_edges(samples, pairs, params)
    graph = coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    groups: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(idx)
    clusters = []
    for members in sorted(groups.values(), key=lambda m: m[0]):
        members = np.asarray(members, dtype=int)
        dist = normalized_singular_values(samples.points[members]) if len(members) >= 3 else None
        clusters.append(Cluster(members, pairs[members[0]], dist))
    return clusters


# ---------------------------------------------------------- descriptor

@dataclass
class CFPFHDescriptor:
    pair_counts: dict = field(default_factory=dict)
    pair_distributions: dict = field(default_factory=dict)
    main_pair: FeaturePair | None = None
    main_distribution: np.ndarray | None = None
    sample_count: int = 0

    def to_dict(self) -> dict:
        pairs = []
        for pair in sorted(self.pair_counts):
            pairs.append({
                "a": pair[0],
                "b": pair[1],
                "count": int(self.pair_counts[pair]),
                "distributions": [[float(x) for x in d] for d in self.pair_distributions.get(pair, [])],
            })
        return {
            "version": DESCRIPTOR_VERSION,
            "sample_count": int(self.sample_count),
            "pairs": pairs,
            "main_pair": None if self.main_pair is None else list(self.main_pair),
            "main_distribution": None if self.main_distribution is None
            else [float(x) for x in self.main_distribution],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CFPFHDescriptor":
        if d.get("version") != DESCRIPTOR_VERSION:
            raise InvalidInputError(f"unsupported descriptor version {d.get('version')!r}")
        counts, dists = {}, {}
        for entry in d["pairs"]:
            pair = feature_pair(entry["a"], entry["b"])
            counts[pair] = int(entry["count"])
            if entry["distributions"]:
                dists[pair] = [np.asarray(x, dtype=float) for x in entry["distributions"]]
        main = d.get("main_pair")
        md = d.get("main_distribution")
        return cls(
            pair_counts=counts,
            pair_distributions=dists,
            main_pair=None if main is None else feature_pair(*main),
            main_distribution=None if md is None else np.asarray(md, dtype=float),
            sample_count=int(d["sample_count"]),
        )


def canonical_frame(points: np.ndarray) -> np.ndarray:
    """Rigid transform taking a cloud into a frame fixed to its own shape.

    Origin at the centroid, axes along the principal directions with signs
    chosen by the third moment. The sampling grid is laid out in this frame
    so that sampling commutes with rigid motion of the input.
    """
    pts = np.asarray(points, dtype=float)
    c = pts.mean(axis=0)
    centered = pts - c
    if len(pts) >= 3:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        axes = np.zeros((3, 3))
        axes[: len(vt)] = vt[:3]
    else:
        axes = np.eye(3)
    for k in range(2):
        proj = centered @ axes[k]
        m3 = float(np.sum(proj ** 3))
        scale = float(np.sum(np.abs(proj) ** 3)) or 1.0
        if abs(m3) > 1e-9 * scale:
            sign = 1.0 if m3 > 0 else -1.0
        else:
            far = int(np.argmax(np.abs(proj)))
            sign = 1.0 if proj[far] >= 0 else -1.0
        axes[k] *= sign
    axes[2] = np.cross(axes[0], axes[1])
    T = np.eye(4)
    T[:3, :3] = axes
    T[:3, 3] = -axes @ c
    return T


def sample_features(cloud: PointCloud, params: DescriptorParams) -> tuple[PointCloud, list]:
    """Sampled points (in the canonical frame) and the feature pair of each."""
    if not cloud.has_normals:
        raise InvalidInputError("C-FPFH needs normals")
    local = cloud.transformed(canonical_frame(cloud.points))
    idx = voxel_downsample_indices(local.points, params.sample_voxel)
    index = SpatialIndex(local.points)
    edge = detect_boundary(local, params.boundary_radius, params.boundary_gap_deg, indices=idx)
    idx = idx[~edge]
    if len(idx) == 0:
        return local.subset(idx), []
    hists = fpfh_batch(local, idx, params.fpfh_radius, index=index)
    kept, pairs = [], []
    for k, h in zip(idx, hists):
        try:
            pairs.append(dominant_pair(h))
        except DegenerateHistogramError:
            continue
        kept.append(k)
    return local.subset(np.asarray(kept, dtype=int)), pairs


def build_cfpfh(cloud: PointCloud, params: DescriptorParams = DescriptorParams()) -> CFPFHDescriptor:
    samples, pairs = sample_features(cloud, params)
    if len(pairs) < 3:
        raise TooSparseError(f"only {len(pairs)} usable samples")
    return descriptor_from_samples(samples, pairs, params)


def descriptor_from_samples(samples: PointCloud, pairs: list, params: DescriptorParams) -> CFPFHDescriptor:
    counts = Counter(pairs)
    clusters = cluster_samples(samples, pairs, params)
    dists: dict = {}
    by_pair: dict = {}
    for cl in clusters:
        by_pair.setdefault(cl.pair, []).append(cl)
        if cl.distribution is not None:
            dists.setdefault(cl.pair, []).append(cl.distribution)

    ranked = sorted(counts, key=lambda p: (-counts[p], p))
    main_pair, main_dist = ranked[0], None
    # most frequent pair first; one fallback to the runner-up
    for pair in ranked[:2]:
        big = [cl for cl in by_pair.get(pair, []) if cl.distribution is not None]
        if big:
            best = max(big, key=lambda cl: (len(cl.members), -int(cl.members[0])))
            main_pair, main_dist = pair, best.distribution
            break
    return CFPFHDescriptor(
        pair_counts=dict(counts),
        pair_distributions=dists,
        main_pair=main_pair,
        main_distribution=main_dist,
        sample_count=len(pairs),
    )


# ------------------------------------------------------------- metrics

def qs(p: CFPFHDescriptor, c: CFPFHDescriptor) -> float:
    """Share of p's feature-pair occurrences also present (by count) in c."""
    total = sum(p.pair_counts.values())
    if total <= 0:
        raise InvalidInputError("p has no samples")
    covered = sum(min(n, c.pair_counts.get(pair, 0)) for pair, n in p.pair_counts.items())
    return covered / total


def ds(p: CFPFHDescriptor, c: CFPFHDescriptor) -> float | None:
    """Distance from p's main-cluster shape to the closest same-pair cluster of c.

    ``None`` means not comparable (p has no main distribution, or c has no
    cluster carrying p's main pair).
    """
    if p.main_distribution is None or p.main_pair is None:
        return None
    candidates = c.pair_distributions.get(p.main_pair)
    if not candidates:
        return None
    return min(float(np.linalg.norm(p.main_distribution - d)) for d in candidates)


def geometric_match(p: CFPFHDescriptor, c: CFPFHDescriptor, qs_min: float = 0.9, ds_max: float = 0.1) -> bool:
    d = ds(p, c)
    return d is not None and qs(p, c) > qs_min and d < ds_max
