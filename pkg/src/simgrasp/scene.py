"""Synthetic single-view observations.

Stands in for the RGB-D camera plus instance segmentation: triangle meshes
are z-buffer rendered into a depth frame, optionally corrupted by noise and
occluders, and the object pixels are back-projected into a partial cloud
with exact ground truth (per-point face id, object pose).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cloud import PointCloud, estimate_normals, normalize_rows
from .errors import EmptyRenderError, InvalidInputError
from .transforms import apply_points, invert, look_at, make_transform

OBJECT, SUPPORT, OCCLUDER, EMPTY = 0, 1, 2, -1


# ----------------------------------------------------------------- mesh

@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) == 0:
            raise InvalidInputError("mesh has no triangles")
        if f.min() < 0 or f.max() >= len(v):
            raise InvalidInputError("triangle index out of range")
        area = 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
        if area.min() <= 1e-12:
            raise InvalidInputError("degenerate triangle")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    @property
    def face_normals(self) -> np.ndarray:
        v, f = self.vertices, self.triangles
        return normalize_rows(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]))

    @property
    def face_areas(self) -> np.ndarray:
        v, f = self.vertices, self.triangles
        return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)

    @property
    def watertight(self) -> bool:
        f = self.triangles
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        undirected = np.sort(edges, axis=1)
        _, counts = np.unique(undirected, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def transformed(self, T: np.ndarray) -> "Mesh":
        return Mesh(apply_points(T, self.vertices), self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def sample_surface(self, spacing: float, seed: int) -> tuple[PointCloud, np.ndarray]:
        """Uniform area sampling, about one point per ``spacing``^2 of surface.

        Returns the cloud (face normals attached) and the source face ids.
        """
        rng = np.random.default_rng(seed)
        areas = self.face_areas
        n = max(int(round(areas.sum() / spacing ** 2)), 1)
        face = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        v = self.vertices[self.triangles[face]]
        pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], face))
        face = face[order]
        return PointCloud(pts[order], self.face_normals[face]), face


def _quad(a, b, c, d):
    return [(a, b, c), (a, c, d)]


def box(size) -> Mesh:
    """Axis-aligned box resting on z=0, centered in x and y."""
    dx, dy, dz = (float(s) for s in size)
    x, y = dx / 2, dy / 2
    v = np.array([[-x, -y, 0], [x, -y, 0], [x, y, 0], [-x, y, 0],
                  [-x, -y, dz], [x, -y, dz], [x, y, dz], [-x, y, dz]], dtype=float)
    f = []
    f += _quad(0, 3, 2, 1)  # bottom
    f += _quad(4, 5, 6, 7)  # top
    f += _quad(0, 1, 5, 4)  # -y
    f += _quad(1, 2, 6, 5)  # +x
    f += _quad(2, 3, 7, 6)  # +y
    f += _quad(3, 0, 4, 7)  # -x
    return Mesh(v, f)


def frustum(r_bottom: float, r_top: float, height: float, segments: int = 48) -> Mesh:
    """Closed (possibly tapered) cylinder standing on z=0."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    bottom = np.column_stack([ring * r_bottom, np.zeros(segments)])
    top = np.column_stack([ring * r_top, np.full(segments, height)])
    v = np.vstack([bottom, top, [[0, 0, 0], [0, 0, height]]])
    cb, ct = 2 * segments, 2 * segments + 1
    f = []
    for k in range(segments):
        k2 = (k + 1) % segments
        f += _quad(k, k2, segments + k2, segments + k)
        f.append((cb, k2, k))
        f.append((ct, segments + k, segments + k2))
    return Mesh(v, f)


def cylinder(radius: float, height: float, segments: int = 48) -> Mesh:
    return frustum(radius, radius, height, segments)


def _lathe(profile, segments: int) -> tuple[np.ndarray, list]:
    """Revolve a polyline of (r, z) points about z; r == 0 entries become poles."""
    verts, rows = [], []
    ang = 2 * np.pi * np.arange(segments) / segments
    for r, z in profile:
        if r == 0:
            rows.append([len(verts)])
            verts.append((0.0, 0.0, z))
        else:
            rows.append(list(range(len(verts), len(verts) + segments)))
            verts += [(r * math.cos(a), r * math.sin(a), z) for a in ang]
    f = []
    for lo, hi in zip(rows[:-1], rows[1:]):
        for k in range(segments):
            k2 = (k + 1) % segments
            if len(lo) == 1:
                f.append((lo[0], hi[k], hi[k2]))
            elif len(hi) == 1:
                f.append((lo[k], hi[0], lo[k2]))
            else:
                f += _quad(lo[k], lo[k2], hi[k2], hi[k])
    return np.array(verts), f


def sphere(radius: float, segments: int = 32, rings: int = 16) -> Mesh:
    """UV sphere resting on z=0."""
    profile = [(radius * math.sin(math.pi * i / rings), radius - radius * math.cos(math.pi * i / rings))
               for i in range(rings + 1)]
    profile[0] = (0.0, 0.0)
    profile[-1] = (0.0, 2 * radius)
    v, f = _lathe(profile, segments)
    return Mesh(v, f)


def bowl(radius: float, depth: float, thickness: float = 0.006, segments: int = 40, rings: int = 10) -> Mesh:
    """Spherical-cap bowl with wall ``thickness``, opening up, resting on z=0."""
    if depth > radius:
        raise InvalidInputError("bowl depth cannot exceed its radius")
    cap = math.acos(1 - depth / radius)
    outer = [(radius * math.sin(cap * i / rings), radius - radius * math.cos(cap * i / rings))
             for i in range(rings + 1)]
    outer[0] = (0.0, 0.0)
    ri = radius - thickness
    rim_z = depth
    inner_cap = math.acos(max(-1.0, min(1.0, (radius - rim_z) / ri)))
    inner = [(ri * math.sin(inner_cap * i / rings), radius - ri * math.cos(inner_cap * i / rings))
             for i in range(rings, -1, -1)]
    inner[-1] = (0.0, thickness)
    v, f = _lathe(outer + inner, segments)
    return Mesh(v, f)


def _triangulate(poly: np.ndarray) -> list:
    """Ear clipping for a simple counter-clockwise polygon."""
    idx = list(range(len(poly)))
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    guard = 0
    while len(idx) > 3 and guard < 10000:
        guard += 1
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = poly[i0], poly[i1], poly[i2]
            if cross(a, b, c) <= 1e-15:
                continue
            inside = False
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                p = poly[j]
                if cross(a, b, p) >= 0 and cross(b, c, p) >= 0 and cross(c, a, p) >= 0:
                    inside = True
                    break
            if not inside:
                tris.append((i0, i1, i2))
                idx.pop(k)
                break
    tris.append(tuple(idx))
    return tris


def extrude_profile(profile, depth: float) -> Mesh:
    """Extrude a CCW polygon given in the x-z plane along y, centered on y=0."""
    poly = np.asarray(profile, dtype=float)
    n = len(poly)
    y = depth / 2
    front = np.column_stack([poly[:, 0], np.full(n, -y), poly[:, 1]])
    back = np.column_stack([poly[:, 0], np.full(n, y), poly[:, 1]])
    v = np.vstack([front, back])
    f = []
    for a, b, c in _triangulate(poly):
        # x-z CCW seen from -y means the -y cap faces outward as (a, b, c)
        f.append((a, b, c))
        f.append((n + a, n + c, n + b))
    for k in range(n):
        k2 = (k + 1) % n
        f += _quad(k, n + k, n + k2, k2)
    return Mesh(v, f)


def l_bracket(length: float, height: float, width: float, thickness: float) -> Mesh:
    t = thickness
    profile = [(0, 0), (length, 0), (length, t), (t, t), (t, height), (0, height)]
    profile = [(x - length / 2, z) for x, z in profile]
    return extrude_profile(profile, width)


def beveled_block(size, bevel: float, angle_deg: float = 25.0) -> Mesh:
    """Block whose two top edges along y are chamfered.

    ``bevel`` is the chamfer face width; its normal leans ``angle_deg`` from
    the adjacent side face toward the top face.
    """
    dx, dy, dz = (float(s) for s in size)
    a = math.radians(angle_deg)
    w, h = bevel * math.sin(a), bevel * math.cos(a)
    x = dx / 2
    profile = [(-x, 0), (x, 0), (x, dz - h), (x - w, dz), (-x + w, dz), (-x, dz - h)]
    return extrude_profile(profile, dy)


PRIMITIVES = {
    "box": lambda p: box(p["size"]),
    "cylinder": lambda p: cylinder(p["radius"], p["height"], p.get("segments", 48)),
    "frustum": lambda p: frustum(p["r_bottom"], p["r_top"], p["height"], p.get("segments", 48)),
    "sphere": lambda p: sphere(p["radius"], p.get("segments", 32), p.get("rings", 16)),
    "bowl": lambda p: bowl(p["radius"], p["depth"], p.get("thickness", 0.006)),
    "l_bracket": lambda p: l_bracket(p["length"], p["height"], p["width"], p["thickness"]),
    "beveled_block": lambda p: beveled_block(p["size"], p["bevel"], p.get("angle", 25.0)),
}


def make_mesh(spec: dict) -> Mesh:
    """Mesh from ``{"primitive": kind, ...params}`` or ``{"obj": path}``."""
    if "obj" in spec:
        return read_obj(spec["obj"])
    kind = spec.get("primitive")
    if kind not in PRIMITIVES:
        raise InvalidInputError(f"unknown primitive {kind!r}")
    return PRIMITIVES[kind](spec)


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            ids = [int(t.split("/")[0]) for t in tok[1:]]
            ids = [i - 1 if i > 0 else len(verts) + i for i in ids]
            for k in range(1, len(ids) - 1):
                faces.append((ids[0], ids[k], ids[k + 1]))
    return Mesh(np.array(verts), np.array(faces))


def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------- camera

@dataclass(frozen=True, eq=False)
class VirtualCamera:
    """Pinhole camera; ``pose`` maps camera coordinates (OpenCV axes) to world."""

    pose: np.ndarray
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 159.5
    cy: float = 119.5
    width: int = 320
    height: int = 240

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width < 32 or self.height < 32:
            raise InvalidInputError("resolution must be at least 32x32")
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float))

    @classmethod
    def looking_at(cls, eye, target, **kw) -> "VirtualCamera":
        return cls(pose=look_at(eye, target), **kw)

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def rays(self) -> np.ndarray:
        """(H, W, 3) camera-frame ray directions with unit z component."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u, dtype=float)], axis=-1)

    def to_dict(self) -> dict:
        return {"pose": self.pose.tolist(), "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "VirtualCamera":
        return cls(pose=np.array(d["pose"]), fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=int(d["width"]), height=int(d["height"]))


def orbit_camera(target, distance: float, azimuth_deg: float, elevation_deg: float, **kw) -> VirtualCamera:
    """Camera on a sphere around ``target`` looking at it from above."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    offset = distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    target = np.asarray(target, dtype=float)
    return VirtualCamera.looking_at(target + offset, target, **kw)


@dataclass
class DepthFrame:
    """Camera-frame depth (z, meters; 0 = no return) plus per-pixel labels."""

    depth: np.ndarray
    label: np.ndarray
    face: np.ndarray

    def copy(self) -> "DepthFrame":
        return DepthFrame(self.depth.copy(), self.label.copy(), self.face.copy())

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


_NEAR = 1e-3


def _clip_near(t: np.ndarray) -> list[np.ndarray]:
    """Parts of a camera-space triangle in front of the near plane, as triangles."""
    ahead = t[:, 2] > _NEAR
    if ahead.all():
        return [t]
    poly = []
    for k in range(3):
        a, b = t[k], t[(k + 1) % 3]
        if ahead[k]:
            poly.append(a)
        if ahead[k] != ahead[(k + 1) % 3]:
            w = (_NEAR - a[2]) / (b[2] - a[2])
            poly.append(a + w * (b - a))
    return [np.array([poly[0], poly[j], poly[j + 1]]) for j in range(1, len(poly) - 1)]


def rasterize(meshes: list[tuple[Mesh, int]], camera: VirtualCamera) -> DepthFrame:
    """Z-buffer render of (mesh, label) pairs given in world coordinates.

    Depth at a pixel is the exact intersection of its ray with the
    triangle's plane, so back-projected points lie on the surface.
    """
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    label = np.full((H, W), EMPTY, dtype=np.int64)
    face = np.full((H, W), -1, dtype=np.int64)
    world_to_cam = invert(camera.pose)
    for mesh, lab in meshes:
        v = apply_points(world_to_cam, mesh.vertices)
        tri = v[mesh.triangles]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        offset = np.einsum("ij,ij->i", n, tri[:, 0])
        front = (offset < 0) & np.any(tri[:, :, 2] > _NEAR, axis=1)
        pieces = ((fid, t) for fid in np.flatnonzero(front) for t in _clip_near(tri[fid]))
        for fid, t in pieces:
            px = camera.fx * t[:, 0] / t[:, 2] + camera.cx
            py = camera.fy * t[:, 1] / t[:, 2] + camera.cy
            u0, u1 = max(int(math.ceil(px.min())), 0), min(int(math.floor(px.max())), W - 1)
            v0, v1 = max(int(math.ceil(py.min())), 0), min(int(math.floor(py.max())), H - 1)
            if u0 > u1 or v0 > v1:
                continue
            uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
            # edge functions; the winding is consistent for front faces
            e = []
            for a, b in ((0, 1), (1, 2), (2, 0)):
                e.append((px[b] - px[a]) * (vv - py[a]) - (py[b] - py[a]) * (uu - px[a]))
            e = np.stack(e)
            inside = np.all(e >= 0, axis=0) | np.all(e <= 0, axis=0)
            if not inside.any():
                continue
            ry = np.stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones(uu.shape)], -1)
            denom = ry @ n[fid]
            with np.errstate(divide="ignore", invalid="ignore"):
                z = offset[fid] / denom
            sub = depth[v0:v1 + 1, u0:u1 + 1]
            closer = inside & (z > 0) & (z < sub)
            sub[closer] = z[closer]
            label[v0:v1 + 1, u0:u1 + 1][closer] = lab
            face[v0:v1 + 1, u0:u1 + 1][closer] = fid
    depth[~np.isfinite(depth)] = 0.0
    return DepthFrame(depth, label, face)


# ---------------------------------------------------------------- noise

NOISE_KINDS = ("none", "gaussian-depth", "smoothed", "hole-filled")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    sigma: float = 0.0
    kernel: int = 5
    hole_rate: float = 0.0
    hole_size: int = 3

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidInputError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise InvalidInputError("sigma must be >= 0")
        if not 0 <= self.hole_rate <= 0.3:
            raise InvalidInputError("hole_rate must lie in [0, 0.3]")
        if self.kernel < 1:
            raise InvalidInputError("kernel must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "kernel": self.kernel,
                "hole_rate": self.hole_rate, "hole_size": self.hole_size}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(**d)


def apply_noise(frame: DepthFrame, model: NoiseModel, seed: int) -> DepthFrame:
    """Corrupt a depth frame; the result is a pure function of (frame, model, seed)."""
    out = frame.copy()
    if model.kind == "none":
        return out
    rng = np.random.default_rng(seed)
    valid = frame.valid
    if model.kind == "gaussian-depth":
        out.depth[valid] += rng.normal(0.0, model.sigma, size=int(valid.sum()))
        out.depth[valid & (out.depth <= 0)] = 1e-6
    elif model.kind == "smoothed":
        for lab in np.unique(frame.label[valid]):
            m = (frame.label == lab) & valid
            num = ndimage.uniform_filter(np.where(m, frame.depth, 0.0), size=model.kernel, mode="constant")
            den = ndimage.uniform_filter(m.astype(float), size=model.kernel, mode="constant")
            out.depth[m] = num[m] / den[m]
    elif model.kind == "hole-filled":
        H, W = frame.depth.shape
        n_valid = int(valid.sum())
        holes = np.zeros_like(valid)
        target = model.hole_rate * n_valid
        rows, cols = np.nonzero(valid)
        s = model.hole_size
        guard = 0
        while holes.sum() < target and guard < 100000:
            guard += 1
            k = rng.integers(len(rows))
            r0, c0 = rows[k] - s // 2, cols[k] - s // 2
            holes[max(r0, 0):r0 + s, max(c0, 0):c0 + s] = True
            holes &= valid
        for lab in np.unique(frame.label[valid]):
            m = (frame.label == lab) & valid
            src = m & ~holes
            fill = m & holes
            if not fill.any() or not src.any():
                continue
            _, (ri, ci) = ndimage.distance_transform_edt(~src, return_indices=True)
            out.depth[fill] = frame.depth[ri[fill], ci[fill]]
            out.face[fill] = frame.face[ri[fill], ci[fill]]
    return out


def occlude(frame: DepthFrame, camera: VirtualCamera, boxes) -> DepthFrame:
    """Insert camera-space axis-aligned boxes ``(min_corner, max_corner)``.

    Pixels whose ray meets a box in front of the current surface take the
    box depth and the OCCLUDER label.
    """
    out = frame.copy()
    rays = camera.rays()
    for lo, hi in boxes:
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        if np.any(hi <= lo):
            raise InvalidInputError("occluder box has non-positive extent")
        tmin = np.zeros(rays.shape[:2])
        tmax = np.full(rays.shape[:2], np.inf)
        for ax in range(3):
            r = rays[..., ax]
            flat = np.abs(r) < 1e-15
            with np.errstate(divide="ignore", invalid="ignore"):
                a, b = lo[ax] / r, hi[ax] / r
            near = np.where(flat, np.where((lo[ax] <= 0) & (hi[ax] >= 0), -np.inf, np.inf), np.minimum(a, b))
            far = np.where(flat, np.where((lo[ax] <= 0) & (hi[ax] >= 0), np.inf, -np.inf), np.maximum(a, b))
            tmin = np.maximum(tmin, near)
            tmax = np.minimum(tmax, far)
        hit = tmax >= tmin
        current = np.where(out.depth > 0, out.depth, np.inf)
        closer = hit & (tmin < current)  # rays have unit z, so t is depth
        out.depth[closer] = tmin[closer]
        out.label[closer] = OCCLUDER
        out.face[closer] = -1
    return out


def side_occluder(frame: DepthFrame, camera: VirtualCamera, fraction: float, side: str = "left",
                  gap: float = 0.02, thickness: float = 0.01, limits: tuple[float, float] | None = None):
    """Camera-space box hiding whole pixel columns of the object from one side.

    The column boundary whose hidden share is closest to ``fraction`` is
    used; with ``limits`` only boundaries whose share lies inside them are
    considered when any exist.
    """
    if not 0 < fraction < 1:
        raise InvalidInputError("fraction must lie in (0, 1)")
    if side not in ("left", "right"):
        raise InvalidInputError("side must be 'left' or 'right'")
    obj = (frame.label == OBJECT) & frame.valid
    if not obj.any():
        raise EmptyRenderError("object not visible")
    cols = np.nonzero(obj)[1]
    values, counts = np.unique(cols, return_counts=True)
    if side == "right":
        values, counts = values[::-1], counts[::-1]
    share = np.cumsum(counts) / cols.size
    candidates = np.arange(len(values))
    if limits is not None:
        inside = candidates[(share >= limits[0]) & (share <= limits[1])]
        candidates = inside if inside.size else candidates
    k = candidates[np.argmin(np.abs(share[candidates] - fraction))]
    z_near = frame.depth[obj].min() - gap
    z_far = z_near - thickness
    # pixel centers sit on integer columns; the half-column edge is projected
    # at whichever box face keeps every ray past it uncovered
    if side == "left":
        edge = values[k] + 0.5 - camera.cx
        x_hi = edge / camera.fx * (z_far if edge >= 0 else z_near)
        lo, hi = [-10.0, -10.0, z_far], [x_hi, 10.0, z_near]
    else:
        edge = values[k] - 0.5 - camera.cx
        x_lo = edge / camera.fx * (z_near if edge >= 0 else z_far)
        lo, hi = [x_lo, -10.0, z_far], [10.0, 10.0, z_near]
    return (np.array(lo), np.array(hi))


# ------------------------------------------------------------- observed

@dataclass
class ObservedScene:
    cloud: PointCloud
    viewpoint: np.ndarray
    support_normal: np.ndarray | None = None
    support_point: np.ndarray | None = None
    category: str | None = None
    truth: dict = field(default_factory=dict)


def back_project(frame: DepthFrame, camera: VirtualCamera, mask: np.ndarray) -> np.ndarray:
    rays = camera.rays()[mask]
    return apply_points(camera.pose, rays * frame.depth[mask][:, None])


def table_mesh(size: float = 1.0, thickness: float = 0.02) -> Mesh:
    m = box((size, size, thickness))
    return m.transformed(make_transform(translation=(0.0, 0.0, -thickness)))


def make_scene(mesh: Mesh, object_pose, camera: VirtualCamera, noise=(), occluders=(), seed: int = 0, *,
               category: str | None = None, model_id: str | None = None, withhold_category: bool = False,
               support: bool = True, normals: str = "face") -> ObservedScene:
    """Render ``mesh`` (in its canonical frame) placed at ``object_pose``.

    ``noise`` is a NoiseModel or a sequence applied in order; ``occluders``
    holds camera-space boxes.
    """
    if isinstance(noise, NoiseModel):
        noise = [noise]
    object_pose = np.asarray(object_pose, dtype=float)
    placed = mesh.transformed(object_pose)
    items = [(placed, OBJECT)]
    if support:
        items.append((table_mesh(), SUPPORT))
    clean = rasterize(items, camera)
    frame = occlude(clean, camera, list(occluders))
    for k, model in enumerate(noise):
        frame = apply_noise(frame, model, seed + 7919 * k)
    mask = (frame.label == OBJECT) & frame.valid
    if not mask.any():
        raise EmptyRenderError("object is not visible from this camera")
    pts = back_project(frame, camera, mask)
    fids = frame.face[mask]
    if normals == "face":
        nrm = placed.face_normals[fids]
        cloud = PointCloud(pts, nrm)
    elif normals == "estimated":
        cloud = estimate_normals(PointCloud(pts), radius=0.01, viewpoint=camera.position)
    else:
        raise InvalidInputError("normals must be 'face' or 'estimated'")
    support_normal = support_point = None
    if support:
        smask = (frame.label == SUPPORT) & frame.valid
        if smask.sum() >= 3:
            sp = back_project(frame, camera, smask)
            c = sp - sp.mean(axis=0)
            n = np.linalg.svd(c, full_matrices=False)[2][2]
            if np.dot(n, camera.position - sp.mean(axis=0)) < 0:
                n = -n
            support_normal = n
            support_point = sp.mean(axis=0)
    unoccluded = int(((clean.label == OBJECT) & clean.valid).sum())
    truth = {
        "model_id": model_id,
        "category": category,
        "object_pose": object_pose,
        "face_ids": fids,
        "unoccluded_pixels": unoccluded,
        "visible_pixels": int(mask.sum()),
    }
    return ObservedScene(cloud=cloud, viewpoint=camera.position, support_normal=support_normal,
                         support_point=support_point, category=None if withhold_category else category, truth=truth)


def render_partial(mesh: Mesh, camera: VirtualCamera, normals: str = "face") -> tuple[PointCloud, np.ndarray]:
    """Visible surface of a world-placed mesh with no support, noise or occluders.

    Returns the cloud and the source face id of every point.
    """
    scene = make_scene(mesh, np.eye(4), camera, support=False, normals=normals)
    return scene.cloud, scene.truth["face_ids"]


# ------------------------------------------------------------------ io

def scene_to_dict(mesh_spec: dict, object_pose, camera: VirtualCamera, noise=(), occluders=(), seed: int = 0,
                  category=None, model_id=None, withhold_category=False) -> dict:
    if isinstance(noise, NoiseModel):
        noise = [noise]
    return {
        "version": 1,
        "model_id": model_id,
        "category": category,
        "withhold_category": bool(withhold_category),
        "mesh": mesh_spec,
        "object_pose": np.asarray(object_pose, float).tolist(),
        "camera": camera.to_dict(),
        "noise": [m.to_dict() for m in noise],
        "occluders": [[np.asarray(lo, float).tolist(), np.asarray(hi, float).tolist()] for lo, hi in occluders],
        "seed": int(seed),
    }


def scene_from_dict(d: dict, base_dir=None) -> ObservedScene:
    spec = dict(d["mesh"])
    if "obj" in spec and base_dir is not None and not Path(spec["obj"]).is_absolute():
        spec["obj"] = str(Path(base_dir) / spec["obj"])
    return make_scene(
        make_mesh(spec), np.array(d["object_pose"]), VirtualCamera.from_dict(d["camera"]),
        noise=[NoiseModel.from_dict(m) for m in d.get("noise", [])],
        occluders=[(np.array(lo), np.array(hi)) for lo, hi in d.get("occluders", [])],
        seed=int(d.get("seed", 0)), category=d.get("category"), model_id=d.get("model_id"),
        withhold_category=bool(d.get("withhold_category", False)),
    )


def load_scene(path) -> ObservedScene:
    path = Path(path)
    return scene_from_dict(json.loads(path.read_text()), base_dir=path.parent)
