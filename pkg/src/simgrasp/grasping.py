"""Parallel-jaw grasps: sampling, transfer, feasibility, and fine-tuning.

Gripper frame convention: x is the closing axis, z the approach direction
(the palm sits at negative z), and the origin is midway between the two
fingertip pads.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cloud import PointCloud, SpatialIndex, voxel_downsample
from .dimension import SOBB
from .errors import FinetuneFailedError, InvalidInputError, NoGraspFoundError
from .registration import RegistrationResult
from .transforms import invert, make_transform, orthonormal_basis, rotation_angle_deg

MAX_OPENING = 0.14


@dataclass(frozen=True, eq=False)
class Grasp:
    pose: np.ndarray
    width: float
    source_model: str | None = None

    def __post_init__(self):
        if not 0 < self.width <= MAX_OPENING + 1e-12:
            raise InvalidInputError(f"grasp width {self.width} outside (0, {MAX_OPENING}]")
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float))

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def closing_axis(self) -> np.ndarray:
        return self.pose[:3, 0]

    @property
    def approach(self) -> np.ndarray:
        return self.pose[:3, 2]

    def translated(self, offset) -> "Grasp":
        pose = self.pose.copy()
        pose[:3, 3] += np.asarray(offset, dtype=float)
        return Grasp(pose, self.width, self.source_model)

    def to_dict(self) -> dict:
        return {"pose": self.pose.tolist(), "width": self.width, "source_model": self.source_model}

    @classmethod
    def from_dict(cls, d: dict) -> "Grasp":
        return cls(np.array(d["pose"], dtype=float), float(d["width"]), d.get("source_model"))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in the gripper frame."""

    lo: tuple
    hi: tuple

    def contains(self, local: np.ndarray) -> np.ndarray:
        return np.all((local >= np.asarray(self.lo)) & (local <= np.asarray(self.hi)), axis=-1)

    def corners(self) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


@dataclass(frozen=True)
class GripperModel:
    max_opening: float = MAX_OPENING
    finger_length: float = 0.05
    finger_thickness: float = 0.01
    finger_depth: float = 0.02
    palm_thickness: float = 0.03
    palm_depth: float = 0.06
    contact_radius: float = 0.005
    clearance: float = 0.01

    def closure_box(self, width: float) -> Box:
        h, d = self.finger_length / 2, self.finger_depth / 2
        return Box((-width / 2, -d, -h), (width / 2, d, h))

    def finger_boxes(self, width: float) -> tuple[Box, Box]:
        h, d, t = self.finger_length / 2, self.finger_depth / 2, self.finger_thickness
        return (Box((-width / 2 - t, -d, -h), (-width / 2, d, h)),
                Box((width / 2, -d, -h), (width / 2 + t, d, h)))

    def palm_box(self, width: float) -> Box:
        h, t = self.finger_length / 2, self.finger_thickness
        return Box((-width / 2 - t, -self.palm_depth / 2, -h - self.palm_thickness),
                   (width / 2 + t, self.palm_depth / 2, -h))

    def body_boxes(self, width: float) -> tuple[Box, ...]:
        return (*self.finger_boxes(width), self.palm_box(width))

    def stick(self, grasp: Grasp) -> tuple[np.ndarray, np.ndarray]:
        """World endpoints of the segment joining the fingertip pad centers."""
        half = grasp.width / 2 * grasp.closing_axis
        return grasp.center - half, grasp.center + half

    def width_for(self, span: float) -> float | None:
        width = span + 2 * self.clearance
        if span >= self.max_opening - 1e-3:
            return None
        return min(width, self.max_opening)


def to_gripper_frame(grasp: Grasp, points: np.ndarray) -> np.ndarray:
    R, t = grasp.pose[:3, :3], grasp.pose[:3, 3]
    return (np.asarray(points) - t) @ R


# ------------------------------------------------------------- sampling

def content_seed(points: np.ndarray) -> int:
    digest = hashlib.sha256(np.ascontiguousarray(points, dtype=np.float64).tobytes()).digest()
    return int.from_bytes(digest[:8], "little")


def _collision_mask(local: np.ndarray, gripper: GripperModel, width: float) -> np.ndarray:
    """For (m, k, 3) point sets in m gripper frames, whether any point is in a gripper body box."""
    h, d, t = gripper.finger_length / 2, gripper.finger_depth / 2, gripper.finger_thickness
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    ax = np.abs(x)
    finger = (ax >= width / 2) & (ax <= width / 2 + t) & (np.abs(y) <= d) & (np.abs(z) <= h)
    palm = (ax <= width / 2 + t) & (np.abs(y) <= gripper.palm_depth / 2) & (z <= -h) & \
        (z >= -h - gripper.palm_thickness)
    return (finger | palm).any(axis=1)


def _same_grasp(a: Grasp, b: Grasp, pos_tol: float, ang_tol: float) -> bool:
    if np.linalg.norm(a.center - b.center) > pos_tol:
        return False
    rel = a.pose[:3, :3].T @ b.pose[:3, :3]
    flipped = rel @ np.diag([-1.0, -1.0, 1.0])
    return min(rotation_angle_deg(rel), rotation_angle_deg(flipped)) <= ang_tol


def sample_antipodal_grasps(cloud: PointCloud, gripper: GripperModel = GripperModel(), target_count: int = 200,
                            seed: int | None = None, approach_step_deg: float = 30.0,
                            normal_pair_deg: float = 160.0, line_deg: float = 20.0, voxel: float = 0.003,
                            slides=(0.0, 0.01, 0.02), dedup_pos: float = 0.005,
                            dedup_deg: float = 15.0, max_seeds: int = 2000,
                            patience: int = 400) -> list[Grasp]:
    """Collision-free grasps across antipodal surface point pairs.

    Each seed point is paired with its best-aligned partner: normals at
    least ``normal_pair_deg`` apart and each within ``line_deg`` of the
    connecting line. The grasp closes along that line, is centered at the
    pair midpoint, and tries approach directions every
    ``approach_step_deg`` about the closing axis. If the palm hits the
    object, the grasp backs off along the approach by the ``slides``
    offsets. At most ``max_seeds`` seed points are tried, and sampling stops
    early once ``patience`` consecutive paired seeds add nothing. The
    sampler seed defaults to a hash of the cloud contents.
    """
    if not cloud.has_normals:
        raise InvalidInputError("grasp sampling needs normals")
    rng = np.random.default_rng(content_seed(cloud.points) if seed is None else seed)
    sparse = voxel_downsample(cloud, voxel)
    pts, nrm = sparse.points, sparse.normals
    index = SpatialIndex(pts)
    obstacle = voxel_downsample(cloud, max(voxel, 0.005)).points
    obstacle_index = SpatialIndex(obstacle)
    cos_pair = np.cos(np.radians(normal_pair_deg))
    cos_line = np.cos(np.radians(line_deg))
    reach = np.hypot(gripper.max_opening / 2 + gripper.finger_thickness,
                     gripper.finger_length / 2 + gripper.palm_thickness + max(slides)) + gripper.palm_depth / 2
    angles = np.radians(np.arange(0.0, 360.0, approach_step_deg))
    slides = np.asarray(slides, dtype=float)
    grasps: list[Grasp] = []
    any_pair = False
    stale = 0
    for attempt, i in enumerate(rng.permutation(len(pts))):
        if len(grasps) >= target_count or attempt >= max_seeds or stale >= patience:
            break
        cand = index.radius(pts[i], gripper.max_opening)
        cand = cand[nrm[cand] @ nrm[i] <= cos_pair]
        if not len(cand):
            continue
        d = pts[cand] - pts[i]
        dist = np.linalg.norm(d, axis=1)
        d /= dist[:, None]
        a_i = -(d @ nrm[i])
        a_j = (nrm[cand] * d).sum(axis=1)
        good = (a_i >= cos_line) & (a_j >= cos_line)
        if not good.any():
            continue
        score = np.minimum(a_i, a_j)
        score[~good] = -np.inf
        k = int(np.argmax(score))
        width = gripper.width_for(dist[k])
        if width is None:
            continue
        any_pair = True
        stale += 1
        x = d[k]
        mid = (pts[i] + pts[cand[k]]) / 2
        b1, b2 = orthonormal_basis(x)
        z = np.cos(angles)[:, None] * b1 + np.sin(angles)[:, None] * b2
        y = np.cross(z, x)
        R = np.stack([np.broadcast_to(x, z.shape), y, z], axis=2)  # (angles, 3, 3), columns x y z
        near = obstacle[obstacle_index.radius(mid, reach)] - mid
        near = near[np.abs(near @ x) <= width / 2 + gripper.finger_thickness]
        # pose (a, s): origin mid - s * z_a; local = R_a^T (p - mid + s * z_a)
        base = (near @ R.transpose(1, 0, 2).reshape(3, -1)).reshape(len(near), len(angles), 3).transpose(1, 0, 2)
        local = base[:, None, :, :] + np.stack([np.zeros_like(slides), np.zeros_like(slides), slides], axis=1)[
            None, :, None, :]
        hit = _collision_mask(local.reshape(-1, len(near), 3), gripper, width).reshape(len(angles), len(slides))
        for a in range(len(angles)):
            free = np.flatnonzero(~hit[a])
            if not len(free):
                continue
            s_off = slides[free[0]]
            g = Grasp(make_transform(R[a], mid - s_off * z[a]), width)
            if not any(_same_grasp(g, h, dedup_pos, dedup_deg) for h in grasps):
                stale = 0
                grasps.append(g)
                if len(grasps) >= target_count:
                    break
    if not grasps:
        raise NoGraspFoundError("no collision-free antipodal pair" if any_pair else "no antipodal pair within reach")
    return grasps


# ------------------------------------------------------------- transfer

def transfer_grasps(model_grasps, registration: RegistrationResult | np.ndarray, source_model: str | None = None):
    """Map model-frame grasps into the observed frame through the inverse registration."""
    T = registration.transform if isinstance(registration, RegistrationResult) else np.asarray(registration)
    back = invert(T)
    return [Grasp(back @ g.pose, g.width, source_model if source_model is not None else g.source_model)
            for g in model_grasps]


# ---------------------------------------------------------- feasibility

@dataclass(frozen=True)
class WorkspaceReach:
    """Reachability stand-in: the grasp center must lie inside a box."""

    lo: tuple = (-1.0, -1.0, -0.5)
    hi: tuple = (1.0, 1.0, 1.5)

    def __call__(self, grasp: Grasp) -> bool:
        c = grasp.center
        return bool(np.all(c >= np.asarray(self.lo)) and np.all(c <= np.asarray(self.hi)))


@dataclass(frozen=True)
class SupportPlane:
    point: np.ndarray
    normal: np.ndarray

    def below(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return (np.asarray(points) - self.point) @ self.normal < -tol


def feasibility(grasp: Grasp, P: PointCloud, gripper: GripperModel = GripperModel(),
                support: SupportPlane | None = None, reachability: Callable | None = None,
                obstacles: PointCloud | None = None) -> str | None:
    """None when feasible, else the name of the first failed test."""
    local = to_gripper_frame(grasp, P.points)
    if not gripper.closure_box(grasp.width).contains(local).any():
        return "off-object"
    for b in gripper.body_boxes(grasp.width):
        if b.contains(local).any():
            return "collision"
        if obstacles is not None and len(obstacles) and b.contains(to_gripper_frame(grasp, obstacles.points)).any():
            return "collision"
    if support is not None:
        for b in gripper.body_boxes(grasp.width):
            corners = b.corners() @ grasp.pose[:3, :3].T + grasp.center
            if support.below(corners).any():
                return "support"
    if reachability is not None and not reachability(grasp):
        return "unreachable"
    return None


def filter_feasible(grasps, P: PointCloud, support: SupportPlane | None = None,
                    gripper: GripperModel = GripperModel(), reachability: Callable | None = WorkspaceReach(),
                    obstacles: PointCloud | None = None) -> list[Grasp]:
    return [g for g in grasps if feasibility(g, P, gripper, support, reachability, obstacles) is None]


# -------------------------------------------------------- classification

class GraspVerdict(str, enum.Enum):
    STABLE = "Stable"
    TUNABLE = "Tunable"
    UNSTABLE = "Unstable"
    POTENTIAL = "Potential"


@dataclass(frozen=True)
class FineTuneParams:
    stable_deg: float = 20.0
    discard_deg: float = 40.0
    flat_deg: float = 10.0
    k1: int = 100
    k2: int = 5

    def __post_init__(self):
        if not 0 < self.stable_deg < self.discard_deg:
            raise InvalidInputError("need 0 < stable_deg < discard_deg")
        if self.flat_deg <= 0 or self.k1 < 1 or self.k2 < 1:
            raise InvalidInputError("flat_deg, k1, k2 must be positive")


def stick_contacts(grasp: Grasp, P: PointCloud, contact_radius: float = 0.005) -> np.ndarray:
    """Indices of the outermost cloud points touching the jaw-to-jaw segment (0, 1 or 2)."""
    a = grasp.center - grasp.width / 2 * grasp.closing_axis
    axis = grasp.closing_axis
    rel = P.points - a
    t = np.clip(rel @ axis, 0.0, grasp.width)
    dist = np.linalg.norm(rel - np.outer(t, axis), axis=1)
    hits = np.flatnonzero(dist <= contact_radius)
    if len(hits) <= 1:
        return hits
    proj = rel[hits] @ axis
    lo, hi = hits[np.argmin(proj)], hits[np.argmax(proj)]
    return np.array([lo, hi]) if lo != hi else np.array([lo])


def contact_angles(grasp: Grasp, P: PointCloud, contacts) -> np.ndarray:
    """Acute angle (degrees) between each contact normal and the closing axis."""
    n = P.normals[np.asarray(contacts, dtype=np.int64)]
    return np.degrees(np.arccos(np.clip(np.abs(n @ grasp.closing_axis), 0.0, 1.0)))


def classify_angles(theta, params: FineTuneParams = FineTuneParams()) -> GraspVerdict:
    theta = np.asarray(theta, dtype=float)
    if theta.size == 0:
        return GraspVerdict.POTENTIAL
    if np.all(theta < params.stable_deg):
        return GraspVerdict.STABLE
    if np.any(theta > params.discard_deg):
        return GraspVerdict.UNSTABLE
    return GraspVerdict.TUNABLE


def classify(grasp: Grasp, contacts, P: PointCloud, params: FineTuneParams = FineTuneParams()) -> GraspVerdict:
    return classify_angles(contact_angles(grasp, P, contacts), params)


@dataclass
class TuneOutcome:
    grasp: Grasp
    contacts: np.ndarray
    verdict: GraspVerdict
    theta: np.ndarray
    moved_from: np.ndarray | None = None
    moved_to: np.ndarray | None = None


def evaluate_grasp(grasp: Grasp, P: PointCloud, gripper: GripperModel = GripperModel(),
                   params: FineTuneParams = FineTuneParams()) -> TuneOutcome:
    contacts = stick_contacts(grasp, P, gripper.contact_radius)
    theta = contact_angles(grasp, P, contacts)
    return TuneOutcome(grasp, contacts, classify_angles(theta, params), theta)


def finetune_position(grasp: Grasp, contact: int, P: PointCloud, params: FineTuneParams = FineTuneParams(),
                      gripper: GripperModel = GripperModel(), index: SpatialIndex | None = None) -> TuneOutcome:
    """Shift the grasp, without rotating it, so the contact lands on a flat,
    well-aligned patch near the original contact point."""
    index = index or SpatialIndex(P.points)
    p0 = P.points[contact]
    axis = grasp.closing_axis
    k1 = min(params.k1, len(P))
    k2 = min(params.k2 + 1, len(P))
    cos_stable = np.cos(np.radians(params.stable_deg))
    cos_flat = np.cos(np.radians(params.flat_deg))
    for q in index.knn(p0, k1):
        nq = P.normals[q]
        if abs(nq @ axis) <= cos_stable:
            continue
        around = index.knn(P.points[q], k2)
        around = around[around != q][: params.k2]
        if np.all(P.normals[around] @ nq > cos_flat):
            moved = grasp.translated(P.points[q] - p0)
            out = evaluate_grasp(moved, P, gripper, params)
            out.moved_from, out.moved_to = p0, P.points[q]
            return out
    raise FinetuneFailedError("no flat, aligned patch among the nearest neighbors")


def finetune_center(grasp: Grasp, sobb: SOBB, contacts: np.ndarray | None = None) -> Grasp:
    """Slide the grasp along its closing axis to the middle of the object.

    With two physical contacts their midpoint is used; otherwise the
    midpoint of where the closing line crosses the bounding box. The
    grasp is returned unchanged when its jaw segment misses the box.
    """
    axis, c = grasp.closing_axis, grasp.center
    if contacts is not None and len(contacts) == 2:
        mid = np.asarray(contacts, dtype=float).mean(axis=0)
        return grasp.translated(((mid - c) @ axis) * axis)
    half = grasp.width / 2 * axis
    if sobb.segment_intersection(c - half, c + half) is None:
        return grasp
    span = line_box_intersection(sobb, c, axis)
    if span is None:
        return grasp
    return grasp.translated(((span[0] + span[1]) / 2) * axis)


def line_box_intersection(sobb: SOBB, origin: np.ndarray, direction: np.ndarray) -> tuple[float, float] | None:
    """Signed parameters where the line origin + t * direction crosses the box."""
    o = sobb.to_local(origin)
    d = sobb.axes @ np.asarray(direction, dtype=float)
    half = sobb.extents / 2
    t0, t1 = -np.inf, np.inf
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if abs(o[k]) > half[k]:
                return None
            continue
        ta, tb = (-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    if t0 > t1:
        return None
    return t0, t1
