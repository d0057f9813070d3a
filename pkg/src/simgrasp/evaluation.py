"""Synthetic benchmark suites and cached fixture databases.

Every suite is deterministic given its seed: scenes come from the fixture
catalog, semantic answers from the offline stub, and registration uses a
fixed RANSAC seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fixtures
from .cloud import SpatialIndex, voxel_downsample
from .descriptor import build_cfpfh, ds, geometric_match, qs
from .dimension import SortedExtents, dimensional_match
from .errors import NoPlaneError, RegistrationFailedError, SimGraspError
from .grasping import Grasp, GraspVerdict, evaluate_grasp, feasibility
from .planner import PlanConfig, resolve_grasp, support_plane
from .registration import RegistrationParams, detect_planes, register
from .scene import make_mesh, make_scene, orbit_camera, scene_from_dict, scene_to_dict
from .selection import MatchConfig, Observation, Services, match, observe_scene
from .semantic import Category, EmbeddingTable, StubCompletionService
from .store import Database, IngestParams, ingest_model, load_database, save_database
from .transforms import axis_angle, make_transform

log = logging.getLogger(__name__)

# modules whose behavior determines database contents
_DB_SOURCES = ("cloud.py", "descriptor.py", "grasping.py", "scene.py", "store.py", "dimension.py", "transforms.py")


def cache_root() -> Path:
    env = os.environ.get("SIMGRASP_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "simgrasp"


def _cache_key(catalog, params: IngestParams) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([list(e) for e in catalog], sort_keys=True).encode())
    h.update(json.dumps([params.descriptor.to_dict(), params.sampler_dict()], sort_keys=True).encode())
    here = Path(__file__).parent
    for name in _DB_SOURCES:
        h.update((here / name).read_bytes())
    return h.hexdigest()[:16]


def build_database(catalog, params: IngestParams = IngestParams(), progress=None) -> Database:
    """Ingest (id, raw category, mesh spec) entries into an in-memory database."""
    records = []
    for k, (model_id, raw, spec) in enumerate(catalog):
        category = Category.of(raw, fixtures.SIMPLIFIED.get(raw))
        records.append(ingest_model(make_mesh(spec), model_id, category, params, source_info={"mesh": spec}))
        if progress is not None:
            progress(k + 1, len(catalog), model_id)
    return Database(records, params)


def cached_database(name: str, catalog, params: IngestParams = IngestParams(), cache_dir=None,
                    progress=None) -> Database:
    """Load a database from the cache, building and saving it on a miss.

    The cache key covers the catalog, the ingest parameters, and the
    source of every module that shapes a record, so stale entries are
    never reused.
    """
    root = Path(cache_dir) if cache_dir is not None else cache_root()
    path = root / f"{name}-{_cache_key(catalog, params)}"
    if (path / "manifest.json").exists():
        return load_database(path)
    db = build_database(catalog, params, progress)
    root.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=root, prefix=f".{name}-"))
    try:
        save_database(db, tmp)
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return load_database(path)


def fixture_database(cache_dir=None, progress=None) -> Database:
    return cached_database("fixture", fixtures.CATALOG, IngestParams(), cache_dir, progress)


def inflated_database(total: int = 1000, cache_dir=None, progress=None) -> Database:
    """The fixture catalog padded with procedural variants; grasps are not sampled."""
    params = IngestParams(sample_grasps=False)
    return cached_database(f"inflated{total}", fixtures.inflated_catalog(total), params, cache_dir, progress)


def stub_services(embeddings: bool = True) -> Services:
    table = EmbeddingTable(fixtures.synthetic_embeddings()) if embeddings else None
    return Services(StubCompletionService(fixtures.stub_table()), table)


def warm(db: Database, params: RegistrationParams = RegistrationParams()) -> None:
    """Load clouds and build registration targets up front, so timings
    measure matching rather than disk reads."""
    for rec in db:
        target = rec.registration_target(params)
        target.planes
        target.features


# ------------------------------------------------------------ matching

@dataclass(frozen=True)
class Trial:
    model_id: str
    rank: int | None
    tier: int | None
    group_size: int
    registered: int
    seconds: float
    occlusion: float | None


@dataclass
class SuiteResult:
    trials: list[Trial]
    ablate: str | None = None

    def accuracy(self, x: int) -> float:
        """Fraction of trials whose true model is among the top ``x`` candidates."""
        if not self.trials:
            return 0.0
        return sum(t.rank is not None and t.rank <= x for t in self.trials) / len(self.trials)

    @property
    def total_seconds(self) -> float:
        return sum(t.seconds for t in self.trials)

    @property
    def mean_seconds(self) -> float:
        return self.total_seconds / len(self.trials) if self.trials else 0.0

    @property
    def mean_registered(self) -> float:
        return float(np.mean([t.registered for t in self.trials])) if self.trials else 0.0

    def to_dict(self, tops=(1, 2, 5)) -> dict:
        return {
            "ablate": self.ablate,
            "trials": len(self.trials),
            "accuracy": {f"MA{x}": self.accuracy(x) for x in tops},
            "mean_match_seconds": self.mean_seconds,
            "mean_registered": self.mean_registered,
            "per_trial": [t.__dict__ for t in self.trials],
        }


def observe_suite(scenes, config: MatchConfig = MatchConfig(), base_dir=None) -> list[Observation]:
    return [observe_scene(scene_from_dict(d, base_dir), config) for d in scenes]


def run_match_suite(observations, db, services: Services, config: MatchConfig = MatchConfig(),
                    ablate: str | None = None, jobs: int = 1, dry_run: bool = False) -> SuiteResult:
    trials = []
    for obs in observations:
        t0 = time.perf_counter()
        report = match(obs, db, services, config, ablate, jobs, dry_run)
        seconds = time.perf_counter() - t0
        truth = obs.truth.get("model_id")
        trials.append(Trial(truth, report.rank_of(truth) if truth else None, report.tier, len(report.group),
                            len(report.group) if dry_run else report.registered, seconds,
                            report.notes.get("occlusion_ratio")))
    return SuiteResult(trials, ablate)


# ------------------------------------------------------- registration

@dataclass(frozen=True)
class PairResult:
    scene_model: str
    db_model: str
    pdm_fitness: float
    ransac_fitness: float
    pdm_transform: np.ndarray


SIMILAR_FAMILIES = ("boxlike", "cylindrical", "bracket")


def similar_pairs(count: int = 30, seed: int = 17) -> list[tuple[dict, str]]:
    """(scene dict, model id) pairs of distinct objects from one family whose
    extents pass the size test, keeping only observations with a detectable
    plane."""
    rng = np.random.default_rng(seed)
    ids = {e[0] for e in fixtures.CATALOG}
    extents = {}
    for model_id, _, spec in fixtures.CATALOG:
        lo, hi = make_mesh(spec).bounds()
        extents[model_id] = SortedExtents.of(hi - lo)
    pool = [(a, b) for fam in SIMILAR_FAMILIES for a in fixtures.FAMILIES[fam] for b in fixtures.FAMILIES[fam]
            if a != b and a in ids and b in ids and dimensional_match(extents[a], extents[b])]
    params = RegistrationParams()
    out = []
    for k in rng.permutation(len(pool)):
        if len(out) >= count:
            break
        a, b = pool[k]
        model_id, raw, spec = fixtures.catalog_entry(a)
        mesh = make_mesh(spec)
        yaw = rng.uniform(0, 2 * math.pi)
        pose = make_transform(axis_angle([0, 0, 1], yaw), [0.0, 0.0, 0.0])
        top = mesh.transformed(pose).bounds()[1][2]
        cam = orbit_camera([0.0, 0.0, top / 2], rng.uniform(0.45, 0.6), rng.uniform(0, 360), rng.uniform(30, 60))
        d = scene_to_dict(spec, pose, cam, seed=int(rng.integers(2 ** 31)), category=raw, model_id=model_id)
        scene = scene_from_dict(d)
        pd = voxel_downsample(scene.cloud, params.voxel)
        if detect_planes(pd, params.plane_dist_tol, params.plane_min_inliers, params.plane_normal_deg,
                         params.plane_flat_deg):
            out.append((d, b))
    return out


def registration_suite(db, pairs, params: RegistrationParams = RegistrationParams()) -> list[PairResult]:
    results = []
    for d, model_id in pairs:
        scene = scene_from_dict(d)
        target = db[model_id].registration_target(params)
        try:
            pdm = register(scene.cloud, target, params, coarse="pdm")
        except (NoPlaneError, RegistrationFailedError):
            continue
        try:
            ran = register(scene.cloud, target, params, coarse="ransac")
            ran_fit = ran.fitness
        except RegistrationFailedError:
            ran_fit = 0.0
        results.append(PairResult(d["model_id"], model_id, pdm.fitness, ran_fit, pdm.transform))
    return results


# -------------------------------------------------------- fine-tuning

@dataclass
class TuneCase:
    observation: Observation
    grasp: Grasp
    theta: np.ndarray


def bevel_observations(blocks=None, views: int = 4, seed: int = 31) -> list[Observation]:
    """Single views of the chamfered blocks, each facing one chamfered side."""
    rng = np.random.default_rng(seed)
    out = []
    for k, spec in enumerate(blocks or fixtures.BEVEL_BLOCKS):
        mesh = make_mesh(spec)
        for v in range(views):
            yaw = rng.uniform(0, 2 * math.pi)
            pose = make_transform(axis_angle([0, 0, 1], yaw), [0.0, 0.0, 0.0])
            top = mesh.transformed(pose).bounds()[1][2]
            # look at a chamfer and its adjacent side face
            az = math.degrees(yaw) + 180.0 * (v % 2) + rng.uniform(-35, 35)
            cam = fixtures.default_camera([0.0, 0.0, top / 2], az, rng.uniform(35, 55), rng.uniform(0.4, 0.5))
            scene = make_scene(mesh, pose, cam, seed=int(rng.integers(2 ** 31)), category="wooden_block",
                               model_id=f"bevel{k}")
            scene.truth["mesh"] = spec
            out.append(observe_scene(scene))
    return out


def tunable_cases(observations, per_view: int = 8, config: PlanConfig = PlanConfig(), seed: int = 5) -> list[TuneCase]:
    """Top-down grasps closing across each block at chamfer height.

    The jaw line passes through the chamfer faces, so the contacts lean
    by the chamfer angle and the grasps classify as Tunable. Only grasps
    that are feasible and Tunable in the observed cloud are kept.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for obs in observations:
        spec = obs.truth["mesh"]
        dx, dy, dz = spec["size"]
        a = math.radians(spec.get("angle", 25.0))
        h = spec["bevel"] * math.cos(a)
        pose = obs.truth["object_pose"]
        R = pose[:3, :3]
        x, z = R[:, 0], R[:, 2]
        support = support_plane(obs)
        contacts = config.contact_cloud(obs.cloud)
        width = min(dx + 2 * config.gripper.clearance, config.gripper.max_opening)
        for _ in range(per_view * 4):
            if sum(c.observation is obs for c in cases) >= per_view:
                break
            local = np.array([0.0, rng.uniform(-0.35, 0.35) * dy, dz - rng.uniform(0.25, 0.75) * h])
            center = pose[:3, :3] @ local + pose[:3, 3]
            approach = -z
            rot = np.stack([x, np.cross(approach, x), approach], axis=1)
            g = Grasp(make_transform(rot, center), width)
            out = evaluate_grasp(g, contacts, config.gripper, config.finetune_params)
            if out.verdict is not GraspVerdict.TUNABLE:
                continue
            if feasibility(g, obs.cloud, config.gripper, support, config.reachability) is not None:
                continue
            cases.append(TuneCase(obs, g, out.theta))
    return cases


@dataclass
class TuneStats:
    count: int
    stable_fraction: float
    theta_before: float
    theta_after: float
    verdicts: dict = field(default_factory=dict)


def finetune_effect(cases, config: PlanConfig = PlanConfig()) -> TuneStats:
    """Resolve every case with the planner's per-grasp logic and summarize.

    Mean contact angle is taken over each grasp's contacts; a grasp that
    is not adjusted keeps its original angles.
    """
    verdicts = Counter()
    before, after = [], []
    for case in cases:
        obs = case.observation
        contacts = config.contact_cloud(obs.cloud)
        final, verdict, _, out = resolve_grasp(case.grasp, obs, config, support_plane(obs), contacts,
                                               SpatialIndex(contacts.points))
        verdicts[verdict.value] += 1
        before.append(float(np.mean(case.theta)))
        tuned = final is not None and out.theta.size
        after.append(float(np.mean(out.theta)) if tuned else before[-1])
    n = len(cases)
    return TuneStats(n, verdicts.get(GraspVerdict.STABLE.value, 0) / n if n else 0.0,
                     float(np.mean(before)) if n else 0.0, float(np.mean(after)) if n else 0.0, dict(verdicts))


# -------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseRun:
    kind: str
    qs: float
    ds: float | None
    match: bool


def noise_suite(db, model_id: str = "bowl", sigma: float = 0.002, seed: int = 3,
                config: MatchConfig = MatchConfig()) -> list[NoiseRun]:
    """Geometric verdict of one observed object against its own model under
    each sensing condition, from a fixed viewpoint."""
    _, raw, spec = fixtures.catalog_entry(model_id)
    mesh = make_mesh(spec)
    top = mesh.bounds()[1][2]
    cam = fixtures.default_camera([0.0, 0.0, top / 2], 30.0, 45.0, 0.45)
    model = db[model_id].descriptor
    runs = []
    for kind, noise in fixtures.noise_settings(sigma).items():
        scene = make_scene(mesh, np.eye(4), cam, noise, seed=seed, category=raw, model_id=model_id)
        d = build_cfpfh(scene.cloud, config.descriptor)
        runs.append(NoiseRun(kind, qs(d, model), ds(d, model),
                             geometric_match(d, model, config.qs_min, config.ds_max)))
    return runs


# ------------------------------------------------------- suite configs

def load_suite(path) -> dict:
    """Suite config: {"version": 1, "tops": [...], "scenes": [scene dicts or relative paths]}."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SimGraspError(f"{path}: cannot read suite config: {exc}") from exc
    if cfg.get("version") != 1 or not isinstance(cfg.get("scenes"), list) or not cfg["scenes"]:
        raise SimGraspError(f"{path}: suite config needs version 1 and a non-empty 'scenes' list")
    scenes = []
    for item in cfg["scenes"]:
        if isinstance(item, str):
            item = json.loads((path.parent / item).read_text())
        scenes.append(item)
    tops = cfg.get("tops", [1, 2, 5])
    if not all(isinstance(x, int) and x >= 1 for x in tops):
        raise SimGraspError(f"{path}: 'tops' must be positive integers")
    return {"scenes": scenes, "tops": tops, "base_dir": path.parent}


def evaluate(observations, db, services: Services, config: MatchConfig = MatchConfig(), tops=(1, 2, 5),
             ablate: str | None = None, jobs: int = 1) -> dict:
    result = run_match_suite(observations, db, services, config, ablate, jobs)
    return result.to_dict(tuple(tops))


def format_table(summary: dict) -> str:
    rows = [("metric", "value")]
    for k, v in summary["accuracy"].items():
        rows.append((k, f"{v:.3f}"))
    rows.append(("trials", str(summary["trials"])))
    rows.append(("mean match s", f"{summary['mean_match_seconds']:.3f}"))
    rows.append(("mean registered", f"{summary['mean_registered']:.2f}"))
    w = max(len(r[0]) for r in rows)
    return "\n".join(f"{a:<{w}}  {b}" for a, b in rows)
