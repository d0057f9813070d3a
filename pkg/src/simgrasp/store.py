"""Model database: ingestion and on-disk persistence.

Layout::

    db/manifest.json
    db/models/<id>/cloud.ply
    db/models/<id>/descriptor.json
    db/models/<id>/grasps.json
    db/models/<id>/meta.json

Every JSON file is written canonically (sorted keys, shortest round-trip
floats) so saving a loaded database reproduces it byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable

import numpy as np

from .cloud import PointCloud, read_ply, voxel_downsample, write_ply
from .descriptor import CFPFHDescriptor, DescriptorParams, build_cfpfh
from .dimension import SortedExtents, aabb_extents
from .errors import DatabaseLoadError, InvalidInputError, NoGraspFoundError, TooSparseError
from .grasping import Grasp, GripperModel, sample_antipodal_grasps
from .registration import RegistrationParams, RegistrationTarget
from .scene import Mesh
from .semantic import Category

log = logging.getLogger(__name__)

DB_VERSION = 1
COUNT_VOXEL = 0.005
_ID = re.compile(r"^[A-Za-z0-9_.\-]+$")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


@dataclass(frozen=True)
class IngestParams:
    surface_spacing: float = 0.002
    descriptor: DescriptorParams = field(default_factory=DescriptorParams)
    grasp_count: int = 200
    approach_step_deg: float = 30.0
    sample_grasps: bool = True

    def sampler_dict(self) -> dict:
        return {"surface_spacing": self.surface_spacing, "grasp_count": self.grasp_count,
                "approach_step_deg": self.approach_step_deg, "sample_grasps": self.sample_grasps,
                "method": "antipodal"}

    @classmethod
    def from_dicts(cls, descriptor: dict, sampler: dict) -> "IngestParams":
        return cls(surface_spacing=float(sampler["surface_spacing"]), descriptor=DescriptorParams.from_dict(descriptor),
                   grasp_count=int(sampler["grasp_count"]), approach_step_deg=float(sampler["approach_step_deg"]),
                   sample_grasps=bool(sampler["sample_grasps"]))


class ModelRecord:
    """One database entry. The complete cloud may be loaded lazily."""

    def __init__(self, model_id: str, category: Category, descriptor: CFPFHDescriptor | None,
                 sorted_extents: SortedExtents, point_count_5mm: int, grasps: tuple[Grasp, ...],
                 cloud: PointCloud | Callable[[], PointCloud], flags: tuple[str, ...] = (), source: dict | None = None):
        if not _ID.match(model_id):
            raise InvalidInputError(f"bad model id {model_id!r}")
        self.id = model_id
        self.category = category
        self.descriptor = descriptor
        self.sorted_extents = sorted_extents
        self.point_count_5mm = int(point_count_5mm)
        self.grasps = tuple(grasps)
        self.flags = tuple(flags)
        self.source = dict(source or {})
        self._cloud = cloud if isinstance(cloud, PointCloud) else None
        self._loader = None if isinstance(cloud, PointCloud) else cloud
        self._target: RegistrationTarget | None = None

    @property
    def complete_cloud(self) -> PointCloud:
        if self._cloud is None:
            self._cloud = self._loader()
        return self._cloud

    def registration_target(self, params: RegistrationParams) -> RegistrationTarget:
        if self._target is None or self._target.params != params:
            self._target = RegistrationTarget.from_cloud(self.complete_cloud, params)
        return self._target

    def meta_dict(self, ingest: IngestParams) -> dict:
        return {
            "version": DB_VERSION,
            "id": self.id,
            "category": {"raw": self.category.raw, "simplified": self.category.simplified},
            "sorted_extents": list(self.sorted_extents.values),
            "point_count_5mm": self.point_count_5mm,
            "flags": list(self.flags),
            "source": self.source,
            "descriptor_params": ingest.descriptor.to_dict(),
            "sampler_params": ingest.sampler_dict(),
        }


def content_hash(source) -> str:
    h = hashlib.sha256()
    if isinstance(source, Mesh):
        h.update(np.ascontiguousarray(source.vertices).tobytes())
        h.update(np.ascontiguousarray(source.triangles).tobytes())
    else:
        h.update(np.ascontiguousarray(source.points).tobytes())
        if source.has_normals:
            h.update(np.ascontiguousarray(source.normals).tobytes())
    return h.hexdigest()


def ingest_model(source: Mesh | PointCloud, model_id: str, category: Category | str,
                 params: IngestParams = IngestParams(), gripper: GripperModel = GripperModel(),
                 source_info: dict | None = None) -> ModelRecord:
    """Build a database record from a canonically posed mesh or cloud.

    Problems that leave a record incomplete (too few descriptor samples,
    no grasps) are recorded as flags rather than raised.
    """
    if isinstance(category, str):
        category = Category.of(category)
    seed = int(content_hash(source)[:16], 16)
    if isinstance(source, Mesh):
        cloud, _ = source.sample_surface(params.surface_spacing, seed)
    else:
        cloud = source
        if not cloud.has_normals:
            raise InvalidInputError("model clouds need normals")
    flags = []
    try:
        descriptor = build_cfpfh(cloud, params.descriptor)
    except TooSparseError:
        descriptor = None
        flags.append("descriptor-too-sparse")
    grasps: tuple[Grasp, ...] = ()
    if params.sample_grasps:
        try:
            raw = sample_antipodal_grasps(cloud, gripper, params.grasp_count, seed=seed,
                                          approach_step_deg=params.approach_step_deg)
            grasps = tuple(Grasp(g.pose, g.width, model_id) for g in raw)
        except NoGraspFoundError:
            flags.append("ungraspable")
    else:
        flags.append("grasps-not-sampled")
    count = len(voxel_downsample(cloud, COUNT_VOXEL))
    return ModelRecord(model_id, category, descriptor, aabb_extents(cloud), count, grasps, cloud, tuple(flags),
                       source_info)


class Database:
    """Read-only collection of model records keyed by id (sorted)."""

    def __init__(self, records, params: IngestParams = IngestParams()):
        recs = sorted(records, key=lambda r: r.id)
        ids = [r.id for r in recs]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate model ids")
        self._records = MappingProxyType({r.id: r for r in recs})
        self.params = params

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records.values())

    def __getitem__(self, model_id: str) -> ModelRecord:
        return self._records[model_id]

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._records

    @property
    def ids(self) -> list[str]:
        return list(self._records)

    def categories(self) -> list[str]:
        return sorted({r.category.simplified for r in self})


# ------------------------------------------------------------------ io

def _grasps_dict(grasps) -> dict:
    return {"version": DB_VERSION, "grasps": [g.to_dict() for g in grasps]}


def save_database(db: Database, path) -> None:
    root = Path(path)
    (root / "models").mkdir(parents=True, exist_ok=True)
    index = {}
    for rec in db:
        d = root / "models" / rec.id
        d.mkdir(parents=True, exist_ok=True)
        write_ply(rec.complete_cloud, d / "cloud.ply")
        desc = rec.descriptor.to_dict() if rec.descriptor is not None else None
        (d / "descriptor.json").write_text(canonical_json(desc))
        (d / "grasps.json").write_text(canonical_json(_grasps_dict(rec.grasps)))
        (d / "meta.json").write_text(canonical_json(rec.meta_dict(db.params)))
        index[rec.id] = f"models/{rec.id}"
    manifest = {
        "version": DB_VERSION,
        "descriptor_params": db.params.descriptor.to_dict(),
        "sampler_params": db.params.sampler_dict(),
        "models": index,
    }
    (root / "manifest.json").write_text(canonical_json(manifest))


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatabaseLoadError(f"{what}: missing file {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatabaseLoadError(f"{what}: corrupt JSON in {path}: {exc}") from exc


def load_database(path, lazy: bool = True) -> Database:
    root = Path(path)
    manifest = _read_json(root / "manifest.json", "manifest")
    if manifest.get("version") != DB_VERSION:
        raise DatabaseLoadError(f"{root / 'manifest.json'}: unsupported version {manifest.get('version')!r}")
    try:
        params = IngestParams.from_dicts(manifest["descriptor_params"], manifest["sampler_params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatabaseLoadError(f"{root / 'manifest.json'}: bad params: {exc}") from exc
    records = []
    for model_id, rel in sorted(manifest["models"].items()):
        d = root / rel
        what = f"model {model_id}"
        meta = _read_json(d / "meta.json", what)
        if meta.get("descriptor_params") != manifest["descriptor_params"] or \
                meta.get("sampler_params") != manifest["sampler_params"]:
            raise DatabaseLoadError(f"{what}: parameters in {d / 'meta.json'} differ from the manifest")
        desc = _read_json(d / "descriptor.json", what)
        grasps = _read_json(d / "grasps.json", what)
        cloud_path = d / "cloud.ply"
        if not cloud_path.exists():
            raise DatabaseLoadError(f"{what}: missing file {cloud_path}")
        try:
            descriptor = None if desc is None else CFPFHDescriptor.from_dict(desc)
            record = ModelRecord(
                model_id,
                Category(meta["category"]["raw"], meta["category"]["simplified"]),
                descriptor,
                SortedExtents(tuple(meta["sorted_extents"])),
                meta["point_count_5mm"],
                tuple(Grasp.from_dict(g) for g in grasps["grasps"]),
                (lambda p=cloud_path: read_ply(p)) if lazy else read_ply(cloud_path),
                tuple(meta.get("flags", ())),
                meta.get("source"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatabaseLoadError(f"{what}: malformed record in {d}: {exc}") from exc
        records.append(record)
    return Database(records, params)
