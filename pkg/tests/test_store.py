import json
import shutil

import numpy as np
import pytest

from simgrasp import fixtures
from simgrasp.cloud import PointCloud, voxel_downsample
from simgrasp.errors import DatabaseLoadError, InvalidInputError
from simgrasp.scene import box, make_mesh
from simgrasp.store import (COUNT_VOXEL, Database, IngestParams, canonical_json, ingest_model, load_database,
                            save_database)

QUICK = IngestParams(surface_spacing=0.004, grasp_count=20)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    records = []
    for model_id in ("sugar_box", "soda_can", "bowl"):
        _, raw, spec = fixtures.catalog_entry(model_id)
        records.append(ingest_model(make_mesh(spec), model_id, raw, QUICK, source_info={"mesh": spec}))
    db = Database(records, QUICK)
    root = tmp_path_factory.mktemp("db")
    save_database(db, root)
    return db, root


def test_cube_ingest():
    rec = ingest_model(box((0.05, 0.05, 0.05)), "cube", "box")
    assert rec.sorted_extents.values == pytest.approx((0.05, 0.05, 0.05), abs=1e-3)
    assert len(rec.grasps) >= 20
    assert rec.descriptor.sample_count > 0
    assert all(g.source_model == "cube" for g in rec.grasps)
    assert not rec.flags


def test_reingest_is_identical():
    mesh = box((0.08, 0.05, 0.03))
    a, b = (ingest_model(mesh, "b", "box", QUICK) for _ in range(2))
    assert a.complete_cloud.points.tobytes() == b.complete_cloud.points.tobytes()
    assert canonical_json(a.descriptor.to_dict()) == canonical_json(b.descriptor.to_dict())
    assert [g.pose.tobytes() for g in a.grasps] == [g.pose.tobytes() for g in b.grasps]


def test_problems_are_flagged_not_raised():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(5, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    rec = ingest_model(PointCloud(v * 0.3, v), "sparse", "thing", QUICK)
    assert "descriptor-too-sparse" in rec.flags and "ungraspable" in rec.flags
    assert rec.descriptor is None and rec.grasps == ()
    with pytest.raises(InvalidInputError):
        ingest_model(PointCloud(v), "bare", "thing", QUICK)
    with pytest.raises(InvalidInputError):
        ingest_model(box((0.05, 0.05, 0.05)), "bad id!", "box", QUICK)


def test_record_invariants(saved):
    db, _ = saved
    for rec in db:
        assert rec.point_count_5mm == len(voxel_downsample(rec.complete_cloud, COUNT_VOXEL))
        assert list(rec.sorted_extents.values) == sorted(rec.sorted_extents.values, reverse=True)
        assert rec.grasps or "ungraspable" in rec.flags


def test_save_load_save_is_byte_identical(saved, tmp_path):
    db, root = saved
    back = load_database(root)
    save_database(back, tmp_path)
    assert tree_bytes(tmp_path) == tree_bytes(root)
    for a in db:
        b = back[a.id]
        assert b.point_count_5mm == a.point_count_5mm
        assert b.sorted_extents.values == a.sorted_extents.values
        assert np.allclose(b.complete_cloud.points, a.complete_cloud.points, atol=1e-12, rtol=0)
        assert b.descriptor.pair_counts == a.descriptor.pair_counts
        assert b.descriptor.sample_count == a.descriptor.sample_count
        assert np.allclose(b.descriptor.main_distribution, a.descriptor.main_distribution, atol=1e-12, rtol=0)
        assert all(np.allclose(g.pose, h.pose, atol=1e-12, rtol=0) for g, h in zip(a.grasps, b.grasps))
        assert b.category == a.category


def test_ninety_model_round_trip(tmp_path):
    params = IngestParams(surface_spacing=0.004, sample_grasps=False)
    records = [ingest_model(make_mesh(spec), mid, raw, params) for mid, raw, spec in fixtures.inflated_catalog(90)]
    save_database(Database(records, params), tmp_path / "a")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["models"]) == 90
    back = load_database(tmp_path / "a")
    assert back.ids == sorted(r.id for r in records)
    save_database(back, tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_database_is_read_only(saved):
    db, _ = saved
    with pytest.raises(TypeError):
        db._records["x"] = None
    with pytest.raises(InvalidInputError):
        Database([db["bowl"], db["bowl"]])


@pytest.fixture
def copy_db(saved, tmp_path):
    _, root = saved
    dst = tmp_path / "db"
    shutil.copytree(root, dst)
    return dst


def test_missing_descriptor_names_model(copy_db):
    (copy_db / "models" / "soda_can" / "descriptor.json").unlink()
    with pytest.raises(DatabaseLoadError, match="soda_can"):
        load_database(copy_db)


def test_missing_cloud_names_model(copy_db):
    (copy_db / "models" / "bowl" / "cloud.ply").unlink()
    with pytest.raises(DatabaseLoadError, match="bowl"):
        load_database(copy_db)


def test_params_mismatch_rejected(copy_db):
    meta_path = copy_db / "models" / "bowl" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["sampler_params"]["grasp_count"] = 7
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(DatabaseLoadError, match="bowl"):
        load_database(copy_db)


def test_version_and_corrupt_json(copy_db):
    manifest = json.loads((copy_db / "manifest.json").read_text())
    (copy_db / "models" / "sugar_box" / "grasps.json").write_text("{not json")
    with pytest.raises(DatabaseLoadError, match="grasps.json"):
        load_database(copy_db)
    manifest["version"] = 99
    (copy_db / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatabaseLoadError, match="manifest.json"):
        load_database(copy_db)
