import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simgrasp.errors import EmptyRenderError, InvalidInputError
from simgrasp.transforms import axis_angle, make_transform
from simgrasp.scene import (OBJECT, PRIMITIVES, Mesh, NoiseModel, VirtualCamera, apply_noise, box, make_mesh,
                            make_scene, occlude, orbit_camera, rasterize, read_obj, render_partial, scene_from_dict,
                            scene_to_dict, side_occluder, sphere, write_obj)

CUBE = box((0.1, 0.1, 0.1)).transformed(np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, -0.05], [0, 0, 0, 1.0]]))


def on_surface(mesh, cloud, face_ids):
    v = mesh.vertices[mesh.triangles[face_ids]]
    n = mesh.face_normals[face_ids]
    return np.abs(((cloud.points - v[:, 0]) * n).sum(axis=1))


def test_mesh_validation():
    with pytest.raises(InvalidInputError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))
    with pytest.raises(InvalidInputError):
        Mesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), np.array([[0, 1, 2]]))
    with pytest.raises(InvalidInputError):
        VirtualCamera(np.eye(4), fx=-1)
    with pytest.raises(InvalidInputError):
        VirtualCamera(np.eye(4), width=16)
    with pytest.raises(InvalidInputError):
        NoiseModel("gaussian-depth", sigma=-1)
    with pytest.raises(InvalidInputError):
        NoiseModel("hole-filled", hole_rate=0.5)


SPECS = {
    "box": {"size": [0.1, 0.06, 0.04]},
    "cylinder": {"radius": 0.03, "height": 0.1},
    "frustum": {"r_bottom": 0.03, "r_top": 0.04, "height": 0.1},
    "sphere": {"radius": 0.04},
    "bowl": {"radius": 0.07, "depth": 0.05},
    "l_bracket": {"length": 0.1, "height": 0.06, "width": 0.04, "thickness": 0.01},
    "beveled_block": {"size": [0.06, 0.06, 0.05], "bevel": 0.015},
}


def test_every_primitive_has_a_spec():
    assert set(SPECS) == set(PRIMITIVES)


@pytest.mark.parametrize("name", sorted(SPECS))
def test_primitives_are_watertight(name):
    mesh = make_mesh({"primitive": name, **SPECS[name]})
    assert mesh.watertight
    assert np.all(mesh.face_areas > 1e-12)


def test_obj_round_trip(tmp_path):
    m = box((0.1, 0.05, 0.02))
    write_obj(m, tmp_path / "b.obj")
    back = read_obj(tmp_path / "b.obj")
    assert np.allclose(back.vertices, m.vertices) and np.array_equal(back.triangles, m.triangles)


def test_cube_face_on_sees_one_face():
    cam = VirtualCamera.looking_at([0.5, 0, 0], [0, 0, 0])
    cloud, fids = render_partial(CUBE, cam)
    assert np.allclose(cloud.normals, [1, 0, 0])
    assert len(np.unique(np.round(CUBE.face_normals[fids], 9), axis=0)) == 1


def test_cube_oblique_face_counts_match_projected_areas():
    yaw, pitch = math.radians(45), math.radians(30)
    eye = 3.0 * np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)])
    cam = VirtualCamera.looking_at(eye, [0, 0, 0], fx=2000, fy=2000, width=320, height=320, cx=159.5, cy=159.5)
    cloud, fids = render_partial(CUBE, cam)
    normals = np.round(CUBE.face_normals[fids], 6)
    faces, counts = np.unique(normals, axis=0, return_counts=True)
    assert len(faces) == 3
    view = eye / np.linalg.norm(eye)
    # each face has area 0.01; at this range projection is near orthographic
    expected = np.abs(faces @ view)
    assert np.allclose(counts / counts.sum(), expected / expected.sum(), rtol=0.10)


def test_sphere_shows_only_front_hemisphere():
    cam = VirtualCamera.looking_at([0.4, 0.1, 0.2], [0, 0, 0])
    cloud, _ = render_partial(sphere(0.05), cam)
    rays = cloud.points - cam.position
    assert np.all((cloud.normals * rays).sum(axis=1) < 0)


def test_empty_render():
    cam = VirtualCamera.looking_at([0.5, 0, 0], [1.0, 0, 0])
    with pytest.raises(EmptyRenderError):
        render_partial(CUBE, cam)


def wall_frame():
    cam = VirtualCamera(np.eye(4), width=160, height=120, cx=79.5, cy=59.5)
    wall = box((2.0, 2.0, 0.01)).transformed(np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 1.0], [0, 0, 0, 1]]))
    return rasterize([(wall, 1)], cam), cam


def test_noise_examples():
    frame, _ = wall_frame()
    same = apply_noise(frame, NoiseModel(), 3)
    assert same.depth.tobytes() == frame.depth.tobytes()
    model = NoiseModel("gaussian-depth", sigma=0.001)
    noisy = apply_noise(frame, model, 3)
    diff = (noisy.depth - frame.depth)[frame.valid]
    assert diff.size >= 10_000
    assert 0.0008 <= diff.std() <= 0.0012
    assert apply_noise(frame, model, 3).depth.tobytes() == noisy.depth.tobytes()
    for kind in ("smoothed", "hole-filled"):
        m = NoiseModel(kind, hole_rate=0.1)
        assert apply_noise(frame, m, 5).depth.tobytes() == apply_noise(frame, m, 5).depth.tobytes()


def test_occlusion_examples():
    cam = VirtualCamera.looking_at([0.5, 0, 0.0], [0, 0, 0])
    clean = rasterize([(CUBE, 1)], cam)
    assert occlude(clean, cam, []).depth.tobytes() == clean.depth.tobytes()
    area = (clean.label == 1).sum()
    # the camera x axis spans image columns; hide x < 0 in front of the cube
    left = occlude(clean, cam, [(np.array([-1.0, -1.0, 0.3]), np.array([0.0, 1.0, 0.31]))])
    assert (left.label == 1).sum() == pytest.approx(area / 2, rel=0.10)
    behind = occlude(clean, cam, [(np.array([-1.0, -1.0, 0.9]), np.array([1.0, 1.0, 1.0]))])
    assert np.array_equal(behind.label[clean.label == 1], clean.label[clean.label == 1])


def test_canonical_box_cloud_on_surface():
    mesh = box((0.1, 0.06, 0.04))
    cam = orbit_camera([0, 0, 0.02], 0.45, 30.0, 40.0)
    scene = make_scene(mesh, np.eye(4), cam, support=False)
    assert on_surface(mesh, scene.cloud, scene.truth["face_ids"]).max() < 1e-9


def test_occlusion_budget_keeps_half():
    mesh = box((0.1, 0.06, 0.04))
    cam = orbit_camera([0, 0, 0.02], 0.45, 30.0, 40.0)
    frame = rasterize([(mesh, OBJECT)], cam)
    occ = side_occluder(frame, cam, 0.4)
    scene = make_scene(mesh, np.eye(4), cam, occluders=[occ])
    assert scene.truth["visible_pixels"] >= 0.5 * scene.truth["unoccluded_pixels"]
    assert scene.truth["visible_pixels"] < scene.truth["unoccluded_pixels"]


@pytest.mark.parametrize("side", ["left", "right"])
@pytest.mark.parametrize("yaw", [0.0, 0.7, 2.1])
def test_occluder_hides_whole_columns(side, yaw):
    mesh = box((0.1, 0.06, 0.04)).transformed(make_transform(axis_angle([0, 0, 1], yaw), [0.03, -0.02, 0.0]))
    cam = orbit_camera([0, 0, 0.02], 0.5, 60.0, 45.0)
    frame = rasterize([(mesh, OBJECT)], cam)
    obj = (frame.label == OBJECT) & frame.valid
    cols = np.nonzero(obj)[1]
    occ = side_occluder(frame, cam, 0.4, side, limits=(0.3, 0.5))
    covered = (occlude(frame, cam, [occ]).label != OBJECT) & obj
    hidden_cols = np.unique(np.nonzero(covered)[1])
    ratio = covered.sum() / obj.sum()
    assert 0.3 <= ratio <= 0.5
    # a contiguous run of columns from the chosen side, each hidden completely
    expected = np.unique(cols[cols <= hidden_cols.max()] if side == "left" else cols[cols >= hidden_cols.min()])
    assert np.array_equal(hidden_cols, expected)
    assert covered[:, hidden_cols].sum() == obj[:, hidden_cols].sum()


def test_category_withheld():
    cam = orbit_camera([0, 0, 0.02], 0.45, 0.0, 40.0)
    shown = make_scene(box((0.1, 0.06, 0.04)), np.eye(4), cam, category="box")
    hidden = make_scene(box((0.1, 0.06, 0.04)), np.eye(4), cam, category="box", withhold_category=True)
    assert shown.category == "box" and hidden.category is None
    assert shown.support_normal is not None and shown.support_normal[2] > 0.999


@given(st.floats(0, 360), st.floats(15, 75), st.sampled_from(["box", "sphere", "l_bracket"]))
@settings(max_examples=20)
def test_render_on_visible_surface(azimuth, elevation, kind):
    mesh = {"box": box((0.08, 0.05, 0.03)), "sphere": sphere(0.04),
            "l_bracket": make_mesh({"primitive": "l_bracket", **SPECS["l_bracket"]})}[kind]
    cam = orbit_camera([0, 0, 0.01], 0.4, azimuth, elevation, width=96, height=72, cx=47.5, cy=35.5, fx=100, fy=100)
    cloud, fids = render_partial(mesh, cam)
    assert on_surface(mesh, cloud, fids).max() < 1e-9
    assert np.all((cloud.normals * (cloud.points - cam.position)).sum(axis=1) <= 0)


def test_scene_replay_is_bit_identical(tmp_path):
    spec = {"primitive": "box", "size": [0.1, 0.06, 0.04]}
    cam = orbit_camera([0, 0, 0.02], 0.45, 20.0, 40.0)
    noise = [NoiseModel("gaussian-depth", sigma=0.002), NoiseModel("hole-filled", hole_rate=0.05)]
    d = scene_to_dict(spec, np.eye(4), cam, noise, seed=4, category="box", model_id="b")
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(d))
    a = scene_from_dict(json.loads(path.read_text()))
    b = scene_from_dict(d)
    assert a.cloud.points.tobytes() == b.cloud.points.tobytes()
    assert a.cloud.normals.tobytes() == b.cloud.normals.tobytes()
    assert a.truth["model_id"] == "b"
