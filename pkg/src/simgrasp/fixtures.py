"""Procedural fixtures: a small model catalog, offline semantic knowledge,
synthetic word embeddings, and reproducible scene suites."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import NoiseModel, VirtualCamera, make_mesh, orbit_camera, scene_to_dict, side_occluder, rasterize, OBJECT
from .transforms import axis_angle, make_transform

# Grasp-relevant families. The offline completion stub answers with the
# target's family plus the families listed in GRASP_NEIGHBORS, which mimics
# the broad answers a chat model gives for the category prompt.
FAMILIES: dict[str, list[str]] = {
    "boxlike": ["cracker_box", "sugar_box", "book", "tissue_box", "dice", "brick", "sponge", "phone",
                "wooden_block", "eraser", "remote"],
    "cylindrical": ["soda_can", "bottle", "mug", "cup", "jar", "chips_can", "canister", "pot", "paper_roll"],
    "round": ["apple", "orange", "soccer_ball", "tennis_ball"],
    "dish": ["bowl", "plate", "dish", "lid"],
    "bracket": ["bracket", "shelf_bracket"],
}

GRASP_NEIGHBORS: dict[str, list[str]] = {
    "boxlike": ["bracket", "cylindrical"],
    "cylindrical": ["boxlike", "round"],
    "round": ["cylindrical"],
    "dish": ["cylindrical", "boxlike"],
    "bracket": ["boxlike"],
}

# Extra vocabulary used only by the inflated database.
EXTRA_WORDS: dict[str, list[str]] = {
    "boxlike": ["cereal_box", "juice_box", "shoe_box", "matchbox", "tile", "cassette", "wallet", "notebook",
                "soap_bar", "toy_block", "battery_pack", "hard_drive", "router", "tray_box", "gift_box"],
    "cylindrical": ["beer_can", "thermos", "vase", "flask", "candle", "tumbler", "glue_stick", "marker",
                    "spice_jar", "paint_can", "coffee_can", "pill_bottle", "shaker", "roller"],
    "round": ["melon", "peach", "plum", "lemon", "baseball", "golf_ball", "globe", "onion", "tomato",
              "grapefruit"],
    "dish": ["saucer", "pan", "basin", "frisbee", "platter", "coaster", "tray", "salad_bowl"],
    "bracket": ["angle_bracket", "corner_brace", "hinge", "clamp_jaw", "shelf_support"],
}

CATALOG: list[tuple[str, str, dict]] = [
    ("cracker_box", "cracker_box", {"primitive": "box", "size": [0.16, 0.06, 0.21]}),
    ("sugar_box", "sugar_box", {"primitive": "box", "size": [0.09, 0.04, 0.175]}),
    ("book", "book", {"primitive": "box", "size": [0.15, 0.22, 0.03]}),
    ("tissue_box", "tissue_box", {"primitive": "box", "size": [0.12, 0.12, 0.13]}),
    ("dice", "dice", {"primitive": "box", "size": [0.05, 0.05, 0.05]}),
    ("brick", "brick", {"primitive": "box", "size": [0.2, 0.09, 0.06]}),
    ("sponge", "sponge", {"primitive": "box", "size": [0.1, 0.07, 0.03]}),
    ("phone", "phone", {"primitive": "box", "size": [0.15, 0.075, 0.01]}),
    ("wooden_block", "wooden_block", {"primitive": "beveled_block", "size": [0.08, 0.06, 0.05], "bevel": 0.02}),
    ("eraser", "eraser", {"primitive": "beveled_block", "size": [0.06, 0.03, 0.02], "bevel": 0.006}),
    ("remote", "remote", {"primitive": "beveled_block", "size": [0.18, 0.05, 0.02], "bevel": 0.008}),
    ("soda_can", "soda_can", {"primitive": "cylinder", "radius": 0.033, "height": 0.122}),
    ("bottle", "bottle", {"primitive": "frustum", "r_bottom": 0.04, "r_top": 0.03, "height": 0.2}),
    ("mug", "mug", {"primitive": "cylinder", "radius": 0.04, "height": 0.095}),
    ("cup", "cup", {"primitive": "frustum", "r_bottom": 0.03, "r_top": 0.045, "height": 0.1}),
    ("jar", "jar", {"primitive": "cylinder", "radius": 0.05, "height": 0.08}),
    ("chips_can", "chips_can", {"primitive": "cylinder", "radius": 0.037, "height": 0.25}),
    ("canister", "canister", {"primitive": "frustum", "r_bottom": 0.06, "r_top": 0.05, "height": 0.15}),
    ("pot", "pot", {"primitive": "cylinder", "radius": 0.08, "height": 0.1}),
    ("paper_roll", "paper_roll", {"primitive": "cylinder", "radius": 0.055, "height": 0.11}),
    ("apple", "apple", {"primitive": "sphere", "radius": 0.036}),
    ("orange", "orange", {"primitive": "sphere", "radius": 0.041}),
    ("soccer_ball", "mini_soccer_ball", {"primitive": "sphere", "radius": 0.07}),
    ("tennis_ball", "tennis_ball", {"primitive": "sphere", "radius": 0.033}),
    ("bowl", "bowl", {"primitive": "bowl", "radius": 0.08, "depth": 0.055}),
    ("plate", "plate", {"primitive": "cylinder", "radius": 0.1, "height": 0.015}),
    ("dish", "dish", {"primitive": "bowl", "radius": 0.12, "depth": 0.03}),
    ("lid", "lid", {"primitive": "cylinder", "radius": 0.06, "height": 0.02}),
    ("bracket", "bracket", {"primitive": "l_bracket", "length": 0.08, "height": 0.06, "width": 0.04,
                            "thickness": 0.008}),
    ("shelf_bracket", "shelf_bracket", {"primitive": "l_bracket", "length": 0.12, "height": 0.1, "width": 0.03,
                                        "thickness": 0.01}),
]

SIMPLIFIED = {"mini_soccer_ball": "soccer_ball"}

SUITE_OBJECTS = ["sugar_box", "soda_can", "bowl", "bracket", "wooden_block"]


def family_of(word: str) -> str | None:
    for fam, words in FAMILIES.items():
        if word in words or word in EXTRA_WORDS.get(fam, []):
            return fam
    return None


def stub_table() -> dict[str, list[str]]:
    """Canned similarity answers keyed by simplified category."""
    members = {fam: words + EXTRA_WORDS.get(fam, []) for fam, words in FAMILIES.items()}
    table = {}
    for fam, words in members.items():
        answer = list(words)
        for other in GRASP_NEIGHBORS.get(fam, []):
            answer += members[other]
        for w in words:
            table[w] = answer
    return table


def synthetic_embeddings(dim: int = 16, seed: int = 7) -> dict[str, np.ndarray]:
    """Word vectors clustered by family, so cosine similarity follows families."""
    rng = np.random.default_rng(seed)
    out = {}
    for fam in sorted(FAMILIES):
        center = rng.normal(size=dim)
        center /= np.linalg.norm(center)
        for w in FAMILIES[fam] + EXTRA_WORDS.get(fam, []):
            v = 2.0 * center + rng.normal(size=dim)
            out[w] = np.round(v, 6)
    return out


def write_glove(vectors: dict[str, np.ndarray], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in sorted(vectors):
            fh.write(w + " " + " ".join(repr(float(x)) for x in vectors[w]) + "\n")


def catalog_entry(model_id: str) -> tuple[str, str, dict]:
    for entry in CATALOG:
        if entry[0] == model_id:
            return entry
    raise KeyError(model_id)


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class SuiteSpec:
    objects: tuple = tuple(SUITE_OBJECTS)
    views: int = 5
    occlusion: tuple[float, float] | None = None
    noise: tuple = ()
    seed: int = 2024
    withhold_category: bool = False


def suite_scenes(spec: SuiteSpec = SuiteSpec()) -> list[dict]:
    """Scene descriptors: every object seen from ``views`` viewpoints on a table."""
    rng = np.random.default_rng(spec.seed)
    scenes = []
    for obj in spec.objects:
        model_id, raw, mesh_spec = catalog_entry(obj)
        mesh = make_mesh(mesh_spec)
        for v in range(spec.views):
            yaw = rng.uniform(0, 2 * math.pi)
            pos = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0])
            pose = make_transform(axis_angle([0, 0, 1], yaw), pos)
            top = mesh.transformed(pose).bounds()[1][2]
            target = pos + [0, 0, top / 2]
            az = 360.0 * v / spec.views + rng.uniform(-15, 15)
            el = rng.uniform(35, 55)
            dist = rng.uniform(0.45, 0.6)
            cam = orbit_camera(target, dist, az, el)
            occluders = []
            if spec.occlusion is not None:
                frame = rasterize([(mesh.transformed(pose), OBJECT)], cam)
                frac = rng.uniform(*spec.occlusion)
                side = "left" if v % 2 == 0 else "right"
                occluders.append(side_occluder(frame, cam, frac, side, limits=spec.occlusion))
            scenes.append(scene_to_dict(mesh_spec, pose, cam, list(spec.noise), occluders,
                                        seed=int(rng.integers(0, 2 ** 31)), category=raw, model_id=model_id,
                                        withhold_category=spec.withhold_category))
    return scenes


# ------------------------------------------------------------- inflation

def inflated_catalog(total: int = 1000, seed: int = 11) -> list[tuple[str, str, dict]]:
    """The base catalog plus procedurally varied models up to ``total``."""
    rng = np.random.default_rng(seed)
    out = list(CATALOG)
    fams = sorted(FAMILIES)
    k = 0
    while len(out) < total:
        fam = fams[k % len(fams)]
        words = FAMILIES[fam] + EXTRA_WORDS[fam]
        word = words[int(rng.integers(len(words)))]
        spec = _random_shape(fam, rng)
        out.append((f"{word}_v{k:04d}", word, spec))
        k += 1
    return out


def _random_shape(family: str, rng: np.random.Generator) -> dict:
    u = lambda a, b: float(np.round(rng.uniform(a, b), 4))  # noqa: E731
    if family == "boxlike":
        if rng.random() < 0.3:
            return {"primitive": "beveled_block", "size": [u(0.04, 0.2), u(0.03, 0.1), u(0.02, 0.08)],
                    "bevel": u(0.004, 0.012)}
        return {"primitive": "box", "size": [u(0.02, 0.25), u(0.02, 0.15), u(0.01, 0.2)]}
    if family == "cylindrical":
        if rng.random() < 0.4:
            return {"primitive": "frustum", "r_bottom": u(0.02, 0.07), "r_top": u(0.02, 0.07),
                    "height": u(0.04, 0.25)}
        return {"primitive": "cylinder", "radius": u(0.015, 0.08), "height": u(0.03, 0.25)}
    if family == "round":
        return {"primitive": "sphere", "radius": u(0.015, 0.08)}
    if family == "dish":
        if rng.random() < 0.5:
            r = u(0.05, 0.14)
            return {"primitive": "bowl", "radius": r, "depth": float(np.round(r * rng.uniform(0.2, 0.8), 4))}
        return {"primitive": "cylinder", "radius": u(0.04, 0.13), "height": u(0.008, 0.03)}
    length, height = u(0.04, 0.15), u(0.03, 0.12)
    return {"primitive": "l_bracket", "length": length, "height": height, "width": u(0.02, 0.06),
            "thickness": u(0.005, 0.012)}


def inflated_categories(catalog) -> dict[str, str]:
    return {mid: raw for mid, raw, _ in catalog}


# ---------------------------------------------------------- bevel suite

# Chamfered blocks tall enough that a top-down grasp keeps its fingertips
# clear of the table after a fine-tuning shift.
BEVEL_BLOCKS = [
    {"primitive": "beveled_block", "size": [0.07, 0.06, 0.08], "bevel": 0.012},
    {"primitive": "beveled_block", "size": [0.08, 0.07, 0.075], "bevel": 0.014},
    {"primitive": "beveled_block", "size": [0.06, 0.08, 0.09], "bevel": 0.012},
    {"primitive": "beveled_block", "size": [0.09, 0.05, 0.08], "bevel": 0.016},
]


def default_camera(target, azimuth: float = 0.0, elevation: float = 40.0, distance: float = 0.45) -> VirtualCamera:
    return orbit_camera(target, distance, azimuth, elevation, fx=480.0, fy=480.0, cx=239.5, cy=179.5,
                        width=480, height=360)


def noise_settings(sigma: float = 0.002) -> dict[str, list[NoiseModel]]:
    """The three sensing conditions compared in the noise-robustness check."""
    return {
        "none": [],
        "smoothed": [NoiseModel("gaussian-depth", sigma=sigma), NoiseModel("smoothed", kernel=5)],
        "hole-filled": [NoiseModel("gaussian-depth", sigma=sigma), NoiseModel("smoothed", kernel=5),
                        NoiseModel("hole-filled", hole_rate=0.1, hole_size=3)],
    }
