"""Synthetic scenes and corpora for offline runs and tests.

A scene is the JSON sidecar read by :class:`~geoweak.autolabel.SyntheticBackend`
(shapes per prompt, full-tile pixel coordinates) plus optional land-cover
patches. Rendering paints buildings in a roof color over a gray urban
background, so the color rules of the filter see only what the scene says.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from geoweak.autolabel import rasterize_shape
from geoweak.boxes import BBox
from geoweak.dataset import Dataset, LabeledImage, Provenance, Split, write_labels
from geoweak.geodata import EARTH_RADIUS_M, GeoPoint, PointLabel, encode_png, tile_name, write_points

TILE = (500, 500)
ROOF = (178, 92, 74)
COVER_COLORS = {"vegetation": (46, 132, 52), "sea": (32, 64, 150), "desert": (212, 182, 132)}


def bundled_scenes_dir() -> Path:
    return Path(str(resources.files("geoweak") / "data" / "scenes"))


def load_scene(path: str | os.PathLike) -> dict:
    return json.loads(Path(path).read_text())


def render_scene(scene: dict, seed: int = 0) -> np.ndarray:
    H, W = scene.get("tile_size", TILE)
    rng = np.random.default_rng(seed)
    base = rng.integers(110, 146, size=(H, W, 1))
    img = np.clip(base + rng.integers(-6, 7, size=(H, W, 3)), 0, 255).astype(np.uint8)
    for patch in scene.get("cover", []):
        img[rasterize_shape(patch, (H, W))] = COVER_COLORS[patch["kind"]]
    for shapes in scene.get("prompts", {}).values():
        for shape in shapes:
            img[rasterize_shape(shape, (H, W))] = ROOF
    return img


def _rect(r, c, h, w, score=0.9):
    return {"rect": [int(r), int(c), int(h), int(w)], "score": score}


def _centered_rect(rng: random.Random, jitter: int = 30) -> dict:
    h, w = rng.randint(40, 110), rng.randint(40, 110)
    r = 250 - h // 2 + rng.randint(-jitter, jitter)
    c = 250 - w // 2 + rng.randint(-jitter, jitter)
    return _rect(r, c, h, w, round(rng.uniform(0.5, 0.99), 3))


def random_school_scene(rng: random.Random, kind: str = "good") -> dict:
    """A scene of a given kind: good, wings, distractor, empty, far, tiny,
    lshape, or a land-cover kind (vegetation, sea, desert)."""
    prompts: dict[str, list] = {"building": [], "roof": [], "school": []}
    cover = []
    if kind == "good":
        s = _centered_rect(rng)
        for p in rng.sample(list(prompts), rng.randint(1, 3)):
            prompts[p].append(s)
    elif kind == "wings":
        h, w1, w2 = rng.randint(40, 80), rng.randint(30, 60), rng.randint(30, 60)
        r, c = 250 - h // 2, 250 - (w1 + w2) // 2
        prompts["building"].append(_rect(r, c, h, w1))
        prompts["roof"].append(_rect(r, c + w1, h, w2))
    elif kind == "distractor":
        prompts["building"].append(_centered_rect(rng, 15))
        prompts["school"].append(_rect(80, 360, 50, 50))
    elif kind == "far":
        prompts["building"].append(_rect(230, 400, 40, 40))
    elif kind == "tiny":
        prompts["roof"].append(_rect(248, 248, 6, 6))
    elif kind == "lshape":
        prompts["building"].append({"polygon": [[200, 200], [200, 220], [280, 220], [280, 300], [300, 300],
                                                [300, 200]], "score": 0.8})
    elif kind in COVER_COLORS:
        cover.append({"rect": [0, 0, 500, 500], "kind": kind})
        prompts["building"].append(_rect(245, 245, 10, 10))
    elif kind != "empty":
        raise ValueError(f"unknown scene kind {kind!r}")
    return {"tile_size": list(TILE), "prompts": prompts, "cover": cover, "kind": kind}


def scene_boxes(scene: dict) -> list[BBox]:
    """Ground-truth boxes of a golden scene: one per listed object."""
    H, W = scene.get("tile_size", TILE)
    out = []
    for obj in scene.get("objects", []):
        r, c, h, w = obj["rect"]
        out.append(BBox.from_corners(c / W, r / H, (c + w) / W, (r + h) / H, 0))
    return out


def _golden_scene(rng: random.Random, school: bool) -> dict:
    objects = []
    if school:
        n = rng.randint(1, 3)
        slots = [(60, 60), (60, 280), (280, 60), (280, 280), (170, 170)]
        for r, c in rng.sample(slots, n):
            objects.append({"rect": [r + rng.randint(0, 40), c + rng.randint(0, 40), rng.randint(40, 110),
                                     rng.randint(40, 110)]})
    return {"tile_size": list(TILE), "objects": objects,
            "prompts": {"building": [dict(o, score=1.0) for o in objects]}, "cover": []}


def offset_point(lat: float, lon: float, north_m: float, east_m: float) -> tuple[float, float]:
    dlat = math.degrees(north_m / EARTH_RADIUS_M)
    dlon = math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(lat))))
    return lat + dlat, lon + dlon


@dataclass
class DemoCorpus:
    root: Path
    points: Path
    tiles: Path
    scenes: Path
    golden_manifest: Path
    n_points: int
    n_unique: int


SCHOOL_MIX = (("good", 0.62), ("wings", 0.1), ("distractor", 0.1), ("empty", 0.04), ("far", 0.04),
              ("tiny", 0.03), ("lshape", 0.03), ("vegetation", 0.02), ("sea", 0.01), ("desert", 0.01))


def build_demo_corpus(root: str | os.PathLike, n_school: int = 120, n_negative: int = 30, n_near_dupes: int = 8,
                      golden: tuple[int, int, int, int, int, int] = (70, 40, 10, 5, 20, 10), seed: int = 0,
                      origin: tuple[float, float] = (38.90, -77.03), spacing_m: float = 400.0) -> DemoCorpus:
    """Write a fully offline corpus: points CSV, rendered tiles named by
    lat/lon, scene sidecars, and a golden dataset with fixed splits.

    ``golden`` is (train_school, train_non_school, val_school, val_non,
    test_school, test_non).
    """
    root = Path(root)
    rng = random.Random(seed)
    tiles, scenes = root / "tiles", root / "scenes"
    tiles.mkdir(parents=True, exist_ok=True)
    scenes.mkdir(parents=True, exist_ok=True)

    kinds = [k for k, _ in SCHOOL_MIX]
    weights = [w for _, w in SCHOOL_MIX]
    points: list[GeoPoint] = []
    cols = int(math.ceil(math.sqrt(n_school + n_negative)))
    for i in range(n_school + n_negative):
        lat, lon = offset_point(*origin, (i // cols) * spacing_m, (i % cols) * spacing_m)
        school = i < n_school
        pid = f"s{i:04d}" if school else f"n{i - n_school:04d}"
        points.append(GeoPoint(lat, lon, PointLabel.school if school else PointLabel.non_school,
                               "school" if school else rng.choice(["hospital", "supermarket", "parking"]), pid))
    # points that the spacing rule must drop: exact duplicates and 100 m neighbours
    extra = []
    for j in range(n_near_dupes):
        p = points[rng.randrange(len(points))]
        if j % 2:
            lat, lon = p.lat, p.lon
        else:
            lat, lon = offset_point(p.lat, p.lon, 100.0, 0.0)
        extra.append(GeoPoint(lat, lon, p.label, p.category, f"d{j:04d}"))
    write_points(points + extra, root / "points.csv")

    for p in points:
        if p.label is PointLabel.school:
            # guarantee at least one of each land-cover kind for the filter
            kind = {0: "vegetation", 1: "sea", 2: "desert"}.get(int(p.id[1:]), None) or rng.choices(kinds, weights)[0]
            scene = random_school_scene(rng, kind)
        else:
            scene = random_school_scene(rng, rng.choice(["good", "distractor", "empty"]))
            scene["kind"] = "negative"
        (scenes / f"{p.id}.json").write_text(json.dumps(scene))
        (tiles / tile_name(p.lat, p.lon)).write_bytes(encode_png(render_scene(scene, seed=rng.randrange(2**31))))

    golden_dir = root / "golden"
    (golden_dir / "images").mkdir(parents=True, exist_ok=True)
    images = []
    k = 0
    for split, n_s, n_n in ((Split.train, golden[0], golden[1]), (Split.val, golden[2], golden[3]),
                            (Split.test, golden[4], golden[5])):
        for school, n in ((True, n_s), (False, n_n)):
            for _ in range(n):
                scene = _golden_scene(rng, school)
                gid = f"g{k:04d}"
                k += 1
                img_path = golden_dir / "images" / f"{gid}.png"
                img_path.write_bytes(encode_png(render_scene(scene, seed=rng.randrange(2**31))))
                images.append(LabeledImage(gid, str(img_path), tuple(scene_boxes(scene)), Provenance.golden, split,
                                           is_school=school))
    manifest = write_labels(Dataset(tuple(images)), golden_dir)
    return DemoCorpus(root, root / "points.csv", tiles, scenes, manifest, len(points) + len(extra), len(points))


def golden_dataset(n_train: tuple[int, int], n_val: tuple[int, int], n_test: tuple[int, int], seed: int = 0,
                   max_boxes: int = 3, prefix: str = "g") -> Dataset:
    """In-memory golden dataset (no images) with random boxes."""
    rng = random.Random(seed)
    images, k = [], 0
    for split, (n_s, n_n) in ((Split.train, n_train), (Split.val, n_val), (Split.test, n_test)):
        for school, n in ((True, n_s), (False, n_n)):
            for _ in range(n):
                boxes = ()
                if school:
                    boxes = tuple(scene_boxes(_golden_scene(rng, True))[:max_boxes])
                images.append(LabeledImage(f"{prefix}{k:05d}", f"{prefix}{k:05d}.png", boxes, Provenance.golden,
                                           split, is_school=school))
                k += 1
    return Dataset(tuple(images))


def scene_expectation(scene: dict) -> Optional[dict]:
    return scene.get("expect")
