"""Point-guided box generation from prompt-conditioned segmentation masks.

A tile is cropped around its center, segmented with several text prompts,
and the candidate masks are reduced to one building-like region whose
enclosing box becomes the label.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
from PIL import Image, ImageDraw

from geoweak.boxes import BBox
from geoweak.errors import BackendUnavailable, DecodeError, InputError, NotFoundError
from geoweak.filtering import center_crop
from geoweak.geodata import ImageTile

log = logging.getLogger(__name__)

DEFAULT_PROMPTS = ("building", "roof", "school")


@dataclass(frozen=True)
class AutolabelConfig:
    crop_px: tuple[int, int] = (400, 400)
    prompts: tuple[str, ...] = DEFAULT_PROMPTS
    min_area_frac: float = 0.005
    max_area_frac: float = 0.60
    fuse_iou: float = 0.10
    solidity_min: float = 0.70
    aspect_max: float = 6.0
    center_max_px: float = 100.0

    def __post_init__(self):
        if not 0 <= self.min_area_frac < self.max_area_frac <= 1:
            raise InputError("need 0 <= min_area_frac < max_area_frac <= 1")
        if not 0 <= self.fuse_iou <= 1:
            raise InputError("fuse_iou must be in [0, 1]")
        if not 0 < self.solidity_min <= 1:
            raise InputError("solidity_min must be in (0, 1]")
        if self.aspect_max < 1 or self.center_max_px < 0:
            raise InputError("aspect_max must be >= 1 and center_max_px >= 0")
        if not self.prompts:
            raise InputError("at least one prompt is required")


class Mask:
    """Boolean region in crop coordinates plus the prompt that produced it."""

    def __init__(self, bitmap: np.ndarray, prompt: str = "", score: float = 1.0):
        bitmap = np.asarray(bitmap, dtype=bool)
        if bitmap.ndim != 2 or not bitmap.any():
            raise InputError("a mask needs a 2-D bitmap with at least one true pixel")
        self.bitmap = bitmap
        self.prompt = prompt
        self.score = float(score)

    @cached_property
    def area_px(self) -> int:
        return int(self.bitmap.sum())

    @cached_property
    def centroid(self) -> tuple[float, float]:
        rows, cols = np.nonzero(self.bitmap)
        return float(rows.mean()), float(cols.mean())

    @cached_property
    def extent(self) -> tuple[int, int, int, int]:
        """Inclusive (row_min, col_min, row_max, col_max) of true pixels."""
        rows = np.flatnonzero(self.bitmap.any(axis=1))
        cols = np.flatnonzero(self.bitmap.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.bitmap, other.bitmap)

    def __hash__(self):
        return hash((self.bitmap.shape, self.bitmap.tobytes()))

    def __repr__(self):
        return f"Mask(prompt={self.prompt!r}, area={self.area_px}, centroid={self.centroid})"


class Status(str, Enum):
    labeled = "labeled"
    rejected = "rejected"


class Reason(str, Enum):
    no_valid_mask = "no_valid_mask"
    centroid_too_far = "centroid_too_far"
    size_out_of_range = "size_out_of_range"
    solidity_fail = "solidity_fail"


@dataclass
class AutolabelOutcome:
    tile_id: str
    status: Status
    bbox: Optional[BBox] = None
    reason: Optional[Reason] = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.status is Status.labeled) != (self.bbox is not None):
            raise InputError("labeled outcomes carry a bbox, rejected ones do not")
        if (self.status is Status.rejected) != (self.reason is not None):
            raise InputError("rejected outcomes carry exactly one reason")

    @classmethod
    def labeled(cls, tile_id: str, bbox: BBox, **notes) -> "AutolabelOutcome":
        return cls(tile_id, Status.labeled, bbox=bbox, notes=notes)

    @classmethod
    def rejected(cls, tile_id: str, reason: Reason, **notes) -> "AutolabelOutcome":
        return cls(tile_id, Status.rejected, reason=reason, notes=notes)


# ---------------------------------------------------------------------------
# segmentation backends
# ---------------------------------------------------------------------------


class SegmentationBackend(Protocol):
    max_parallel: Optional[int]

    def predict(self, crop: ImageTile, prompt: str) -> list[Mask]: ...


def rasterize_shape(shape: dict, size: tuple[int, int]) -> np.ndarray:
    """Boolean raster of a scene shape in (row, col) pixel coordinates.

    ``{"rect": [row, col, h, w]}`` or ``{"polygon": [[row, col], ...]}``.
    """
    H, W = size
    out = np.zeros((H, W), dtype=bool)
    if "rect" in shape:
        r, c, h, w = (int(v) for v in shape["rect"])
        out[max(r, 0):max(r + h, 0), max(c, 0):max(c + w, 0)] = True
    elif "polygon" in shape:
        im = Image.new("1", (W, H), 0)
        ImageDraw.Draw(im).polygon([(float(c), float(r)) for r, c in shape["polygon"]], fill=1, outline=1)
        out = np.array(im, dtype=bool)
    else:
        raise DecodeError(f"unknown scene shape {sorted(shape)}")
    return out


class SyntheticBackend:
    """Deterministic backend answering from a JSON scene sidecar per tile.

    Sidecars live at ``<scenes_dir>/<source_id>.json`` and list shapes per
    prompt in full-tile pixel coordinates::

        {"tile_size": [500, 500],
         "prompts": {"building": [{"rect": [200, 210, 60, 90], "score": 0.9}]}}
    """

    max_parallel = None

    def __init__(self, scenes_dir: str | os.PathLike):
        self.scenes_dir = Path(scenes_dir)

    def scene(self, source_id: str) -> dict:
        path = self.scenes_dir / f"{source_id}.json"
        if not path.exists():
            raise NotFoundError(f"no scene sidecar for tile {source_id!r} at {path}")
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DecodeError(f"{path}: {exc}") from exc

    def predict(self, crop: ImageTile, prompt: str) -> list[Mask]:
        scene = self.scene(crop.source_id)
        H, W = scene.get("tile_size", crop.parent_size)
        r0, c0 = crop.origin
        h, w = crop.size_px
        masks = []
        for shape in scene.get("prompts", {}).get(prompt, []):
            full = rasterize_shape(shape, (H, W))
            window = full[r0:r0 + h, c0:c0 + w]
            if window.any():
                masks.append(Mask(window.copy(), prompt, shape.get("score", 1.0)))
        return masks


class LangSAMBackend:
    """Adapter for the ``lang_sam`` package (text-prompted SAM)."""

    def __init__(self, model=None, box_threshold: float = 0.3, text_threshold: float = 0.25,
                 max_parallel: int = 1):
        self._model = model
        self.box_threshold = box_threshold
        self.text_threshold = text_threshold
        self.max_parallel = max_parallel

    def _load(self):
        if self._model is None:
            try:
                from lang_sam import LangSAM  # type: ignore
            except ImportError as exc:
                raise BackendUnavailable("lang_sam is not installed; use the synthetic backend") from exc
            self._model = LangSAM()
        return self._model

    def predict(self, crop: ImageTile, prompt: str) -> list[Mask]:
        model = self._load()
        image = Image.fromarray(crop.pixels)
        try:
            results = model.predict([image], [prompt], box_threshold=self.box_threshold,
                                    text_threshold=self.text_threshold)
        except Exception as exc:  # model runtime failures are opaque
            raise BackendUnavailable(f"segmentation backend failed: {exc}") from exc
        res = results[0] if isinstance(results, list) else results
        masks = res.get("masks", []) if isinstance(res, dict) else []
        scores = res.get("mask_scores", res.get("scores", [])) if isinstance(res, dict) else []
        out = []
        for i, m in enumerate(masks):
            m = np.asarray(m).astype(bool)
            if m.any():
                s = float(np.ravel(scores)[i]) if len(np.ravel(scores)) > i else 1.0
                out.append(Mask(m, prompt, min(max(s, 0.0), 1.0)))
        return out


def segment(crop: ImageTile, prompts: Sequence[str], backend: SegmentationBackend) -> list[Mask]:
    """All masks for all prompts, in prompt order; no deduplication."""
    out: list[Mask] = []
    for p in prompts:
        out.extend(backend.predict(crop, p))
    return out


# ---------------------------------------------------------------------------
# mask reduction
# ---------------------------------------------------------------------------


def filter_masks_by_size(masks: Iterable[Mask], crop_area: float, min_frac: float = 0.005,
                         max_frac: float = 0.60) -> list[Mask]:
    if crop_area <= 0:
        raise InputError(f"crop_area must be positive, got {crop_area}")
    return [m for m in masks if min_frac <= m.area_px / crop_area <= max_frac]


def select_two_closest(masks: Sequence[Mask], center: tuple[float, float]) -> list[Mask]:
    """Up to two masks nearest ``center`` by centroid distance.

    Ties go to the larger mask, then to the earlier one (prompt order).
    """
    def key(m: Mask):
        return (math.hypot(m.centroid[0] - center[0], m.centroid[1] - center[1]), -m.area_px)

    return sorted(masks, key=key)[:2]


def mask_iou(a: Mask, b: Mask) -> float:
    inter = np.logical_and(a.bitmap, b.bitmap).sum()
    union = np.logical_or(a.bitmap, b.bitmap).sum()
    return float(inter) / float(union)


def extents_touch(a: Mask, b: Mask) -> bool:
    """True if the tight boxes overlap or share an edge."""
    ar0, ac0, ar1, ac1 = a.extent
    br0, bc0, br1, bc1 = b.extent
    return ar0 <= br1 + 1 and br0 <= ar1 + 1 and ac0 <= bc1 + 1 and bc0 <= ac1 + 1


def maybe_fuse(m1: Mask, m2: Mask, fuse_iou: float = 0.10) -> list[Mask]:
    """Union the two masks if they overlap enough or their boxes touch."""
    if m1 == m2:
        return [m1]
    if mask_iou(m1, m2) > fuse_iou or extents_touch(m1, m2):
        prompt = m1.prompt if m1.prompt == m2.prompt else "+".join(sorted({m1.prompt, m2.prompt}))
        return [Mask(m1.bitmap | m2.bitmap, prompt, max(m1.score, m2.score))]
    return [m1, m2]


def boundary_pixels(bitmap: np.ndarray) -> np.ndarray:
    """(row, col) of true pixels with at least one false 4-neighbour."""
    padded = np.pad(bitmap, 1)
    interior = (padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(bitmap & ~interior)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise, without repeated endpoint."""
    pts = sorted(set(map(tuple, np.asarray(points).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def pixel_corners(pixels: np.ndarray) -> np.ndarray:
    """The four corner points of each unit pixel square."""
    offs = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    return (pixels[:, None, :] + offs[None, :, :]).reshape(-1, 2)


def solidity(mask: Mask) -> float:
    """Pixel area over the area of the hull of the pixel squares."""
    hull_area = polygon_area(convex_hull(pixel_corners(boundary_pixels(mask.bitmap))))
    if hull_area <= 0:
        return 1.0 if mask.area_px <= 2 else 0.0
    return mask.area_px / hull_area


def aspect_ratio(mask: Mask) -> float:
    r0, c0, r1, c1 = mask.extent
    h, w = r1 - r0 + 1, c1 - c0 + 1
    return max(h, w) / min(h, w)


def validate_mask(mask: Mask, solidity_min: float = 0.70, aspect_max: float = 6.0) -> bool:
    return solidity(mask) >= solidity_min and aspect_ratio(mask) <= aspect_max


def mask_to_bbox(mask: Mask, crop_size: tuple[int, int], tile_size: tuple[int, int], class_id: int = 0) -> BBox:
    """Tight box around the mask, moved from centered-crop into tile coordinates
    and normalized by the tile size."""
    h, w = crop_size
    H, W = tile_size
    if h > H or w > W:
        raise InputError(f"crop {crop_size} larger than tile {tile_size}")
    off_r, off_c = (H - h) // 2, (W - w) // 2
    r0, c0, r1, c1 = mask.extent
    box = BBox.from_corners((c0 + off_c) / W, (r0 + off_r) / H, (c1 + 1 + off_c) / W, (r1 + 1 + off_r) / H, class_id)
    return box.clamped()


def autolabel_tile(tile: ImageTile, backend: SegmentationBackend,
                   config: AutolabelConfig = AutolabelConfig()) -> AutolabelOutcome:
    """Label one school tile, or say why it cannot be labeled."""
    tid = tile.source_id
    crop = center_crop(tile, config.crop_px)
    h, w = crop.size_px
    center = ((h - 1) / 2, (w - 1) / 2)

    masks = segment(crop, config.prompts, backend)
    if not masks:
        return AutolabelOutcome.rejected(tid, Reason.no_valid_mask, n_masks=0)
    sized = filter_masks_by_size(masks, h * w, config.min_area_frac, config.max_area_frac)
    if not sized:
        return AutolabelOutcome.rejected(tid, Reason.size_out_of_range, n_masks=len(masks))

    closest = select_two_closest(sized, center)
    candidates = maybe_fuse(*closest, fuse_iou=config.fuse_iou) if len(closest) == 2 else closest
    notes = {"n_masks": len(masks), "n_sized": len(sized), "fused": len(closest) == 2 and len(candidates) == 1,
             "dropped_farther_mask": len(candidates) == 2}
    final = candidates[0]

    if not validate_mask(final, config.solidity_min, config.aspect_max):
        return AutolabelOutcome.rejected(tid, Reason.solidity_fail, solidity=solidity(final),
                                         aspect=aspect_ratio(final), **notes)
    dist = math.hypot(final.centroid[0] - center[0], final.centroid[1] - center[1])
    if dist > config.center_max_px:
        return AutolabelOutcome.rejected(tid, Reason.centroid_too_far, center_dist_px=dist, **notes)
    bbox = mask_to_bbox(final, crop.size_px, tile.size_px)
    return AutolabelOutcome.labeled(tid, bbox, center_dist_px=dist, solidity=solidity(final), **notes)


OUTCOME_FIELDS = ("tile_id", "status", "reason", "cx", "cy", "w", "h")


def write_outcomes(outcomes: Iterable[AutolabelOutcome], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(OUTCOME_FIELDS)
        for o in outcomes:
            b = o.bbox
            coords = [f"{v:.6f}" for v in (b.cx, b.cy, b.w, b.h)] if b else ["", "", "", ""]
            wr.writerow([o.tile_id, o.status.value, o.reason.value if o.reason else "", *coords])
    return path


def read_outcomes(path: str | os.PathLike) -> list[AutolabelOutcome]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            if row["status"] == Status.labeled.value:
                box = BBox(*(float(row[k]) for k in ("cx", "cy", "w", "h")))
                out.append(AutolabelOutcome.labeled(row["tile_id"], box))
            else:
                out.append(AutolabelOutcome.rejected(row["tile_id"], Reason(row["reason"])))
    return out
