"""Content-based rejection of tiles dominated by vegetation, desert or sea."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from geoweak.errors import InputError
from geoweak.geodata import ImageTile, crop_array_center

METRICS = ("vegetation", "desert", "sea")
THRESHOLD_FLOOR = 0.8
CALIBRATION_PERCENTILE = 95.0
FILTER_CROP_PX = (200, 200)


@dataclass(frozen=True)
class RegionMetrics:
    vegetation_ratio: float
    desert_ratio: float
    sea_ratio: float

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must be in [0, 1], got {v}")

    def as_dict(self) -> dict[str, float]:
        return {"vegetation": self.vegetation_ratio, "desert": self.desert_ratio, "sea": self.sea_ratio}


@dataclass(frozen=True)
class Thresholds:
    vegetation: float
    desert: float
    sea: float
    sample_size: int = 0

    def as_dict(self) -> dict[str, float]:
        return {"vegetation": self.vegetation, "desert": self.desert, "sea": self.sea}

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(asdict(self), sort_keys=False))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Thresholds":
        data = yaml.safe_load(Path(path).read_text())
        unknown = set(data) - {"vegetation", "desert", "sea", "sample_size"}
        if unknown:
            raise InputError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class HueBand:
    hue: tuple[float, float]  # degrees
    sat: tuple[float, float] = (0.0, 1.0)
    val: tuple[float, float] = (0.0, 1.0)


@dataclass(frozen=True)
class ColorRules:
    """HSV rules assigning each pixel to at most one land-cover class.

    Hue bands are disjoint, so a pixel can match at most one class.
    """

    vegetation: HueBand = field(default_factory=lambda: HueBand((70, 170), (0.25, 1.0), (0.15, 1.0)))
    sea: HueBand = field(default_factory=lambda: HueBand((180, 260), (0.25, 1.0)))
    desert: HueBand = field(default_factory=lambda: HueBand((20, 55), (0.15, 0.6), (0.5, 1.0)))

    def __post_init__(self):
        bands = sorted((self.vegetation.hue, self.sea.hue, self.desert.hue))
        for (_, hi), (lo, _) in zip(bands, bands[1:]):
            if lo <= hi:
                raise InputError("color-rule hue bands must be disjoint")

    @classmethod
    def from_dict(cls, d: dict) -> "ColorRules":
        bands = {}
        for name, spec in d.items():
            if name not in METRICS:
                raise InputError(f"unknown color rule {name!r}")
            bands[name] = HueBand(**{k: tuple(v) for k, v in spec.items()})
        return cls(**bands)


def center_crop(tile: ImageTile, size_px: tuple[int, int] = FILTER_CROP_PX) -> ImageTile:
    """Centered sub-raster of ``tile``; the crop remembers its offset in the parent."""
    h, w = size_px
    pixels, (r0, c0) = crop_array_center(tile.pixels, h, w)
    return ImageTile(
        pixels=pixels, mpp=tile.mpp, center=tile.center, source_id=tile.source_id,
        origin=(tile.origin[0] + r0, tile.origin[1] + c0), parent_size=tile.parent_size,
        meta=dict(tile.meta),
    )


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hue in degrees [0, 360), saturation and value in [0, 1]."""
    x = rgb.astype(np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(mx == r, ((g - b) / safe) % 6.0,
                   np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    hue = np.where(delta > 0, hue * 60.0, 0.0)
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return hue, sat, mx


def _in_band(hue, sat, val, band: HueBand) -> np.ndarray:
    return ((hue >= band.hue[0]) & (hue <= band.hue[1])
            & (sat >= band.sat[0]) & (sat <= band.sat[1])
            & (val >= band.val[0]) & (val <= band.val[1]))


def classify_pixels(rgb: np.ndarray, rules: ColorRules = ColorRules()) -> dict[str, np.ndarray]:
    hue, sat, val = rgb_to_hsv(rgb)
    return {name: _in_band(hue, sat, val, getattr(rules, name)) for name in METRICS}


def region_metrics(crop: ImageTile, rules: ColorRules = ColorRules()) -> RegionMetrics:
    px = crop.pixels
    if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
        raise InputError(f"expected an 8-bit RGB raster, got shape {px.shape} dtype {px.dtype}")
    masks = classify_pixels(px, rules)
    n = px.shape[0] * px.shape[1]
    return RegionMetrics(
        vegetation_ratio=float(masks["vegetation"].sum()) / n,
        desert_ratio=float(masks["desert"].sum()) / n,
        sea_ratio=float(masks["sea"].sum()) / n,
    )


def calibrate_thresholds(samples: Sequence[RegionMetrics], percentile: float = CALIBRATION_PERCENTILE,
                         floor: float = THRESHOLD_FLOOR) -> Thresholds:
    """Per metric: max(floor, percentile of the pooled sample), linear interpolation."""
    if not samples:
        raise InputError("threshold calibration needs at least one sample")
    arr = np.array([[s.vegetation_ratio, s.desert_ratio, s.sea_ratio] for s in samples], dtype=np.float64)
    p = np.percentile(arr, percentile, axis=0, method="linear")
    veg, des, sea = (max(floor, float(v)) for v in p)
    return Thresholds(vegetation=veg, desert=des, sea=sea, sample_size=len(samples))


def rejection_reasons(metrics: RegionMetrics, thresholds: Thresholds) -> list[str]:
    limits = thresholds.as_dict()
    return [name for name, v in metrics.as_dict().items() if v > limits[name]]


def filter_tiles(tiles: Iterable[tuple[ImageTile, RegionMetrics]], thresholds: Thresholds):
    """Split tiles into kept and rejected.

    Returns ``(kept, rejected)`` where ``kept`` is a list of (tile, metrics) and
    ``rejected`` a list of (tile, metrics, reasons). A metric equal to its
    threshold does not trigger rejection.
    """
    kept, rejected = [], []
    for tile, m in tiles:
        reasons = rejection_reasons(m, thresholds)
        if reasons:
            rejected.append((tile, m, reasons))
        else:
            kept.append((tile, m))
    return kept, rejected


def write_metrics_csv(rows: Iterable[tuple[str, RegionMetrics, list[str]]], path: str | os.PathLike) -> Path:
    """Rows of (tile_id, metrics, reasons); an empty reason list means kept."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tile_id", "vegetation", "desert", "sea", "kept", "reasons"])
        for tile_id, m, reasons in rows:
            w.writerow([tile_id, f"{m.vegetation_ratio:.6f}", f"{m.desert_ratio:.6f}", f"{m.sea_ratio:.6f}",
                        int(not reasons), ";".join(reasons)])
    return path


def read_metrics_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
