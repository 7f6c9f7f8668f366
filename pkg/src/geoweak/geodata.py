"""Point ingestion, spatial thinning and imagery access.

Points are WGS84 lat/lon. Distances use a spherical earth, which is plenty at
the few-hundred-metre scale the spacing rule works on.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Protocol, Sequence

import httpx
import numpy as np
from PIL import Image, UnidentifiedImageError

from geoweak.errors import DecodeError, GeoweakError, InputError, NotFoundError, RetryableError

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_TILE_PX = (500, 500)
DEFAULT_MPP = 0.6
IMAGERY_KEY_ENV = "GEOWEAK_IMAGERY_KEY"
OVERPASS_URL = "https://overpass-api.de/api/interpreter"


class PointLabel(str, Enum):
    school = "school"
    non_school = "non_school"


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    label: PointLabel = PointLabel.school
    category: str = ""
    id: str = ""

    def __post_init__(self):
        if not (isinstance(self.lat, (int, float)) and isinstance(self.lon, (int, float))):
            raise InputError(f"non-numeric coordinate ({self.lat!r}, {self.lon!r})")
        if not (-90.0 <= self.lat <= 90.0) or math.isnan(self.lat):
            raise InputError(f"latitude out of range: {self.lat}")
        if not (-180.0 <= self.lon <= 180.0) or math.isnan(self.lon):
            raise InputError(f"longitude out of range: {self.lon}")
        object.__setattr__(self, "label", PointLabel(self.label))


@dataclass
class ImageTile:
    """An RGB raster crop.

    ``origin`` is the (row, col) of this raster's top-left pixel inside the
    tile it was cropped from; (0, 0) for a freshly fetched tile.
    """

    pixels: np.ndarray
    mpp: float
    center: GeoPoint
    source_id: str = ""
    origin: tuple[int, int] = (0, 0)
    parent_size: Optional[tuple[int, int]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim < 2 or self.pixels.shape[0] <= 0 or self.pixels.shape[1] <= 0:
            raise InputError(f"tile must be a non-empty raster, got shape {self.pixels.shape}")
        if not self.mpp > 0:
            raise InputError(f"mpp must be positive, got {self.mpp}")
        if self.parent_size is None:
            self.parent_size = self.size_px

    @property
    def size_px(self) -> tuple[int, int]:
        return int(self.pixels.shape[0]), int(self.pixels.shape[1])


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in metres between two points."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def dedupe_and_space(points: Iterable[GeoPoint], min_sep: float) -> list[GeoPoint]:
    """Drop exact duplicates and thin points so all survivors are >= min_sep apart.

    Greedy in input order: a point is kept iff it is far enough from every
    point kept before it.
    """
    if min_sep < 0:
        raise InputError(f"min_sep must be >= 0, got {min_sep}")
    seen: set[tuple[float, float]] = set()
    kept: list[GeoPoint] = []
    # latitude bands no narrower than min_sep, so conflicts live in adjacent bands
    band_deg = math.degrees(min_sep / EARTH_RADIUS_M) if min_sep > 0 else None
    bands: dict[int, list[GeoPoint]] = {}
    for p in points:
        key = (p.lat, p.lon)
        if key in seen:
            continue
        seen.add(key)
        if band_deg is None:
            kept.append(p)
            continue
        b = int(math.floor((p.lat + 90.0) / band_deg))
        near = (q for k in (b - 1, b, b + 1) for q in bands.get(k, ()))
        if any(haversine_m(p, q) < min_sep for q in near):
            continue
        kept.append(p)
        bands.setdefault(b, []).append(p)
    return kept


# ---------------------------------------------------------------------------
# point files
# ---------------------------------------------------------------------------

POINT_FIELDS = ("id", "lat", "lon", "label", "category")


def read_points(path: str | os.PathLike) -> list[GeoPoint]:
    """Load points from a CSV (id,lat,lon,label,category) or a GeoJSON
    FeatureCollection of Point features."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".geojson", ".json"):
        points = _points_from_geojson(json.loads(text))
    else:
        reader = csv.DictReader(io.StringIO(text))
        missing = set(POINT_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: missing CSV columns {sorted(missing)}")
        points = [
            GeoPoint(float(r["lat"]), float(r["lon"]), r["label"] or "school", r["category"] or "", r["id"])
            for r in reader
        ]
    _check_unique_ids(points)
    return points


def _points_from_geojson(doc: dict) -> list[GeoPoint]:
    if doc.get("type") != "FeatureCollection":
        raise InputError("GeoJSON input must be a FeatureCollection")
    out = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            raise InputError(f"feature {i}: only Point geometries are supported")
        lon, lat = geom["coordinates"][:2]
        props = feat.get("properties") or {}
        pid = str(props.get("id", feat.get("id", i)))
        out.append(GeoPoint(float(lat), float(lon), props.get("label", "school"), props.get("category", ""), pid))
    return out


def _check_unique_ids(points: Sequence[GeoPoint]) -> None:
    ids = [p.id for p in points]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise InputError(f"duplicate point id {dup!r}")


def write_points(points: Iterable[GeoPoint], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(POINT_FIELDS)
        for p in points:
            w.writerow([p.id, repr(p.lat), repr(p.lon), p.label.value, p.category])
    return path


def _atomic_write(path: Path, data: bytes) -> None:
    # concurrent writers of the same key: last os.replace wins, readers never see partial files
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _get_with_retry(client: httpx.Client, method: str, url: str, retries: int, backoff_s: float,
                    **kwargs) -> httpx.Response:
    last: Exception | None = None
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff_s * 2 ** (attempt - 1))
        try:
            resp = client.request(method, url, **kwargs)
        except httpx.TransportError as exc:
            last = exc
            log.warning("request to %s failed (%s), attempt %d/%d", url, exc, attempt + 1, retries + 1)
            continue
        if resp.status_code == 429 or resp.status_code >= 500:
            last = GeoweakError(f"HTTP {resp.status_code}")
            log.warning("request to %s returned %d, attempt %d/%d", url, resp.status_code, attempt + 1, retries + 1)
            continue
        return resp
    raise RetryableError(f"{method} {url} failed after {retries + 1} attempts: {last}")


# ---------------------------------------------------------------------------
# negative points from an Overpass-style endpoint
# ---------------------------------------------------------------------------


class Region(NamedTuple):
    """Lat/lon box in Overpass order."""

    south: float
    west: float
    north: float
    east: float

    def contains(self, lat: float, lon: float) -> bool:
        return self.south <= lat <= self.north and self.west <= lon <= self.east


# shorthand category -> OSM tag filter; anything else is passed as amenity=<name>
CATEGORY_TAGS = {
    "hospital": '["amenity"="hospital"]',
    "clinic": '["amenity"="clinic"]',
    "supermarket": '["shop"="supermarket"]',
    "mall": '["shop"="mall"]',
    "parking": '["amenity"="parking"]',
    "parking_lot": '["amenity"="parking"]',
    "townhall": '["amenity"="townhall"]',
    "police": '["amenity"="police"]',
    "fire_station": '["amenity"="fire_station"]',
    "place_of_worship": '["amenity"="place_of_worship"]',
    "commercial": '["building"="commercial"]',
    "retail": '["building"="retail"]',
    "office": '["building"="office"]',
}


def _tag_filter(category: str) -> str:
    if category in CATEGORY_TAGS:
        return CATEGORY_TAGS[category]
    if "=" in category:
        k, v = category.split("=", 1)
        return f'["{k}"="{v}"]'
    return f'["amenity"="{category}"]'


def build_overpass_query(region: Region, categories: Sequence[str], timeout_s: int = 120) -> str:
    bbox = f"{region.south},{region.west},{region.north},{region.east}"
    parts = []
    for cat in categories:
        tf = _tag_filter(cat)
        parts.extend(f"{kind}{tf}({bbox});" for kind in ("node", "way", "relation"))
    return f"[out:json][timeout:{timeout_s}];(" + "".join(parts) + ");out center;"


def _validate_region(region: Region) -> Region:
    region = Region(*map(float, region))
    if not (region.south < region.north and region.west < region.east):
        raise InputError(f"degenerate region {tuple(region)}")
    if not (-90 <= region.south and region.north <= 90 and -180 <= region.west and region.east <= 180):
        raise InputError(f"region outside WGS84 bounds {tuple(region)}")
    return region


class OverpassClient:
    """Query client for an Overpass-compatible endpoint with an on-disk
    response cache keyed by (region, categories)."""

    def __init__(self, cache_dir: str | os.PathLike, endpoint: str = OVERPASS_URL,
                 client: Optional[httpx.Client] = None, retries: int = 3, backoff_s: float = 1.0,
                 offline: bool = False):
        self.cache_dir = Path(cache_dir)
        self.endpoint = endpoint
        self._client = client
        self.retries = retries
        self.backoff_s = backoff_s
        self.offline = offline

    def cache_path(self, region: Region, categories: Sequence[str]) -> Path:
        key = json.dumps({"region": list(region), "categories": sorted(categories)}, sort_keys=True)
        return self.cache_dir / f"overpass_{hashlib.sha256(key.encode()).hexdigest()[:16]}.json"

    def raw(self, region: Region, categories: Sequence[str]) -> dict:
        path = self.cache_path(region, categories)
        if path.exists():
            log.debug("overpass cache hit %s", path)
            return _decode_overpass(path.read_bytes())
        if self.offline:
            raise NotFoundError(f"no cached Overpass response at {path} and offline mode is on")
        query = build_overpass_query(region, categories)
        client = self._client or httpx.Client(timeout=180)
        try:
            resp = _get_with_retry(client, "POST", self.endpoint, self.retries, self.backoff_s,
                                   data={"data": query})
        finally:
            if self._client is None:
                client.close()
        if resp.status_code != 200:
            raise GeoweakError(f"Overpass returned HTTP {resp.status_code}: {resp.text[:200]}")
        doc = _decode_overpass(resp.content)
        _atomic_write(path, resp.content)
        return doc

    def fetch(self, region: Region, categories: Sequence[str]) -> list[GeoPoint]:
        region = _validate_region(region)
        if not categories:
            raise InputError("at least one category is required")
        doc = self.raw(region, categories)
        return points_from_overpass(doc, region)


def _decode_overpass(payload: bytes) -> dict:
    try:
        return json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DecodeError(f"invalid Overpass payload: {exc}") from exc


def points_from_overpass(doc: dict, region: Region) -> list[GeoPoint]:
    out = []
    seen = set()
    for el in doc.get("elements", []):
        if "lat" in el:
            lat, lon = el["lat"], el["lon"]
        elif "center" in el:
            lat, lon = el["center"]["lat"], el["center"]["lon"]
        else:
            continue
        if not region.contains(lat, lon):
            continue
        pid = f"osm-{el.get('type', 'node')}-{el.get('id', len(out))}"
        if pid in seen:
            continue
        seen.add(pid)
        tags = el.get("tags", {})
        category = tags.get("amenity") or tags.get("shop") or tags.get("building") or ""
        out.append(GeoPoint(float(lat), float(lon), PointLabel.non_school, category, pid))
    return out


def fetch_negative_points(region: Region, categories: Sequence[str], client: OverpassClient) -> list[GeoPoint]:
    """Non-school points of the given categories inside ``region``."""
    return client.fetch(region, categories)


# ---------------------------------------------------------------------------
# imagery
# ---------------------------------------------------------------------------


def crop_array_center(arr: np.ndarray, h: int, w: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Centered h x w window; odd remainders put the extra row/col at the bottom/right."""
    H, W = arr.shape[:2]
    if h <= 0 or w <= 0 or h > H or w > W:
        raise InputError(f"cannot crop {h}x{w} from {H}x{W}")
    r0, c0 = (H - h) // 2, (W - w) // 2
    return arr[r0:r0 + h, c0:c0 + w], (r0, c0)


def _decode_raster(payload: bytes, where: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(payload)) as im:
            im.load()
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"{where}: cannot decode raster: {exc}") from exc


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def _fit(pixels: np.ndarray, size_px: tuple[int, int], where: str) -> np.ndarray:
    h, w = size_px
    if pixels.shape[:2] == (h, w):
        return pixels
    if pixels.shape[0] < h or pixels.shape[1] < w:
        raise DecodeError(f"{where}: raster {pixels.shape[:2]} smaller than requested {size_px}")
    return crop_array_center(pixels, h, w)[0].copy()


class TileAdapter(Protocol):
    def fetch(self, center: GeoPoint, size_px: tuple[int, int], mpp: float) -> ImageTile: ...


def tile_name(lat: float, lon: float) -> str:
    return f"{lat:.5f}_{lon:.5f}.png"


class LocalTileAdapter:
    """Reads tiles from a directory of PNGs named by rounded lat/lon."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path_for(self, center: GeoPoint) -> Path:
        return self.root / tile_name(center.lat, center.lon)

    def store(self, center: GeoPoint, pixels: np.ndarray) -> Path:
        path = self.path_for(center)
        _atomic_write(path, encode_png(pixels))
        return path

    def fetch(self, center: GeoPoint, size_px: tuple[int, int], mpp: float) -> ImageTile:
        path = self.path_for(center)
        if not path.exists():
            raise NotFoundError(f"no tile for ({center.lat}, {center.lon}) at {path}")
        pixels = _fit(_decode_raster(path.read_bytes(), str(path)), size_px, str(path))
        return ImageTile(pixels, mpp, center, source_id=center.id or path.stem)


class RemoteTileAdapter:
    """HTTP tile client.

    ``url_template`` is formatted with lat, lon, width, height, mpp, key and
    the tile's bounding box (south, west, north, east) derived from the
    center, pixel size and resolution.
    """

    def __init__(self, url_template: str, client: Optional[httpx.Client] = None,
                 key_env: str = IMAGERY_KEY_ENV, retries: int = 3, backoff_s: float = 1.0,
                 min_interval_s: float = 0.0):
        self.url_template = url_template
        self._client = client or httpx.Client(timeout=60)
        self.key_env = key_env
        self.retries = retries
        self.backoff_s = backoff_s
        self.min_interval_s = min_interval_s
        self._lock = threading.Lock()
        self._last = 0.0

    def url_for(self, center: GeoPoint, size_px: tuple[int, int], mpp: float) -> str:
        h, w = size_px
        half_ns = math.degrees(h * mpp / 2 / EARTH_RADIUS_M)
        half_ew = math.degrees(w * mpp / 2 / (EARTH_RADIUS_M * max(1e-9, math.cos(math.radians(center.lat)))))
        return self.url_template.format(
            lat=center.lat, lon=center.lon, width=w, height=h, mpp=mpp,
            key=os.environ.get(self.key_env, ""),
            south=center.lat - half_ns, north=center.lat + half_ns,
            west=center.lon - half_ew, east=center.lon + half_ew,
        )

    def _throttle(self) -> None:
        if self.min_interval_s <= 0:
            return
        with self._lock:
            wait = self._last + self.min_interval_s - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()

    def fetch(self, center: GeoPoint, size_px: tuple[int, int], mpp: float) -> ImageTile:
        url = self.url_for(center, size_px, mpp)
        self._throttle()
        resp = _get_with_retry(self._client, "GET", url, self.retries, self.backoff_s)
        if resp.status_code == 404:
            raise NotFoundError(f"tile not found: {url}")
        if resp.status_code != 200:
            raise GeoweakError(f"tile request failed with HTTP {resp.status_code}: {url}")
        pixels = _fit(_decode_raster(resp.content, url), size_px, url)
        return ImageTile(pixels, mpp, center, source_id=center.id or url)


def fetch_tile(center: GeoPoint, adapter: TileAdapter, size_px: tuple[int, int] = DEFAULT_TILE_PX,
               mpp: float = DEFAULT_MPP) -> ImageTile:
    """Fetch an RGB tile centred on ``center``."""
    if not (mpp > 0):
        raise InputError(f"mpp must be positive, got {mpp}")
    if len(size_px) != 2 or min(size_px) <= 0:
        raise InputError(f"size_px must be two positive ints, got {size_px}")
    return adapter.fetch(center, (int(size_px[0]), int(size_px[1])), float(mpp))


def fetch_tiles(centers: Sequence[GeoPoint], adapter: TileAdapter, size_px: tuple[int, int] = DEFAULT_TILE_PX,
                mpp: float = DEFAULT_MPP, max_workers: int = 4) -> list[ImageTile | Exception]:
    """Fetch many tiles concurrently. Failures are returned in place, not raised."""

    def one(p):
        try:
            return fetch_tile(p, adapter, size_px, mpp)
        except GeoweakError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        return list(pool.map(one, centers))
