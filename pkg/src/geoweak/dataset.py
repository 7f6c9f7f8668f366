"""Detection datasets: assembly, splitting, regime subsets and label files."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from geoweak.autolabel import AutolabelOutcome, Status
from geoweak.boxes import BBox
from geoweak.errors import InputError

log = logging.getLogger(__name__)


class Provenance(str, Enum):
    auto = "auto"
    golden = "golden"


class Split(str, Enum):
    train = "train"
    val = "val"
    test = "test"
    unassigned = "unassigned"


@dataclass(frozen=True)
class LabeledImage:
    id: str
    image_path: str
    boxes: tuple[BBox, ...] = ()
    provenance: Provenance = Provenance.auto
    split: Split = Split.unassigned
    is_school: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "split", Split(self.split))
        if self.is_school is None:
            object.__setattr__(self, "is_school", bool(self.boxes))
        if not self.is_school and self.boxes:
            raise InputError(f"non-school image {self.id!r} cannot carry boxes")


@dataclass(frozen=True)
class RegimeSpec:
    total: int
    school: int
    non_school: int

    def __post_init__(self):
        if self.school + self.non_school != self.total:
            raise InputError(f"regime counts do not add up: {self.school} + {self.non_school} != {self.total}")
        if min(self.school, self.non_school) < 0:
            raise InputError("regime counts must be non-negative")


# golden training-set compositions per regime size
REGIMES: dict[int, RegimeSpec] = {
    50: RegimeSpec(50, 32, 18),
    100: RegimeSpec(100, 65, 35),
    300: RegimeSpec(300, 195, 105),
    443: RegimeSpec(443, 288, 155),
}


@dataclass(frozen=True)
class AugmentationSpec:
    rotate: bool = True
    flip: bool = True
    translate_max: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.translate_max <= 0.5:
            raise InputError(f"translate_max must be in [0, 0.5], got {self.translate_max}")


@dataclass(frozen=True)
class Dataset:
    images: tuple[LabeledImage, ...]
    summary: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def ids(self) -> list[str]:
        return [im.id for im in self.images]

    def by_split(self, split: Split | str) -> "Dataset":
        split = Split(split)
        return Dataset(tuple(im for im in self.images if im.split is split))

    def with_split(self, split: Split | str) -> "Dataset":
        return Dataset(tuple(replace(im, split=Split(split)) for im in self.images))

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.images + other.images)

    def digest(self) -> str:
        """Content hash of the dataset's records, for lineage."""
        h = hashlib.sha256()
        for rec in sorted(_record(im) for im in self.images):
            h.update(rec.encode())
        return h.hexdigest()


def _record(im: LabeledImage) -> str:
    boxes = [format_label_line(b) for b in im.boxes]
    return json.dumps([im.id, im.image_path, im.provenance.value, im.split.value, boxes])


def assemble_auto(outcomes: Iterable[AutolabelOutcome], negatives: Iterable[str],
                  image_paths: Optional[Mapping[str, str]] = None,
                  exclude: Iterable[str] = ()) -> Dataset:
    """Labeled school tiles plus box-free negatives, all with auto provenance.

    ``exclude`` holds ids reserved elsewhere (the golden set) and never enters
    the auto-labeled data.
    """
    paths = dict(image_paths or {})
    excluded = set(exclude)
    images, n_rejected, n_excluded = [], 0, 0
    for o in outcomes:
        if o.status is not Status.labeled:
            n_rejected += 1
            continue
        if o.tile_id in excluded:
            n_excluded += 1
            continue
        images.append(LabeledImage(o.tile_id, paths.get(o.tile_id, f"{o.tile_id}.png"), (o.bbox,),
                                   Provenance.auto, is_school=True))
    n_school = len(images)
    for nid in negatives:
        if nid in excluded:
            n_excluded += 1
            continue
        images.append(LabeledImage(nid, paths.get(nid, f"{nid}.png"), (), Provenance.auto, is_school=False))
    if n_school == 0:
        log.warning("no labeled school tiles; auto dataset holds negatives only")
    summary = {"school_labeled": n_school, "school_rejected": n_rejected, "non_school": len(images) - n_school,
               "excluded": n_excluded, "total": len(images)}
    return Dataset(tuple(images), summary)


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: Dataset, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Seeded shuffle then train/val/test partition by largest-remainder counts."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    ids = dataset.ids()
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise InputError(f"duplicate image id {dup!r}")
    order = sorted(dataset.images, key=lambda im: im.id)
    random.Random(seed).shuffle(order)
    n_train, n_val, _ = _split_counts(len(order), fractions)
    out = []
    for i, im in enumerate(order):
        s = Split.train if i < n_train else Split.val if i < n_train + n_val else Split.test
        out.append(replace(im, split=s))
    return Dataset(tuple(out), dict(dataset.summary))


def make_regime(pool: Dataset, spec: RegimeSpec, seed: int = 0) -> Dataset:
    """Stratified sample of ``spec.school`` school and ``spec.non_school``
    non-school images. For a fixed seed smaller regimes are prefixes of
    larger ones, so regimes nest."""
    schools = sorted((im for im in pool if im.is_school), key=lambda im: im.id)
    others = sorted((im for im in pool if not im.is_school), key=lambda im: im.id)
    deficits = []
    if len(schools) < spec.school:
        deficits.append(f"{spec.school - len(schools)} school")
    if len(others) < spec.non_school:
        deficits.append(f"{spec.non_school - len(others)} non-school")
    if deficits:
        raise InputError(f"pool too small for regime {spec.total}: short by {' and '.join(deficits)} images")
    rng = random.Random(seed)
    rng.shuffle(schools)
    rng.shuffle(others)
    picked = schools[: spec.school] + others[: spec.non_school]
    return Dataset(tuple(picked), {"regime": spec.total, "school": spec.school, "non_school": spec.non_school})


def split_overlap(*datasets: Dataset) -> set[str]:
    """Ids that appear under more than one split across all given datasets.

    Empty when train/val/test are strictly separated, including across auto
    and golden data.
    """
    where: dict[str, set[Split]] = {}
    for ds in datasets:
        for im in ds:
            where.setdefault(im.id, set()).add(im.split)
    return {i for i, s in where.items() if len(s) > 1}


# ---------------------------------------------------------------------------
# label files
# ---------------------------------------------------------------------------


def format_label_line(b: BBox) -> str:
    return f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"


def parse_label_line(line: str) -> BBox:
    parts = line.split()
    if len(parts) != 5:
        raise InputError(f"bad label line {line!r}")
    return BBox(float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]), int(parts[0]))


def write_labels(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    """One ``class cx cy w h`` text file per image plus a JSON-lines manifest."""
    out_dir = Path(out_dir)
    label_dir = out_dir / "labels"
    try:
        label_dir.mkdir(parents=True, exist_ok=True)
        manifest = out_dir / "manifest.jsonl"
        with open(manifest, "w") as mf:
            for im in dataset:
                label_path = label_dir / f"{im.id}.txt"
                label_path.write_text("".join(format_label_line(b) + "\n" for b in im.boxes))
                rec = {"id": im.id, "image_path": im.image_path, "label_path": str(label_path.relative_to(out_dir)),
                       "provenance": im.provenance.value, "split": im.split.value, "n_boxes": len(im.boxes),
                       "is_school": im.is_school}
                mf.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise OSError(f"writing labels under {out_dir}: {exc}") from exc
    return manifest


def read_labels(manifest: str | os.PathLike) -> Dataset:
    manifest = Path(manifest)
    images = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        label_path = manifest.parent / rec["label_path"]
        boxes = tuple(parse_label_line(ln) for ln in label_path.read_text().splitlines() if ln.strip())
        if len(boxes) != rec["n_boxes"]:
            raise InputError(f"{label_path}: manifest says {rec['n_boxes']} boxes, file has {len(boxes)}")
        images.append(LabeledImage(rec["id"], rec["image_path"], boxes, rec["provenance"], rec["split"],
                                   rec.get("is_school")))
    return Dataset(tuple(images))
