"""Stage runner behind the CLI.

Each stage writes into ``<run_dir>/<stage>/`` and finishes by writing a
``stage.json`` holding a hash of the config sections and upstream stages it
depends on. Re-running a stage whose hash matches is a no-op; a mismatch is
an error, since run directories are append-only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import random
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Optional

from geoweak.autolabel import LangSAMBackend, SyntheticBackend, autolabel_tile, read_outcomes, write_outcomes
from geoweak.config import RunConfig
from geoweak.dataset import (
    AugmentationSpec,
    Dataset,
    RegimeSpec,
    Split,
    assemble_auto,
    make_regime,
    read_labels,
    split,
    split_overlap,
    write_labels,
)
from geoweak.ecp_hpo import builtin_space, resolve_space, tune_backend
from geoweak.errors import GeoweakError, InputError
from geoweak.evaluation import EvalReport, ResultRow, evaluate, report, write_predictions, write_results_csv
from geoweak.filtering import (
    ColorRules,
    calibrate_thresholds,
    center_crop,
    filter_tiles,
    region_metrics,
    write_metrics_csv,
)
from geoweak.geodata import (
    GeoPoint,
    ImageTile,
    LocalTileAdapter,
    OverpassClient,
    PointLabel,
    Region,
    RemoteTileAdapter,
    _decode_raster,
    dedupe_and_space,
    encode_png,
    fetch_tiles,
    read_points,
    write_points,
)
from geoweak.training import EarlyStop, TrainedModel, finetune, get_backend, pretrain, train_scratch

log = logging.getLogger(__name__)

STAGES = ("fetch-points", "fetch-tiles", "filter", "autolabel", "build-dataset", "tune", "train", "evaluate",
          "report")

_STAGE_SECTIONS = {
    "fetch-points": ("seed", "paths", "geodata"),
    "fetch-tiles": ("geodata",),
    "filter": ("seed", "filtering"),
    "autolabel": ("autolabel", "paths"),
    "build-dataset": ("seed", "dataset", "paths"),
    "tune": ("seed", "training", "hpo"),
    "train": ("seed", "training", "hpo", "dataset"),
    "evaluate": ("evaluation",),
    "report": (),
}

_UPSTREAM = {
    "fetch-points": (),
    "fetch-tiles": ("fetch-points",),
    "filter": ("fetch-tiles",),
    "autolabel": ("filter",),
    "build-dataset": ("autolabel",),
    "tune": ("build-dataset",),
    "train": ("build-dataset", "tune"),
    "evaluate": ("train",),
    "report": ("evaluate",),
}


class StageConflict(GeoweakError):
    pass


class JSONLinesHandler(logging.Handler):
    def __init__(self, path: Path):
        super().__init__()
        self.path = path

    def emit(self, record: logging.LogRecord) -> None:
        rec = {"ts": round(record.created, 3), "level": record.levelname, "logger": record.name,
               "msg": record.getMessage()}
        rec.update(getattr(record, "event", {}) or {})
        with open(self.path, "a") as f:
            f.write(json.dumps(rec, default=str) + "\n")


def setup_logging(run_dir: Path, verbose: bool = False) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger("geoweak")
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()
    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    fileh = logging.FileHandler(run_dir / "log.txt")
    fileh.setFormatter(fmt)
    fileh.setLevel(logging.DEBUG)
    logger.addHandler(console)
    logger.addHandler(fileh)
    events = JSONLinesHandler(run_dir / "events.jsonl")
    events.setLevel(logging.INFO)
    logger.addHandler(events)
    return run_dir / "log.txt"


def teardown_logging() -> None:
    """Detach and close the handlers added by setup_logging."""
    logger = logging.getLogger("geoweak")
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"event": fields})


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


class Pipeline:
    def __init__(self, cfg: RunConfig, run_dir: str | os.PathLike, base_dir: Optional[str | os.PathLike] = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.base_dir = Path(base_dir or ".")
        self.run_dir.mkdir(parents=True, exist_ok=True)

    # -- helpers ---------------------------------------------------------

    def path(self, p: Optional[str]) -> Optional[Path]:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def stage_dir(self, name: str) -> Path:
        return self.run_dir / name

    def stage_hash(self, name: str) -> str:
        d = self.cfg.to_dict()
        parts = {s: d[s] for s in _STAGE_SECTIONS[name]}
        up = {u: self._done(u).get("hash") for u in _UPSTREAM[name] if self._done(u)}
        blob = json.dumps([name, parts, up], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _done(self, name: str) -> dict:
        p = self.stage_dir(name) / "stage.json"
        return json.loads(p.read_text()) if p.exists() else {}

    def is_done(self, name: str) -> bool:
        return bool(self._done(name))

    def _require(self, name: str) -> Path:
        if not self.is_done(name):
            raise InputError(f"stage {name!r} has not been run in {self.run_dir}")
        return self.stage_dir(name)

    def run(self, name: str) -> dict:
        fn: Callable[[Path], dict] = getattr(self, "_" + name.replace("-", "_"))
        h = self.stage_hash(name)
        prev = self._done(name)
        if prev:
            if prev["hash"] == h:
                _event(f"stage {name} already complete, skipping", stage=name, status="skipped")
                return prev
            raise StageConflict(f"stage {name!r} in {self.run_dir} was run with a different config or inputs; "
                                f"use a fresh run directory")
        out = self.stage_dir(name)
        if out.exists() and any(out.iterdir()):
            raise StageConflict(f"{out} holds a partial stage; remove it or use a fresh run directory")
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        _event(f"stage {name} started", stage=name, status="started")
        summary = fn(out)
        rec = {"stage": name, "hash": h, "summary": summary, "seconds": round(time.perf_counter() - t0, 3)}
        (out / "stage.json").write_text(json.dumps(rec, indent=2, default=str))
        _event(f"stage {name} done", stage=name, status="done", summary=summary)
        return rec

    # -- stages ----------------------------------------------------------

    def _fetch_points(self, out: Path) -> dict:
        cfg = self.cfg
        points: list[GeoPoint] = []
        if cfg.paths.points:
            points += read_points(self.path(cfg.paths.points))
        ov = cfg.geodata.overpass
        if ov.region is not None:
            client = OverpassClient(self.path(cfg.paths.cache) / "overpass", ov.endpoint, offline=ov.offline)
            points += client.fetch(Region(*ov.region), ov.categories)
        if not points:
            raise InputError("no input points: set paths.points or geodata.overpass.region")
        kept = dedupe_and_space(points, cfg.geodata.min_sep_m)
        write_points(kept, out / "points.csv")
        n_school = sum(p.label is PointLabel.school for p in kept)
        return {"n_input": len(points), "n_kept": len(kept), "school": n_school, "non_school": len(kept) - n_school}

    def _adapter(self):
        im = self.cfg.geodata.imagery
        if im.adapter == "remote":
            return RemoteTileAdapter(im.url_template, retries=im.retries, min_interval_s=im.min_interval_s)
        root = self.path(self.cfg.paths.tiles) or self.path(self.cfg.paths.data) / "tiles"
        return LocalTileAdapter(root)

    def _fetch_tiles(self, out: Path) -> dict:
        points = read_points(self._require("fetch-points") / "points.csv")
        g = self.cfg.geodata
        tiles = fetch_tiles(points, self._adapter(), tuple(g.tile_px), g.mpp, g.imagery.max_workers)
        (out / "tiles").mkdir()
        rows, n_ok = [], 0
        for p, t in zip(points, tiles):
            if isinstance(t, Exception):
                rows.append([p.id, p.label.value, p.lat, p.lon, "", "error", str(t)])
                log.warning("tile %s failed: %s", p.id, t)
                continue
            path = out / "tiles" / f"{p.id}.png"
            path.write_bytes(encode_png(t.pixels))
            rows.append([p.id, p.label.value, p.lat, p.lon, str(path), "ok", ""])
            n_ok += 1
        _write_csv(out / "index.csv", ["id", "label", "lat", "lon", "path", "status", "error"], rows)
        return {"n_points": len(points), "n_tiles": n_ok, "n_failed": len(points) - n_ok}

    def _load_tile(self, row: dict):
        pixels = _decode_raster(Path(row["path"]).read_bytes(), row["path"])
        center = GeoPoint(float(row["lat"]), float(row["lon"]), row["label"], "", row["id"])
        return ImageTile(pixels, self.cfg.geodata.mpp, center, source_id=row["id"])

    def _filter(self, out: Path) -> dict:
        f = self.cfg.filtering
        rows = [r for r in _read_csv(self._require("fetch-tiles") / "index.csv") if r["status"] == "ok"]
        rules = ColorRules.from_dict(f.rules) if f.rules else ColorRules()
        measured = []
        for r in rows:
            tile = self._load_tile(r)
            measured.append((r, region_metrics(center_crop(tile, tuple(f.crop_px)), rules)))
        if not measured:
            raise InputError("no tiles to filter")
        sample = measured if len(measured) <= f.sample_size else random.Random(self.cfg.seed).sample(measured,
                                                                                                      f.sample_size)
        thresholds = calibrate_thresholds([m for _, m in sample], f.percentile, f.floor)
        thresholds.save(out / "thresholds.yaml")
        kept, rejected = filter_tiles(measured, thresholds)
        reasons = {r["id"]: why for r, _, why in rejected}
        write_metrics_csv([(r["id"], m, reasons.get(r["id"], [])) for r, m in measured], out / "metrics.csv")
        _write_csv(out / "kept.csv", ["id", "label", "lat", "lon", "path"],
                   [[r["id"], r["label"], r["lat"], r["lon"], r["path"]] for r, _ in kept])
        return {"n_tiles": len(measured), "kept": len(kept), "rejected": len(rejected),
                "thresholds": thresholds.as_dict()}

    def _seg_backend(self):
        a = self.cfg.autolabel
        if a.backend == "synthetic":
            scenes = self.path(self.cfg.paths.scenes) or self.path(self.cfg.paths.data) / "scenes"
            return SyntheticBackend(scenes)
        return LangSAMBackend()

    def _autolabel(self, out: Path) -> dict:
        rows = [r for r in _read_csv(self._require("filter") / "kept.csv") if r["label"] == PointLabel.school.value]
        backend = self._seg_backend()
        conf = self.cfg.autolabel.to_runtime()
        outcomes = []
        with open(out / "audit.jsonl", "w") as audit:
            for r in rows:
                o = autolabel_tile(self._load_tile(r), backend, conf)
                outcomes.append(o)
                audit.write(json.dumps({"tile_id": o.tile_id, "status": o.status.value,
                                        "reason": o.reason.value if o.reason else None, **o.notes}) + "\n")
        write_outcomes(outcomes, out / "outcomes.csv")
        counts: dict[str, int] = {}
        for o in outcomes:
            key = o.status.value if o.reason is None else o.reason.value
            counts[key] = counts.get(key, 0) + 1
        return {"n_tiles": len(rows), **counts}

    def _golden(self) -> Dataset:
        p = self.path(self.cfg.paths.golden_manifest)
        if p is None:
            raise InputError("paths.golden_manifest is required to build the golden dataset")
        golden = read_labels(p)
        if any(im.split is Split.unassigned for im in golden):
            golden = split(golden, tuple(self.cfg.dataset.golden_split), self.cfg.seed)
        return golden

    def _build_dataset(self, out: Path) -> dict:
        d = self.cfg.dataset
        outcomes = read_outcomes(self._require("autolabel") / "outcomes.csv")
        kept = _read_csv(self._require("filter") / "kept.csv")
        negatives = [r["id"] for r in kept if r["label"] == PointLabel.non_school.value]
        paths = {r["id"]: r["path"] for r in kept}
        golden = self._golden()
        auto = assemble_auto(outcomes, negatives, paths, exclude=golden.ids())
        auto = split(auto, tuple(d.auto_split), self.cfg.seed)
        write_labels(auto, out / "auto")

        overlap = split_overlap(auto, golden)
        if overlap:
            raise GeoweakError(f"split separation violated for {len(overlap)} images, e.g. {sorted(overlap)[:3]}")
        pool = golden.by_split(Split.train)
        write_labels(golden.by_split(Split.val), out / "golden_val")
        write_labels(golden.by_split(Split.test), out / "golden_test")
        regimes = {}
        for n in d.use_regimes:
            s, ns = d.regimes[n]
            sub = make_regime(pool, RegimeSpec(n, s, ns), self.cfg.seed)
            write_labels(sub.with_split(Split.train), out / f"regime_{n}")
            regimes[n] = {"school": s, "non_school": ns}
        return {"auto": auto.summary, "auto_splits": {s.value: len(auto.by_split(s)) for s in Split if s.value != "unassigned"},
                "golden": {s.value: len(golden.by_split(s)) for s in (Split.train, Split.val, Split.test)},
                "regimes": regimes, "split_overlap": 0}

    def backend(self):
        t = self.cfg.training
        if t.backend == "mock":
            return get_backend("mock", seed=self.cfg.seed, **asdict(t.mock))
        return get_backend(t.backend, t.command)

    def _datasets(self):
        d = self._require("build-dataset")
        auto = read_labels(d / "auto" / "manifest.jsonl")
        val = read_labels(d / "golden_val" / "manifest.jsonl")
        test = read_labels(d / "golden_test" / "manifest.jsonl")
        regimes = {n: read_labels(d / f"regime_{n}" / "manifest.jsonl") for n in self.cfg.dataset.use_regimes}
        return auto, regimes, val, test

    def _augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(**asdict(self.cfg.dataset.augmentation))

    def _early_stop(self) -> EarlyStop:
        t = self.cfg.training
        return EarlyStop(t.patience, t.max_rounds)

    def _pretrain(self, backend, auto: Dataset) -> TrainedModel:
        t = self.cfg.training
        return pretrain(backend, auto, t.hparams, self._augmentation(), t.pretrain_rounds, self.cfg.seed,
                        self.path(self.cfg.paths.artifacts), self.cfg.evaluation.score_cutoff)

    def _tune(self, out: Path) -> dict:
        h = self.cfg.hpo
        if not h.enabled:
            return {"enabled": False}
        backend = self.backend()
        auto, regimes, val, _ = self._datasets()
        parent = self._pretrain(backend, auto)
        regime = max(regimes)
        space = resolve_space(h.space) if h.space else builtin_space(backend.space_id)
        best, ledger = tune_backend(backend, regimes[regime], val, h.metric, h.budget, space, self.cfg.seed, parent,
                                    self.cfg.training.hparams, self._early_stop(), h.strategy, out,
                                    self.cfg.evaluation.score_cutoff)
        return {"enabled": True, "regime": regime, "calls": len(ledger.calls), "best_value": ledger.incumbent.value,
                "best": best}

    def _train(self, out: Path) -> dict:
        t = self.cfg.training
        backend = self.backend()
        auto, regimes, val, _ = self._datasets()
        hp = dict(t.hparams)
        tune = self._done("tune")
        if tune and tune["summary"].get("enabled"):
            hp.update(json.loads((self.stage_dir("tune") / "best_hparams.json").read_text()))
        artifacts = self.path(self.cfg.paths.artifacts)
        aug, stop, cutoff, seed = self._augmentation(), self._early_stop(), self.cfg.evaluation.score_cutoff, self.cfg.seed
        models = []
        parent = self._pretrain(backend, auto) if {"auto", "two_stage"} & set(t.strategies) else None
        for n, golden_train in sorted(regimes.items()):
            for strategy in t.strategies:
                if strategy == "golden":
                    m = train_scratch(backend, golden_train, val, hp, stop, aug, seed, artifacts, cutoff)
                elif strategy == "auto":
                    m = parent
                else:
                    m = finetune(backend, parent, golden_train, val, hp, stop, aug, seed, artifacts, cutoff)
                models.append({"regime": n, "strategy": strategy, **m.record()})
        (out / "models.json").write_text(json.dumps(models, indent=2, default=str))
        return {"n_models": len(models), "hparams": hp}

    def _evaluate(self, out: Path) -> dict:
        backend = self.backend()
        _, _, _, test = self._datasets()
        models = json.loads((self._require("train") / "models.json").read_text())
        gts = {im.id: list(im.boxes) for im in test}
        e = self.cfg.evaluation
        rows = []
        for m in models:
            tag = f"{m['strategy']}_{m['regime']}"
            preds = backend.predict(m["weights_ref"], list(test), out / "work" / tag)
            write_predictions(preds, out / f"predictions_{tag}.jsonl")
            rep = evaluate(preds, gts, e.score_cutoff, str(m["regime"]), e.interpolation)
            (out / f"report_{tag}.json").write_text(json.dumps(rep.to_dict(), indent=1, default=str))
            rows.append(ResultRow.from_report(m["backend"], m["strategy"], m["regime"], rep))
        write_results_csv(rows, out / "results.csv")
        (out / "results_full.json").write_text(json.dumps([asdict(r) for r in rows], indent=1))
        return {"n_models": len(rows), "n_test_images": len(test)}

    def _report(self, out: Path) -> dict:
        full = json.loads((self._require("evaluate") / "results_full.json").read_text())
        rows = [ResultRow(**r) for r in full]
        paths = report(rows, out)
        return {k: str(v) for k, v in paths.items()}

    def final_report(self, strategy: str = "two_stage") -> EvalReport:
        """The evaluation report of ``strategy`` at the largest regime."""
        models = json.loads((self._require("train") / "models.json").read_text())
        picks = [m for m in models if m["strategy"] == strategy] or models
        m = max(picks, key=lambda m: m["regime"])
        data = json.loads((self._require("evaluate") / f"report_{m['strategy']}_{m['regime']}.json").read_text())
        return EvalReport(ap={}, precision=data["precision"], recall=data["recall"], f1=data["f1"],
                          map50=data["map50"], map50_95=data["map50_95"], n_images=data["n_images"],
                          regime=data["regime"])


def run_all(pipe: Pipeline, stages=STAGES) -> dict:
    return {s: pipe.run(s) for s in stages}
