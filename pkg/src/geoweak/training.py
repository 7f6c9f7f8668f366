"""Two-stage detector training: pretrain on auto labels, fine-tune on golden data.

Backends implement two primitives, ``fit`` (one evaluation round of
training, optionally starting from earlier weights) and ``predict``. The
orchestrator here owns rounds, early stopping, lineage and run records.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import shlex
import subprocess
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from geoweak.boxes import BBox
from geoweak.dataset import AugmentationSpec, Dataset, LabeledImage, Split, write_labels
from geoweak.errors import BackendUnavailable, GeoweakError, InputError
from geoweak.evaluation import evaluate, read_predictions

log = logging.getLogger(__name__)

MAX_FINETUNE_ROUNDS = 50


class Lineage(str, Enum):
    scratch = "scratch"
    pretrained_auto = "pretrained_auto"
    finetuned_two_stage = "finetuned_two_stage"


@dataclass(frozen=True)
class EarlyStop:
    patience: int = 5
    max_rounds: int = MAX_FINETUNE_ROUNDS
    metric: str = "f1"

    def __post_init__(self):
        if self.patience < 1 or self.max_rounds < 1:
            raise InputError("patience and max_rounds must be >= 1")


@dataclass
class TrainedModel:
    backend: str
    weights_ref: str
    lineage: Lineage
    run_id: str
    stage: str
    dataset_digest: str
    train_config: dict
    metrics_history: list[dict] = field(default_factory=list)
    parent: Optional["TrainedModel"] = None

    def __post_init__(self):
        if self.lineage is Lineage.finetuned_two_stage and (
                self.parent is None or self.parent.lineage is not Lineage.pretrained_auto):
            raise InputError("a two-stage model needs a pretrained_auto parent")

    @property
    def parent_run(self) -> Optional[str]:
        return self.parent.run_id if self.parent else None

    def record(self) -> dict:
        return {"run_id": self.run_id, "backend": self.backend, "stage": self.stage, "lineage": self.lineage.value,
                "parent_run": self.parent_run, "dataset_manifest_hash": self.dataset_digest,
                "hparams": self.train_config, "weights_ref": self.weights_ref,
                "metrics_history": self.metrics_history}


class DetectorBackend(Protocol):
    name: str
    space_id: str

    def fit(self, train: Dataset, init: Optional[str], hparams: dict, seed: int, workdir: Path) -> str:
        """Train for one round; return an opaque weights reference."""

    def predict(self, weights_ref: str, images: Sequence[LabeledImage], workdir: Path) -> dict[str, list[BBox]]: ...


def _stable_seed(*parts) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:8], "big")


class MockDetector:
    """Test double that predicts ground truth perturbed by configurable noise.

    ``noise_px`` jitters box centers (in pixels of a ``tile_px`` image),
    ``drop_rate`` misses that fraction of boxes and ``spurious_rate`` adds
    that many false boxes per image on average. ``response`` maps the
    training hyperparameters to overrides of these three, which makes the
    validation metric a known function of the hyperparameters. With all
    noise at zero, predictions equal the ground truth.
    """

    space_id = "yolo"

    def __init__(self, noise_px: float = 0.0, drop_rate: float = 0.0, spurious_rate: float = 0.0,
                 seed: int = 0, tile_px: int = 500, name: str = "mock",
                 response: Optional[Callable[[dict], dict]] = None):
        if noise_px < 0 or not 0 <= drop_rate <= 1 or spurious_rate < 0:
            raise InputError("mock noise parameters out of range")
        self.noise_px = noise_px
        self.drop_rate = drop_rate
        self.spurious_rate = spurious_rate
        self.seed = seed
        self.tile_px = tile_px
        self.name = name
        self.response = response

    def fit(self, train: Dataset, init: Optional[str], hparams: dict, seed: int, workdir: Path) -> str:
        if not len(train):
            raise InputError("mock detector cannot fit an empty training set")
        prev = json.loads(init.removeprefix("mock:")) if init else {"rounds": 0, "lineage": []}
        state = {"rounds": prev["rounds"] + 1, "hparams": hparams, "seed": seed,
                 "lineage": prev["lineage"] + [train.digest()[:12]]}
        return "mock:" + json.dumps(state, sort_keys=True)

    def _noise(self, hparams: dict) -> tuple[float, float, float]:
        noise, drop, spur = self.noise_px, self.drop_rate, self.spurious_rate
        if self.response is not None:
            over = self.response(hparams)
            noise = over.get("noise_px", noise)
            drop = min(max(over.get("drop_rate", drop), 0.0), 1.0)
            spur = over.get("spurious_rate", spur)
        return noise, drop, spur

    def predict(self, weights_ref: str, images: Sequence[LabeledImage], workdir: Optional[Path] = None
                ) -> dict[str, list[BBox]]:
        state = json.loads(weights_ref.removeprefix("mock:"))
        noise, drop, spur = self._noise(state.get("hparams", {}))
        out = {}
        for im in images:
            # per-box draws depend only on (seed, image, box), so a higher drop
            # rate drops a superset of boxes
            rng = random.Random(_stable_seed(self.seed, im.id))
            preds = []
            for b in im.boxes:
                u, score = rng.random(), 0.5 + 0.5 * rng.random()
                dx, dy = rng.gauss(0, 1), rng.gauss(0, 1)
                if u < drop:
                    continue
                if noise > 0:
                    b = BBox(b.cx + dx * noise / self.tile_px, b.cy + dy * noise / self.tile_px, b.w, b.h,
                             b.class_id).clamped()
                preds.append(b.with_score(score if noise or drop or spur else 1.0))
            if spur > 0:
                n_spur = _poisson(rng, spur)
                for _ in range(n_spur):
                    w, h = 0.05 + 0.2 * rng.random(), 0.05 + 0.2 * rng.random()
                    cx, cy = w / 2 + (1 - w) * rng.random(), h / 2 + (1 - h) * rng.random()
                    preds.append(BBox(cx, cy, w, h, 0, 0.6 * rng.random()))
            out[im.id] = preds
        return out


def _poisson(rng: random.Random, lam: float) -> int:
    # Knuth; lam is small here
    limit, k, p = pow(2.718281828459045, -lam), 0, 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


class SubprocessBackend:
    """Adapter for an external training program.

    The command is invoked as ``<command> train|finetune|predict --manifest M
    --hparams H --out DIR [--init WEIGHTS] [--seed S]``. ``train``/``finetune``
    must write ``DIR/metrics.json`` containing ``{"weights": path}``;
    ``predict`` must write ``DIR/predictions.jsonl``. A nonzero exit status is
    a failure and the tail of the program's output is surfaced.
    """

    def __init__(self, name: str, command: str | Sequence[str], space_id: Optional[str] = None,
                 timeout_s: Optional[float] = None):
        self.name = name
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.space_id = space_id or name
        self.timeout_s = timeout_s

    def _run(self, verb: str, dataset: Dataset, out: Path, hparams: dict, init: Optional[str] = None,
             seed: Optional[int] = None) -> Path:
        out.mkdir(parents=True, exist_ok=True)
        manifest = write_labels(dataset, out / "data")
        hp = out / "hparams.json"
        hp.write_text(json.dumps(hparams, sort_keys=True, default=str))
        args = [*self.command, verb, "--manifest", str(manifest), "--hparams", str(hp), "--out", str(out)]
        if init:
            args += ["--init", init]
        if seed is not None:
            args += ["--seed", str(seed)]
        try:
            proc = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout_s)
        except FileNotFoundError as exc:
            raise BackendUnavailable(f"{self.name}: cannot execute {self.command[0]!r}") from exc
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout)[-800:]
            raise GeoweakError(f"{self.name} {verb} exited with {proc.returncode}:\n{tail}")
        return out

    def fit(self, train: Dataset, init: Optional[str], hparams: dict, seed: int, workdir: Path) -> str:
        verb = "finetune" if init else "train"
        out = self._run(verb, train, Path(workdir), hparams, init, seed)
        metrics = out / "metrics.json"
        if not metrics.exists():
            raise GeoweakError(f"{self.name} {verb} did not write {metrics}")
        return str(json.loads(metrics.read_text())["weights"])

    def predict(self, weights_ref: str, images: Sequence[LabeledImage], workdir: Path) -> dict[str, list[BBox]]:
        out = self._run("predict", Dataset(tuple(images)), Path(workdir), {}, weights_ref)
        path = out / "predictions.jsonl"
        if not path.exists():
            raise GeoweakError(f"{self.name} predict did not write {path}")
        return read_predictions(path)


def get_backend(name: str, command: Optional[str] = None, **mock_kwargs) -> DetectorBackend:
    """``mock`` or an external detector (``yolo``, ``frcnn``, ``satlas``) run through a command."""
    if name == "mock":
        return MockDetector(**mock_kwargs)
    if name in ("yolo", "frcnn", "satlas"):
        if not command:
            raise BackendUnavailable(f"backend {name!r} needs an adapter command (backend.command in the config)")
        return SubprocessBackend(name, command, space_id=name)
    raise InputError(f"unknown backend {name!r}")


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def _run_id(backend: str, stage: str, hparams: dict, digest: str, parent: Optional[str], seed: int) -> str:
    blob = json.dumps([backend, stage, hparams, digest, parent, seed], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _gts(images: Dataset) -> dict[str, list[BBox]]:
    return {im.id: list(im.boxes) for im in images}


def _train_rounds(backend: DetectorBackend, train: Dataset, val: Dataset, init: Optional[str], hparams: dict,
                  stop: EarlyStop, seed: int, workdir: Path, score_cutoff: float) -> tuple[str, list[dict]]:
    history: list[dict] = []
    best_w, best_v, since = init, float("-inf"), 0
    weights = init
    for rnd in range(1, stop.max_rounds + 1):
        try:
            weights = backend.fit(train, weights, hparams, seed + rnd, workdir / f"round{rnd:03d}")
        except (GeoweakError, OSError) as exc:
            raise GeoweakError(f"{backend.name}: training round {rnd} failed: {exc}") from exc
        preds = backend.predict(weights, list(val), workdir / f"round{rnd:03d}" / "val")
        rep = evaluate(preds, _gts(val), score_cutoff=score_cutoff)
        history.append({"round": rnd, **rep.metrics()})
        value = rep.metrics()[stop.metric]
        if value > best_v:
            best_w, best_v, since = weights, value, 0
        else:
            since += 1
            if since >= stop.patience:
                log.info("early stop after round %d (%s flat for %d rounds)", rnd, stop.metric, since)
                break
    return best_w, history


def _finish(model: TrainedModel, artifacts: Optional[Path]) -> TrainedModel:
    if artifacts is not None:
        d = Path(artifacts) / model.run_id
        d.mkdir(parents=True, exist_ok=True)
        (d / "run.json").write_text(json.dumps(model.record(), indent=2, default=str))
    return model


def _hparams_snapshot(hparams: dict, aug: AugmentationSpec) -> dict:
    return {**hparams, "augmentation": asdict(aug)}


def _val_split(ds: Dataset, fallback: Dataset) -> Dataset:
    val = ds.by_split(Split.val)
    if not len(val):
        log.info("auto dataset has no val split; validating on the train split")
        return fallback
    return val


def pretrain(backend: DetectorBackend, auto_dataset: Dataset, hparams: Optional[dict] = None,
             augmentation: AugmentationSpec = AugmentationSpec(), rounds: int = 3, seed: int = 0,
             artifacts: Optional[Path] = None, score_cutoff: float = 0.25) -> TrainedModel:
    """Stage one: train on the auto-labeled train split."""
    train = auto_dataset.by_split(Split.train)
    if not len(train):
        raise InputError("auto-labeled dataset has an empty train split")
    val = _val_split(auto_dataset, train)
    cfg = _hparams_snapshot(dict(hparams or {}), augmentation)
    run_id = _run_id(backend.name, "pretrain", cfg, auto_dataset.digest(), None, seed)
    workdir = Path(artifacts or ".") / run_id
    weights, history = _train_rounds(backend, train, val, None, cfg, EarlyStop(patience=rounds, max_rounds=rounds),
                                     seed, workdir, score_cutoff)
    model = TrainedModel(backend.name, weights, Lineage.pretrained_auto, run_id, "pretrain", auto_dataset.digest(),
                         cfg, history)
    return _finish(model, artifacts)


def train_scratch(backend: DetectorBackend, golden_train: Dataset, golden_val: Dataset,
                  hparams: Optional[dict] = None, early_stop: EarlyStop = EarlyStop(),
                  augmentation: AugmentationSpec = AugmentationSpec(), seed: int = 0,
                  artifacts: Optional[Path] = None, score_cutoff: float = 0.25) -> TrainedModel:
    """Golden-only baseline: train directly on the golden regime."""
    if not len(golden_train):
        raise InputError("golden training set is empty")
    cfg = _hparams_snapshot(dict(hparams or {}), augmentation)
    digest = golden_train.digest()
    run_id = _run_id(backend.name, "scratch", cfg, digest, None, seed)
    stop = EarlyStop(early_stop.patience, min(early_stop.max_rounds, MAX_FINETUNE_ROUNDS), early_stop.metric)
    weights, history = _train_rounds(backend, golden_train, golden_val, None, cfg, stop, seed,
                                     Path(artifacts or ".") / run_id, score_cutoff)
    return _finish(TrainedModel(backend.name, weights, Lineage.scratch, run_id, "scratch", digest, cfg, history),
                   artifacts)


def finetune(backend: DetectorBackend, parent: TrainedModel, golden_train: Dataset, golden_val: Dataset,
             hparams: Optional[dict] = None, early_stop: EarlyStop = EarlyStop(),
             augmentation: AugmentationSpec = AugmentationSpec(), seed: int = 0,
             artifacts: Optional[Path] = None, score_cutoff: float = 0.25) -> TrainedModel:
    """Stage two: continue from ``parent`` on golden data with early stopping
    on validation F1, never more than 50 rounds."""
    if parent.backend != backend.name:
        raise InputError(f"parent model was trained with {parent.backend!r}, not {backend.name!r}")
    if parent.lineage is not Lineage.pretrained_auto:
        raise InputError(f"fine-tuning needs a pretrained_auto parent, got {parent.lineage.value}")
    if not len(golden_train):
        raise InputError("golden training set is empty")
    cfg = _hparams_snapshot(dict(hparams or {}), augmentation)
    digest = golden_train.digest()
    run_id = _run_id(backend.name, "finetune", cfg, digest, parent.run_id, seed)
    stop = EarlyStop(early_stop.patience, min(early_stop.max_rounds, MAX_FINETUNE_ROUNDS), early_stop.metric)
    weights, history = _train_rounds(backend, golden_train, golden_val, parent.weights_ref, cfg, stop, seed,
                                     Path(artifacts or ".") / run_id, score_cutoff)
    model = TrainedModel(backend.name, weights, Lineage.finetuned_two_stage, run_id, "finetune", digest, cfg,
                         history, parent=parent)
    return _finish(model, artifacts)


def two_stage(backend: DetectorBackend, auto_dataset: Optional[Dataset], golden_train: Optional[Dataset],
              golden_val: Optional[Dataset], hparams: Optional[dict] = None,
              pretrain_hparams: Optional[dict] = None, skip_pretrain: bool = False, skip_finetune: bool = False,
              early_stop: EarlyStop = EarlyStop(), augmentation: AugmentationSpec = AugmentationSpec(),
              pretrain_rounds: int = 3, seed: int = 0, artifacts: Optional[Path] = None,
              score_cutoff: float = 0.25) -> TrainedModel:
    """Pretrain then fine-tune. Skipping a stage gives the golden-only or
    auto-only baselines."""
    if skip_pretrain and skip_finetune:
        raise InputError("cannot skip both stages")
    if skip_pretrain:
        return train_scratch(backend, golden_train, golden_val, hparams, early_stop, augmentation, seed, artifacts,
                             score_cutoff)
    parent = pretrain(backend, auto_dataset, pretrain_hparams if pretrain_hparams is not None else hparams,
                      augmentation, pretrain_rounds, seed, artifacts, score_cutoff)
    if skip_finetune:
        return parent
    return finetune(backend, parent, golden_train, golden_val, hparams, early_stop, augmentation, seed, artifacts,
                    score_cutoff)


def verify_lineage(model: TrainedModel, artifacts: Path) -> bool:
    """Every ancestor of ``model`` has a stored run record with a matching id."""
    node = model
    while node is not None:
        rec_path = Path(artifacts) / node.run_id / "run.json"
        if not rec_path.exists():
            return False
        rec = json.loads(rec_path.read_text())
        if rec["run_id"] != node.run_id or rec["parent_run"] != node.parent_run:
            return False
        if node.parent is not None:
            parent_rec = Path(artifacts) / node.parent.run_id / "run.json"
            if not parent_rec.exists() or json.loads(parent_rec.read_text())["lineage"] != Lineage.pretrained_auto.value:
                return False
        node = node.parent
    return True


def predict_dataset(backend: DetectorBackend, model: TrainedModel, images: Dataset,
                    workdir: Optional[Path] = None) -> dict[str, list[BBox]]:
    return backend.predict(model.weights_ref, list(images), Path(workdir or ".") / model.run_id / "predict")
