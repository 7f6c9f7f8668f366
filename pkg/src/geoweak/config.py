"""Run configuration: one YAML file, validated strictly.

Unknown keys are errors, because a misspelled threshold name would
otherwise silently fall back to its default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from geoweak.errors import InputError


class ConfigError(InputError):
    pass


@dataclass
class Paths:
    cache: str = "cache"
    artifacts: str = "artifacts"
    data: str = "data"
    points: Optional[str] = None
    tiles: Optional[str] = None
    scenes: Optional[str] = None
    golden_manifest: Optional[str] = None


@dataclass
class ImageryConfig:
    adapter: str = "local"
    url_template: Optional[str] = None
    max_workers: int = 4
    retries: int = 3
    min_interval_s: float = 0.0

    def __post_init__(self):
        if self.adapter not in ("local", "remote"):
            raise ConfigError(f"geodata.imagery.adapter must be 'local' or 'remote', got {self.adapter!r}")
        if self.adapter == "remote" and not self.url_template:
            raise ConfigError("geodata.imagery.url_template is required for the remote adapter")
        if self.max_workers < 1 or self.retries < 0:
            raise ConfigError("geodata.imagery.max_workers must be >= 1 and retries >= 0")


@dataclass
class OverpassConfig:
    endpoint: str = "https://overpass-api.de/api/interpreter"
    region: Optional[list[float]] = None
    categories: list[str] = field(default_factory=lambda: ["hospital", "supermarket", "parking"])
    offline: bool = False

    def __post_init__(self):
        if self.region is not None and len(self.region) != 4:
            raise ConfigError("geodata.overpass.region must be [south, west, north, east]")


@dataclass
class GeodataConfig:
    min_sep_m: float = 300.0
    tile_px: list[int] = field(default_factory=lambda: [500, 500])
    mpp: float = 0.6
    imagery: ImageryConfig = field(default_factory=ImageryConfig)
    overpass: OverpassConfig = field(default_factory=OverpassConfig)

    def __post_init__(self):
        if self.min_sep_m < 0 or self.mpp <= 0 or len(self.tile_px) != 2 or min(self.tile_px) <= 0:
            raise ConfigError("geodata: need min_sep_m >= 0, mpp > 0 and two positive tile_px values")


@dataclass
class FilteringConfig:
    crop_px: list[int] = field(default_factory=lambda: [200, 200])
    percentile: float = 95.0
    floor: float = 0.8
    sample_size: int = 1000
    rules: Optional[dict] = None

    def __post_init__(self):
        if not 0 < self.percentile <= 100 or not 0 <= self.floor <= 1 or self.sample_size < 1:
            raise ConfigError("filtering: percentile in (0, 100], floor in [0, 1], sample_size >= 1")


@dataclass
class AutolabelSection:
    backend: str = "synthetic"
    crop_px: list[int] = field(default_factory=lambda: [400, 400])
    prompts: list[str] = field(default_factory=lambda: ["building", "roof", "school"])
    min_area_frac: float = 0.005
    max_area_frac: float = 0.60
    fuse_iou: float = 0.10
    solidity_min: float = 0.70
    aspect_max: float = 6.0
    center_max_px: float = 100.0

    def __post_init__(self):
        if self.backend not in ("synthetic", "langsam"):
            raise ConfigError(f"autolabel.backend must be 'synthetic' or 'langsam', got {self.backend!r}")
        self.to_runtime()  # range checks live on the runtime config

    def to_runtime(self):
        from geoweak.autolabel import AutolabelConfig

        try:
            return AutolabelConfig(tuple(self.crop_px), tuple(self.prompts), self.min_area_frac, self.max_area_frac,
                                   self.fuse_iou, self.solidity_min, self.aspect_max, self.center_max_px)
        except InputError as exc:
            raise ConfigError(f"autolabel: {exc}") from exc


@dataclass
class AugmentationSection:
    rotate: bool = True
    flip: bool = True
    translate_max: float = 0.1

    def __post_init__(self):
        if not 0 <= self.translate_max <= 0.5:
            raise ConfigError("dataset.augmentation.translate_max must be in [0, 0.5]")


@dataclass
class DatasetConfig:
    auto_split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    golden_split: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    regimes: dict[int, list[int]] = field(
        default_factory=lambda: {50: [32, 18], 100: [65, 35], 300: [195, 105], 443: [288, 155]})
    use_regimes: list[int] = field(default_factory=lambda: [50, 100])
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)

    def __post_init__(self):
        for name in ("auto_split", "golden_split"):
            fr = getattr(self, name)
            if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1) > 1e-9:
                raise ConfigError(f"dataset.{name} must be three fractions summing to 1")
        self.regimes = {int(k): list(v) for k, v in self.regimes.items()}
        for n, (s, ns) in self.regimes.items():
            if s + ns != n:
                raise ConfigError(f"dataset.regimes.{n}: {s} + {ns} != {n}")
        missing = set(self.use_regimes) - set(self.regimes)
        if missing:
            raise ConfigError(f"dataset.use_regimes names undefined regimes {sorted(missing)}")


@dataclass
class MockSection:
    noise_px: float = 0.0
    drop_rate: float = 0.0
    spurious_rate: float = 0.0

    def __post_init__(self):
        if self.noise_px < 0 or not 0 <= self.drop_rate <= 1 or self.spurious_rate < 0:
            raise ConfigError("training.mock: noise_px >= 0, drop_rate in [0, 1], spurious_rate >= 0")


@dataclass
class TrainingConfig:
    backend: str = "mock"
    command: Optional[str] = None
    strategies: list[str] = field(default_factory=lambda: ["golden", "auto", "two_stage"])
    pretrain_rounds: int = 3
    patience: int = 5
    max_rounds: int = 50
    hparams: dict = field(default_factory=dict)
    mock: MockSection = field(default_factory=MockSection)

    def __post_init__(self):
        if self.backend not in ("mock", "yolo", "frcnn", "satlas"):
            raise ConfigError(f"training.backend must be one of mock, yolo, frcnn, satlas; got {self.backend!r}")
        bad = set(self.strategies) - {"golden", "auto", "two_stage"}
        if bad or not self.strategies:
            raise ConfigError(f"training.strategies: unknown {sorted(bad)}")
        if not 1 <= self.max_rounds <= 50 or self.patience < 1 or self.pretrain_rounds < 1:
            raise ConfigError("training: max_rounds in [1, 50], patience >= 1, pretrain_rounds >= 1")


@dataclass
class HPOConfig:
    enabled: bool = False
    budget: int = 30
    metric: str = "f1"
    space: Optional[str] = None
    strategy: str = "ecp"

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("hpo.budget must be >= 1")
        if self.metric not in ("f1", "map50"):
            raise ConfigError("hpo.metric must be 'f1' or 'map50'")
        if self.strategy not in ("ecp", "random"):
            raise ConfigError("hpo.strategy must be 'ecp' or 'random'")


@dataclass
class EvaluationConfig:
    score_cutoff: float = 0.25
    interpolation: str = "all_point"

    def __post_init__(self):
        if not 0 <= self.score_cutoff <= 1 or self.interpolation not in ("all_point", "11_point"):
            raise ConfigError("evaluation: score_cutoff in [0, 1], interpolation all_point or 11_point")


@dataclass
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    geodata: GeodataConfig = field(default_factory=GeodataConfig)
    filtering: FilteringConfig = field(default_factory=FilteringConfig)
    autolabel: AutolabelSection = field(default_factory=AutolabelSection)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    hpo: HPOConfig = field(default_factory=HPOConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def section_hash(self, *names: str) -> str:
        d = dataclasses.asdict(self)
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        key = f"{where}.{unknown[0]}" if where else unknown[0]
        raise ConfigError(f"unknown config key '{key}'")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, f"{where}.{k}" if where else k)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def load_config(path: Optional[str | os.PathLike] = None, overrides: Optional[dict] = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if overrides:
        data = _merge(data, overrides)
    return _build(RunConfig, data, "")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def dump_config(cfg: RunConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
