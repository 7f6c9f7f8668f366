"""Budgeted black-box maximization over box-constrained hyperparameter spaces.

The default strategy is ECP ("Every Call is Precious"): candidates are drawn
uniformly, but a candidate only costs an objective call if, under the current
Lipschitz-constant estimate ``eps``, it could still beat the incumbent::

    min_i f(x_i) + eps * ||x - x_i||  >=  max_j f(x_j)

``eps`` starts small and is multiplied by ``tau`` after every evaluation and
after every ``C`` consecutive rejections, so the acceptance region grows until
something is accepted. Distances are measured in the unit cube the space is
mapped to (log dimensions in log space).
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from geoweak.errors import InputError

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 30


@dataclass(frozen=True)
class Dim:
    name: str
    lower: float
    upper: float
    scale: str = "linear"

    def __post_init__(self):
        if self.scale not in ("linear", "log"):
            raise InputError(f"{self.name}: scale must be 'linear' or 'log'")
        if not self.lower < self.upper:
            raise InputError(f"{self.name}: lower bound must be below upper bound")
        if self.scale == "log" and self.lower <= 0:
            raise InputError(f"{self.name}: log scale needs a positive lower bound")

    def from_unit(self, u: float) -> float:
        u = min(max(float(u), 0.0), 1.0)
        if self.scale == "log":
            v = math.exp(math.log(self.lower) + u * (math.log(self.upper) - math.log(self.lower)))
        else:
            v = self.lower + u * (self.upper - self.lower)
        return min(max(v, self.lower), self.upper)

    def to_unit(self, v: float) -> float:
        if self.scale == "log":
            return (math.log(v) - math.log(self.lower)) / (math.log(self.upper) - math.log(self.lower))
        return (v - self.lower) / (self.upper - self.lower)


@dataclass(frozen=True)
class HyperParamSpace:
    dims: tuple[Dim, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        names = [d.name for d in self.dims]
        if not names:
            raise InputError("a search space needs at least one dimension")
        if len(set(names)) != len(names):
            raise InputError("dimension names must be unique")

    def __len__(self):
        return len(self.dims)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def decode(self, u: np.ndarray) -> dict[str, float]:
        return {d.name: d.from_unit(x) for d, x in zip(self.dims, u)}

    def encode(self, config: dict[str, float]) -> np.ndarray:
        return np.array([d.to_unit(config[d.name]) for d in self.dims])

    def contains(self, config: dict[str, float]) -> bool:
        return set(config) == set(self.names) and all(d.lower <= config[d.name] <= d.upper for d in self.dims)

    def to_dict(self) -> dict:
        return {"dims": [asdict(d) for d in self.dims]}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParamSpace":
        # YAML reads "1e-05" (no dot) as a string, so coerce bounds
        return cls(tuple(Dim(x["name"], float(x["lower"]), float(x["upper"]), x.get("scale", "linear"))
                         for x in d["dims"]))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "HyperParamSpace":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


_BUILTIN = {
    "yolo": (
        Dim("lr0", 1e-4, 1e-2, "log"),
        Dim("lrf", 0.01, 0.1),
        Dim("momentum", 0.90, 0.98),
        Dim("weight_decay", 1e-5, 0.005, "log"),
        Dim("box", 7.0, 10.0),
        Dim("translate", 0.0, 0.3),
        Dim("cls", 0.2, 1.5),
        Dim("dfl", 0.8, 2.5),
        Dim("dropout", 0.0, 0.4),
        Dim("erasing", 0.1, 0.5),
    ),
    "frcnn": (
        Dim("lr", 1e-5, 5e-3, "log"),
        Dim("momentum", 0.85, 0.98),
        Dim("weight_decay", 1e-6, 1e-3, "log"),
        Dim("rpn_nms_thresh", 0.4, 0.8),
        Dim("box_score_thresh", 0.2, 0.5),
        Dim("box_nms_thresh", 0.4, 0.7),
    ),
    "satlas": (
        Dim("lr", 1e-5, 5e-4, "log"),
        Dim("weight_decay", 1e-6, 1e-3, "log"),
        Dim("conf_thresh", 0.01, 0.4),
        Dim("nms_thresh", 0.4, 0.8),
    ),
}


def builtin_space(backend_name: str) -> HyperParamSpace:
    """Standard fine-tuning search intervals for the yolo, frcnn and satlas detectors."""
    try:
        return HyperParamSpace(_BUILTIN[backend_name])
    except KeyError:
        raise InputError(f"no built-in space for {backend_name!r}; choose from {sorted(_BUILTIN)}") from None


def resolve_space(spec: str) -> HyperParamSpace:
    """A built-in space name or a path to a YAML/JSON space file."""
    if spec in _BUILTIN:
        return builtin_space(spec)
    if Path(spec).exists():
        return HyperParamSpace.load(spec)
    raise InputError(f"unknown search space {spec!r}")


@dataclass
class Call:
    t: int
    config: dict[str, float]
    value: float
    status: str
    wall_time_s: float


@dataclass
class EvaluationLedger:
    budget: int
    calls: list[Call] = field(default_factory=list)

    @property
    def incumbent(self) -> Optional[Call]:
        best = None
        for c in self.calls:
            if best is None or c.value > best.value:
                best = c
        return best

    def incumbent_values(self) -> list[float]:
        return list(np.maximum.accumulate([c.value for c in self.calls])) if self.calls else []

    def record(self, config: dict, value: float, status: str, wall_time_s: float) -> Call:
        if len(self.calls) >= self.budget:
            raise RuntimeError("evaluation budget exhausted")
        c = Call(len(self.calls) + 1, config, value, status, wall_time_s)
        self.calls.append(c)
        return c

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            for c in self.calls:
                v = c.value if math.isfinite(c.value) else None
                f.write(json.dumps({"t": c.t, "config": c.config, "value": v, "status": c.status,
                                    "wall_time_s": c.wall_time_s}) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike, budget: Optional[int] = None) -> "EvaluationLedger":
        calls = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                r = json.loads(line)
                v = -math.inf if r["value"] is None else float(r["value"])
                calls.append(Call(r["t"], r["config"], v, r["status"], r["wall_time_s"]))
        return cls(budget if budget is not None else len(calls), calls)


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


class RandomSearch:
    """Uniform sampling in the unit cube; every draw is evaluated."""

    name = "random"

    def __init__(self, dim: int, budget: int, rng: np.random.Generator):
        self.dim = dim
        self.rng = rng

    def suggest(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.rng.random(self.dim)

    def observe(self, x: np.ndarray, value: float) -> None:
        pass


class ECP:
    """Every Call is Precious: uniform proposals filtered by an
    eps-Lipschitz potential-maximizer test with a growing eps."""

    name = "ecp"

    def __init__(self, dim: int, budget: int, rng: np.random.Generator, eps1: float = 1e-2,
                 tau: Optional[float] = None, C: int = 1000, batch: int = 256):
        if eps1 <= 0 or C < 1:
            raise InputError("ECP needs eps1 > 0 and C >= 1")
        self.dim = dim
        self.rng = rng
        self.eps = eps1
        self.tau = tau if tau is not None else max(1.0 + 1.0 / (budget * dim), 1.001)
        if self.tau <= 1:
            raise InputError("ECP needs tau > 1")
        self.C = int(C)
        self.batch = batch
        self.rejections = 0
        self.draws = 0

    def _accept(self, cand: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        ok = np.isfinite(y)
        if not ok.any():
            return np.ones(len(cand), dtype=bool)
        Xf, yf = X[ok], y[ok]
        dist = np.linalg.norm(cand[:, None, :] - Xf[None, :, :], axis=-1)
        return (yf[None, :] + self.eps * dist).min(axis=1) >= yf.max()

    def suggest(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        if len(X) == 0:
            self.draws += 1
            return self.rng.random(self.dim)
        while True:
            # eps is constant until the rejection counter hits C, so a block of
            # draws can be tested at once and the first acceptance taken
            n = min(self.batch, self.C - self.rejections)
            cand = self.rng.random((n, self.dim))
            acc = np.flatnonzero(self._accept(cand, X, y))
            if acc.size:
                k = int(acc[0])
                self.draws += k + 1
                self.rejections = 0
                return cand[k]
            self.draws += n
            self.rejections += n
            if self.rejections >= self.C:
                self.eps *= self.tau
                self.rejections = 0

    def observe(self, x: np.ndarray, value: float) -> None:
        self.eps *= self.tau


STRATEGIES = {"ecp": ECP, "random": RandomSearch}


def optimize(objective: Callable[[dict[str, float]], float], space: HyperParamSpace, budget: int = DEFAULT_BUDGET,
             seed: int = 0, strategy: str = "ecp", **strategy_kwargs) -> EvaluationLedger:
    """Maximize ``objective`` with at most ``budget`` calls.

    An objective that raises or returns a non-finite value is recorded as a
    failed call with value -inf; it still uses up budget.
    """
    if budget < 1:
        raise InputError(f"budget must be >= 1, got {budget}")
    if strategy not in STRATEGIES:
        raise InputError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    rng = np.random.default_rng(seed)
    strat = STRATEGIES[strategy](len(space), budget, rng, **strategy_kwargs)
    ledger = EvaluationLedger(budget)
    X = np.empty((0, len(space)))
    y = np.empty(0)
    for _ in range(budget):
        u = strat.suggest(X, y)
        config = space.decode(u)
        t0 = time.perf_counter()
        try:
            value = float(objective(config))
            status = "ok" if math.isfinite(value) else "failed"
        except Exception as exc:
            log.warning("objective failed on %s: %s", config, exc)
            value, status = -math.inf, "failed"
        if status == "failed":
            value = -math.inf
        ledger.record(config, value, status, time.perf_counter() - t0)
        strat.observe(u, value)
        X = np.vstack([X, u])
        y = np.append(y, value)
    return ledger


TUNE_METRICS = ("f1", "map50")


def tune_backend(backend, golden_train, golden_val, metric: str = "f1", budget: int = DEFAULT_BUDGET,
                 space: Optional[HyperParamSpace] = None, seed: int = 0, parent=None, base_hparams=None,
                 early_stop=None, strategy: str = "ecp", out_dir: Optional[Path] = None,
                 score_cutoff: float = 0.25) -> tuple[dict[str, float], EvaluationLedger]:
    """Search fine-tuning hyperparameters, scoring each candidate by ``metric``
    on the fixed golden validation split.

    With ``parent`` each call fine-tunes from it; without, each call trains on
    golden data from scratch. Returns the best config and the full ledger,
    which is also written under ``out_dir`` when given.
    """
    from geoweak.evaluation import evaluate
    from geoweak.training import EarlyStop, finetune, train_scratch

    if budget < 1:
        raise InputError(f"budget must be >= 1, got {budget}")
    if metric not in TUNE_METRICS:
        raise InputError(f"metric must be one of {TUNE_METRICS}, got {metric!r}")
    if not len(golden_val):
        raise InputError("tuning needs a non-empty validation split")
    space = space or builtin_space(backend.space_id)
    stop = early_stop or EarlyStop()
    base = dict(base_hparams or {})
    gts = {im.id: list(im.boxes) for im in golden_val}

    def objective(config: dict[str, float]) -> float:
        hp = {**base, **config}
        if parent is not None:
            model = finetune(backend, parent, golden_train, golden_val, hp, stop, seed=seed,
                             score_cutoff=score_cutoff)
        else:
            model = train_scratch(backend, golden_train, golden_val, hp, stop, seed=seed, score_cutoff=score_cutoff)
        preds = backend.predict(model.weights_ref, list(golden_val), Path(out_dir or ".") / "tune" / model.run_id)
        return evaluate(preds, gts, score_cutoff=score_cutoff).metrics()[metric]

    ledger = optimize(objective, space, budget, seed, strategy)
    best = ledger.incumbent.config
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ledger.save(out_dir / "ledger.jsonl")
        (out_dir / "best_hparams.json").write_text(json.dumps(best, indent=2))
    return best, ledger
