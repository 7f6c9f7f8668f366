"""Detection metrics: IoU, one-to-one matching, P/R/F1, AP and mAP@50:95."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from geoweak.boxes import BBox
from geoweak.errors import InputError

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
# IoU values within this of a threshold count as reaching it (float noise)
IOU_TOL = 1e-9
DEFAULT_SCORE_CUTOFF = 0.25

Boxes = Mapping[str, Sequence[BBox]]


def iou(a: BBox, b: BBox) -> float:
    if a.area <= 0 or b.area <= 0:
        raise InputError("IoU is undefined for zero-area boxes")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from corners so that identical boxes give exactly 1
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    return min(1.0, inter / (area_a + area_b - inter))


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def _score(b: BBox) -> float:
    return 1.0 if b.score is None else b.score


def match_predictions(preds: Sequence[BBox], gts: Sequence[BBox], iou_thr: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each prediction takes the highest-IoU still-unmatched ground truth of the
    same class whose IoU is at least ``iou_thr``.
    """
    if not 0 < iou_thr < 1:
        raise InputError(f"iou_thr must be in (0, 1), got {iou_thr}")
    order = sorted(range(len(preds)), key=lambda i: -_score(preds[i]))
    taken = [False] * len(gts)
    pairs = []
    for pi in order:
        p = preds[pi]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != p.class_id:
                continue
            v = iou(p, g)
            if v >= iou_thr - IOU_TOL and v > best:
                best, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((pi, best_j, best))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp, pairs=pairs)


def prf1(m: MatchResult) -> tuple[float, float, float]:
    p = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
    r = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def _ap_all_point(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def _ap_11_point(recall: np.ndarray, precision: np.ndarray) -> float:
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        above = precision[recall >= t]
        total += float(above.max()) if above.size else 0.0
    return total / 11.0


def average_precision(preds: Boxes, gts: Boxes, iou_thr: float = 0.5, class_id: Optional[int] = None,
                      interpolation: str = "all_point") -> float:
    """Area under the precision-recall curve, sweeping all predictions
    across images in descending score order."""
    if interpolation not in ("all_point", "11_point"):
        raise InputError(f"unknown interpolation {interpolation!r}")

    def keep(b: BBox) -> bool:
        return class_id is None or b.class_id == class_id

    gt_sel = {k: [g for g in v if keep(g)] for k, v in gts.items()}
    n_gt = sum(len(v) for v in gt_sel.values())
    if n_gt == 0:
        log.warning("no ground-truth boxes%s; AP defined as 0", "" if class_id is None else f" for class {class_id}")
        return 0.0
    flat = [(img, i, p) for img in sorted(preds) for i, p in enumerate(preds[img]) if keep(p)]
    flat.sort(key=lambda t: -_score(t[2]))  # stable: image id, then position, on score ties
    taken = {k: [False] * len(v) for k, v in gt_sel.items()}
    hits = np.zeros(len(flat))
    for n, (img, _, p) in enumerate(flat):
        g_list = gt_sel.get(img, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(g_list):
            if taken[img][j] or g.class_id != p.class_id:
                continue
            v = iou(p, g)
            if v >= iou_thr - IOU_TOL and v > best:
                best, best_j = v, j
        if best_j >= 0:
            taken[img][best_j] = True
            hits[n] = 1.0
    if not flat:
        return 0.0
    ctp = np.cumsum(hits)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(flat) + 1)
    if interpolation == "11_point":
        return _ap_11_point(recall, precision)
    return _ap_all_point(recall, precision)


def _classes(gts: Boxes) -> list[int]:
    return sorted({g.class_id for v in gts.values() for g in v})


def per_class_ap(preds: Boxes, gts: Boxes, thresholds: Sequence[float] = IOU_THRESHOLDS,
                 interpolation: str = "all_point") -> dict[int, dict[float, float]]:
    return {c: {t: average_precision(preds, gts, t, c, interpolation) for t in thresholds} for c in _classes(gts)}


def map_range(preds: Boxes, gts: Boxes, interpolation: str = "all_point") -> tuple[float, float]:
    """(mAP@50, mAP@50:95): class-mean AP at IoU 0.5, and additionally
    averaged over IoU 0.50, 0.55, ..., 0.95."""
    table = per_class_ap(preds, gts, IOU_THRESHOLDS, interpolation)
    if not table:
        log.warning("no ground-truth classes; mAP defined as 0")
        return 0.0, 0.0
    map50 = float(np.mean([aps[0.5] for aps in table.values()]))
    map50_95 = float(np.mean([np.mean(list(aps.values())) for aps in table.values()]))
    return map50, map50_95


@dataclass
class EvalReport:
    ap: dict[int, dict[float, float]]
    precision: float
    recall: float
    f1: float
    map50: float
    map50_95: float
    n_images: int
    regime: Optional[str] = None
    matches: dict[str, MatchResult] = field(default_factory=dict, repr=False)

    def metrics(self) -> dict[str, float]:
        return {"map50": self.map50, "precision": self.precision, "recall": self.recall, "f1": self.f1,
                "map50_95": self.map50_95}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ap"] = {str(c): {f"{t:.2f}": v for t, v in aps.items()} for c, aps in self.ap.items()}
        d["matches"] = {k: {"tp": m.tp, "fp": m.fp, "fn": m.fn, "pairs": m.pairs} for k, m in self.matches.items()}
        return d


def evaluate(preds: Boxes, gts: Boxes, score_cutoff: float = DEFAULT_SCORE_CUTOFF, regime: Optional[str] = None,
             interpolation: str = "all_point") -> EvalReport:
    """Full report over the images in ``gts``.

    P/R/F1 use predictions scoring at least ``score_cutoff`` matched at IoU
    0.5; AP uses every prediction.
    """
    extra = set(preds) - set(gts)
    if extra:
        raise InputError(f"predictions for unknown images: {sorted(extra)[:5]}")
    tp = fp = fn = 0
    matches = {}
    for img in sorted(gts):
        kept = [p for p in preds.get(img, ()) if _score(p) >= score_cutoff]
        m = match_predictions(kept, gts[img], 0.5)
        matches[img] = m
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    p, r, f1 = prf1(MatchResult(tp, fp, fn))
    preds_all = {k: list(preds.get(k, ())) for k in gts}
    ap = per_class_ap(preds_all, gts, IOU_THRESHOLDS, interpolation)
    map50, map50_95 = map_range(preds_all, gts, interpolation)
    return EvalReport(ap, p, r, f1, map50, map50_95, len(gts), regime, matches)


# ---------------------------------------------------------------------------
# prediction files
# ---------------------------------------------------------------------------


def write_predictions(preds: Boxes, path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        for img in sorted(preds):
            for b in preds[img]:
                f.write(json.dumps({"image_id": img, "class_id": b.class_id, "cx": round(b.cx, 6),
                                    "cy": round(b.cy, 6), "w": round(b.w, 6), "h": round(b.h, 6),
                                    "score": None if b.score is None else round(b.score, 6)}) + "\n")
    return path


def read_predictions(path: str | os.PathLike) -> dict[str, list[BBox]]:
    out: dict[str, list[BBox]] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            out.setdefault(r["image_id"], []).append(
                BBox(r["cx"], r["cy"], r["w"], r["h"], int(r["class_id"]), r.get("score")))
    return out


# ---------------------------------------------------------------------------
# regime comparison reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("map50", "precision", "recall", "f1", "map50_95")
COLUMN_TITLES = {"map50": "mAP50", "precision": "Prec", "recall": "Rec", "f1": "F1", "map50_95": "mAP50:95"}


@dataclass(frozen=True)
class ResultRow:
    model: str
    strategy: str
    regime: int
    map50: float
    precision: float
    recall: float
    f1: float
    map50_95: float

    @classmethod
    def from_report(cls, model: str, strategy: str, regime: int, rep: EvalReport) -> "ResultRow":
        return cls(model, strategy, int(regime), **rep.metrics())


def write_results_csv(rows: Iterable[ResultRow], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "strategy", "regime", *REPORT_COLUMNS])
        for r in rows:
            w.writerow([r.model, r.strategy, r.regime, *(f"{getattr(r, c):.3f}" for c in REPORT_COLUMNS)])
    return path


def read_results_csv(path: str | os.PathLike) -> list[ResultRow]:
    with open(path, newline="") as f:
        return [ResultRow(r["model"], r["strategy"], int(r["regime"]), *(float(r[c]) for c in REPORT_COLUMNS))
                for r in csv.DictReader(f)]


def series_by_metric(rows: Sequence[ResultRow]) -> dict[str, dict[str, list[tuple[int, float]]]]:
    """{metric: {"model strategy": [(regime, value), ...]}} sorted by regime."""
    out: dict[str, dict[str, list[tuple[int, float]]]] = {}
    for metric in REPORT_COLUMNS:
        lines: dict[str, list[tuple[int, float]]] = {}
        for r in rows:
            lines.setdefault(f"{r.model} {r.strategy}", []).append((r.regime, getattr(r, metric)))
        out[metric] = {k: sorted(v) for k, v in lines.items()}
    return out


def markdown_table(rows: Sequence[ResultRow]) -> str:
    head = "| Model | Strategy | Regime | " + " | ".join(COLUMN_TITLES[c] for c in REPORT_COLUMNS) + " |"
    sep = "|" + "---|" * (3 + len(REPORT_COLUMNS))
    body = [f"| {r.model} | {r.strategy} | {r.regime} | " + " | ".join(f"{getattr(r, c):.3f}" for c in REPORT_COLUMNS)
            + " |" for r in rows]
    return "\n".join([head, sep, *body]) + "\n"


def report(rows: Sequence[ResultRow], out_dir: str | os.PathLike, plots: bool = True) -> dict[str, Path]:
    """Write the results table (CSV + markdown) and one metric-vs-regime plot per metric."""
    if not rows:
        raise InputError("report needs at least one result")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": write_results_csv(rows, out_dir / "results.csv")}
    md = out_dir / "results.md"
    md.write_text(markdown_table(rows))
    paths["markdown"] = md
    if plots:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for metric, lines in series_by_metric(rows).items():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for label, pts in lines.items():
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=label)
            ax.set_xlabel("golden training images")
            ax.set_ylabel(COLUMN_TITLES[metric])
            ax.set_ylim(0, 1.02)
            ax.legend(fontsize=7)
            fig.tight_layout()
            p = out_dir / f"{metric}_vs_regime.png"
            fig.savefig(p, dpi=100)
            plt.close(fig)
            paths[metric] = p
    return paths
