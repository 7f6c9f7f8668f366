import math
import random

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from geoweak.boxes import BBox
from geoweak.errors import InputError
from geoweak.evaluation import (
    IOU_THRESHOLDS,
    MatchResult,
    ResultRow,
    average_precision,
    evaluate,
    iou,
    map_range,
    markdown_table,
    match_predictions,
    prf1,
    read_predictions,
    read_results_csv,
    report,
    series_by_metric,
    write_predictions,
)
from oracles import brute_force_ap, corners, max_cardinality_tp, raster_iou

box_st = st.builds(lambda cx, cy, w, h: BBox(cx, cy, w, h),
                   st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.02, 0.4), st.floats(0.02, 0.4))


def B(cx, cy, w, h, score=None, cls=0):
    return BBox(cx, cy, w, h, cls, score)


# -- iou ---------------------------------------------------------------------


def test_iou_identity_and_disjoint():
    a = B(0.5, 0.5, 0.2, 0.2)
    assert iou(a, a) == 1.0
    assert iou(a, B(0.1, 0.1, 0.05, 0.05)) == 0.0


def test_iou_half_offset():
    a, b = B(1.0, 1.0, 1.0, 1.0), B(1.5, 1.0, 1.0, 1.0)
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-12)
    assert raster_iou(corners(a), corners(b)) == pytest.approx(1 / 3, abs=1e-3)


def test_iou_zero_area():
    with pytest.raises(InputError):
        BBox(0.5, 0.5, 0.0, 0.1)


@given(box_st, box_st)
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-15)


@given(box_st, box_st, st.floats(0.0, 0.2))
def test_iou_monotone_under_dilation_toward_other(a, b, grow):
    # extend a's right edge toward b when b lies to the right
    if b.x0 <= a.x1 or grow == 0:
        return
    step = min(grow, b.x0 + b.w / 2 - a.x1)
    bigger = BBox.from_corners(a.x0, a.y0, a.x1 + step, a.y1)
    assert iou(bigger, b) >= iou(a, b) - 1e-15


# the raster oracle's error grows with perimeter / area, so keep boxes chunky
chunky_st = st.builds(lambda cx, cy, w, h: BBox(cx, cy, w, h),
                      st.floats(0.2, 0.8), st.floats(0.2, 0.8), st.floats(0.1, 0.4), st.floats(0.1, 0.4))


@given(chunky_st, chunky_st)
def test_iou_matches_raster(a, b):
    assert iou(a, b) == pytest.approx(raster_iou(corners(a), corners(b), 1000), abs=1e-2)


# -- matching ----------------------------------------------------------------


def test_one_exact_match():
    g = B(0.5, 0.5, 0.2, 0.2)
    m = match_predictions([g.with_score(0.9)], [g])
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)


def test_two_preds_one_gt():
    g = B(0.5, 0.5, 0.2, 0.2)
    m = match_predictions([B(0.5, 0.5, 0.2, 0.2, 0.9), B(0.51, 0.5, 0.2, 0.2, 0.8)], [g])
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)
    assert m.pairs[0][0] == 0


def test_class_must_agree():
    g = B(0.5, 0.5, 0.2, 0.2, cls=1)
    m = match_predictions([B(0.5, 0.5, 0.2, 0.2, 0.9, cls=0)], [g])
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_threshold_inclusive():
    # IoU exactly 0.5: 0.2x0.2 GT, pred shares half its width
    g = B(0.5, 0.5, 0.2, 0.2)
    p = B(0.5, 0.5, 0.1, 0.2, 0.9)
    assert iou(p, g) == pytest.approx(0.5, abs=1e-12)
    assert match_predictions([p], [g], 0.5).tp == 1


def test_iou_threshold_domain():
    with pytest.raises(InputError):
        match_predictions([], [], 1.0)


def test_greedy_close_to_optimal():
    rng = random.Random(0)
    disagreements = 0
    for _ in range(300):
        gts = [B(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3))
               for _ in range(rng.randint(0, 4))]
        preds = [B(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3),
                   rng.random()) for _ in range(rng.randint(0, 4))]
        greedy = match_predictions(preds, gts, 0.3).tp
        best = max_cardinality_tp([corners(p) for p in preds], [corners(g) for g in gts], 0.3)
        assert best - 1 <= greedy <= best
        disagreements += greedy != best
    assert disagreements < 30


# -- prf1 --------------------------------------------------------------------


def test_prf1_examples():
    assert prf1(MatchResult(1, 0, 0)) == (1.0, 1.0, 1.0)
    assert prf1(MatchResult(0, 5, 3)) == (0.0, 0.0, 0.0)
    p, r, f = prf1(MatchResult(3, 1, 2))
    assert (p, r) == (0.75, 0.6)
    assert f == pytest.approx(2 * 0.75 * 0.6 / 1.35, abs=1e-15)
    assert f == pytest.approx(0.666667, abs=1e-6)


def test_prf1_conventions():
    assert prf1(MatchResult(0, 0, 0)) == (0.0, 0.0, 0.0)
    assert prf1(MatchResult(0, 0, 4)) == (0.0, 0.0, 0.0)
    assert prf1(MatchResult(0, 3, 0)) == (0.0, 0.0, 0.0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_prf1_finite(tp, fp, fn):
    out = prf1(MatchResult(tp, fp, fn))
    assert all(math.isfinite(v) and 0 <= v <= 1 for v in out)


# -- AP ----------------------------------------------------------------------


def test_ap_single_perfect():
    g = B(0.5, 0.5, 0.2, 0.2)
    assert average_precision({"a": [g.with_score(0.9)]}, {"a": [g]}) == 1.0


def test_ap_hit_then_miss():
    g = B(0.5, 0.5, 0.2, 0.2)
    preds = {"a": [B(0.5, 0.5, 0.2, 0.2, 0.9), B(0.1, 0.1, 0.05, 0.05, 0.8)]}
    assert average_precision(preds, {"a": [g]}) == 1.0


def test_ap_miss_then_hit():
    g = B(0.5, 0.5, 0.2, 0.2)
    preds = {"a": [B(0.1, 0.1, 0.05, 0.05, 0.9), B(0.5, 0.5, 0.2, 0.2, 0.8)]}
    assert average_precision(preds, {"a": [g]}) == 0.5


def test_ap_no_gt_is_zero(caplog):
    assert average_precision({"a": [B(0.5, 0.5, 0.2, 0.2, 0.9)]}, {"a": []}) == 0.0
    assert "AP defined as 0" in caplog.text


def test_ap_eleven_point():
    g = B(0.5, 0.5, 0.2, 0.2)
    preds = {"a": [B(0.1, 0.1, 0.05, 0.05, 0.9), B(0.5, 0.5, 0.2, 0.2, 0.8)]}
    # precision at every recall level in [0, 1] is 0.5
    assert average_precision(preds, {"a": [g]}, interpolation="11_point") == pytest.approx(0.5)
    with pytest.raises(InputError):
        average_precision(preds, {"a": [g]}, interpolation="coco")


def test_map_perfect():
    gts = {"a": [B(0.3, 0.3, 0.2, 0.2)], "b": [B(0.6, 0.6, 0.1, 0.3, cls=1)]}
    preds = {k: [g.with_score(0.9) for g in v] for k, v in gts.items()}
    assert map_range(preds, gts) == (1.0, 1.0)


def test_map_shrunk_boxes_iou_055():
    g = B(0.5, 0.5, 0.4, 0.4)
    p = B(0.5, 0.5, 0.4, 0.4 * 0.55, 0.9)  # IoU = 0.55
    assert iou(p, g) == pytest.approx(0.55, abs=1e-12)
    per_thr = [brute_force_ap({"a": [p]}, {"a": [g]}, t, 0) for t in IOU_THRESHOLDS]
    assert per_thr == [1, 1] + [0] * 8
    map50, map50_95 = map_range({"a": [p]}, {"a": [g]})
    assert map50 == 1.0 and map50_95 == pytest.approx(0.2, abs=1e-12)


def test_single_class_map_equals_ap():
    rng = random.Random(2)
    gts = {f"i{k}": [B(rng.uniform(.2, .8), rng.uniform(.2, .8), .2, .2) for _ in range(2)] for k in range(3)}
    preds = {k: [B(g.cx + rng.uniform(-.05, .05), g.cy, .2, .2, rng.random()) for g in v] for k, v in gts.items()}
    assert map_range(preds, gts)[0] == average_precision(preds, gts, 0.5, class_id=0)


@st.composite
def scored_instances(draw):
    n_img = draw(st.integers(1, 3))
    gts, preds = {}, {}
    for i in range(n_img):
        gts[f"i{i}"] = draw(st.lists(box_st, max_size=3))
        preds[f"i{i}"] = [b.with_score(draw(st.floats(0.01, 1.0))) for b in draw(st.lists(box_st, max_size=3))]
    return preds, gts


@given(scored_instances(), st.floats(0.1, 5.0), st.floats(-3, 3))
def test_ap_invariant_under_monotone_rescaling(inst, a, b):
    preds, gts = inst
    rescaled = {k: [p.with_score(a * p.score ** 3 + b) for p in v] for k, v in preds.items()}
    # in floats the cubic can merge scores a few ulps apart, creating ties
    pairs = sorted((p.score, q.score) for k in preds for p, q in zip(preds[k], rescaled[k]))
    assume(all(x[1] < y[1] for x, y in zip(pairs, pairs[1:]) if x[0] < y[0]))
    assert average_precision(preds, gts) == pytest.approx(average_precision(rescaled, gts), abs=1e-12)


@given(scored_instances())
def test_map50_95_never_exceeds_map50(inst):
    preds, gts = inst
    if not any(gts.values()):
        return
    m50, m5095 = map_range(preds, gts)
    assert m5095 <= m50 + 1e-12


# -- evaluate ----------------------------------------------------------------


def test_evaluate_cutoff_only_affects_prf():
    g = B(0.5, 0.5, 0.2, 0.2)
    preds = {"a": [g.with_score(0.1)]}
    rep = evaluate(preds, {"a": [g]}, score_cutoff=0.25)
    assert rep.recall == 0.0 and rep.map50 == 1.0
    assert evaluate(preds, {"a": [g]}, score_cutoff=0.0).recall == 1.0


def test_evaluate_unknown_image():
    with pytest.raises(InputError):
        evaluate({"zzz": []}, {"a": []})


def test_predictions_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    preds = {f"img{i}": [BBox(*rng.uniform(0.1, 0.5, 4), int(rng.integers(0, 3)), float(rng.random()))
                         for _ in range(3)] for i in range(5)}
    preds["empty"] = []
    back = read_predictions(write_predictions(preds, tmp_path / "p.jsonl"))
    for k, v in preds.items():
        assert len(back.get(k, [])) == len(v)
        for a, b in zip(v, back.get(k, [])):
            assert a.class_id == b.class_id
            assert max(abs(a.cx - b.cx), abs(a.cy - b.cy), abs(a.w - b.w), abs(a.h - b.h),
                       abs(a.score - b.score)) <= 1e-6


# -- reporting ---------------------------------------------------------------


def rows(n_strat=3, regimes=(50, 100, 300, 443)):
    rng = random.Random(1)
    return [ResultRow("yolo", s, r, *(round(rng.random(), 6) for _ in range(5)))
            for s in ("golden", "auto", "two_stage")[:n_strat] for r in regimes]


def test_report_single_row(tmp_path):
    paths = report(rows(1, (50,)), tmp_path)
    assert len(paths["markdown"].read_text().strip().splitlines()) == 3  # header, rule, one row
    assert len(read_results_csv(paths["csv"])) == 1


def test_report_plot_shapes(tmp_path):
    rs = rows()
    series = series_by_metric(rs)
    assert set(series) == {"map50", "precision", "recall", "f1", "map50_95"}
    for lines in series.values():
        assert sum(len(pts) for pts in lines.values()) == 12
    paths = report(rs, tmp_path)
    for metric in series:
        assert paths[metric].exists() and paths[metric].stat().st_size > 0


def test_report_csv_three_decimals(tmp_path):
    rs = rows()
    back = read_results_csv(report(rs, tmp_path, plots=False)["csv"])
    for a, b in zip(rs, back):
        for c in ("map50", "precision", "recall", "f1", "map50_95"):
            assert getattr(b, c) == round(getattr(a, c), 3)
    assert "mAP50" in markdown_table(rs)


def test_report_needs_rows(tmp_path):
    with pytest.raises(InputError):
        report([], tmp_path)
