import logging
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from geoweak.autolabel import AutolabelOutcome, Reason
from geoweak.boxes import BBox
from geoweak.dataset import (
    REGIMES,
    Dataset,
    LabeledImage,
    Provenance,
    RegimeSpec,
    Split,
    assemble_auto,
    format_label_line,
    make_regime,
    parse_label_line,
    read_labels,
    split,
    split_overlap,
    write_labels,
)
from geoweak.errors import InputError
from geoweak.synthetic import golden_dataset


def labeled(i):
    return AutolabelOutcome.labeled(f"s{i}", BBox(0.5, 0.5, 0.1, 0.1))


def rejected(i):
    return AutolabelOutcome.rejected(f"s{i}", Reason.centroid_too_far)


def images(n, prefix="x"):
    return Dataset(tuple(LabeledImage(f"{prefix}{i:03d}", f"{prefix}{i}.png") for i in range(n)))


# -- assemble_auto -----------------------------------------------------------


def test_assemble_excludes_rejected():
    ds = assemble_auto([labeled(0), labeled(1), labeled(2), rejected(3), rejected(4)], ["n0", "n1"])
    assert len(ds) == 5
    assert sum(1 for im in ds if im.boxes) == 3
    assert all(im.provenance is Provenance.auto for im in ds)
    assert ds.summary["school_rejected"] == 2


def test_assemble_negatives_only_warns(caplog):
    with caplog.at_level(logging.WARNING):
        ds = assemble_auto([rejected(0)], ["n0", "n1"])
    assert len(ds) == 2 and not any(im.is_school for im in ds)
    assert "negatives only" in caplog.text


def test_assemble_scaled_auto_counts(tmp_path):
    # 1/100 of 12000 candidates -> 87 labeled school + 30 negatives = 117
    outcomes = [labeled(i) for i in range(87)] + [rejected(i) for i in range(87, 120)]
    ds = assemble_auto(outcomes, [f"n{i}" for i in range(30)])
    assert len(ds) == 117 and ds.summary["school_labeled"] == 87 and ds.summary["non_school"] == 30
    manifest = write_labels(ds, tmp_path)
    assert len(list((tmp_path / "labels").glob("*.txt"))) == 117
    assert len(manifest.read_text().splitlines()) == 117


def test_assemble_excludes_golden_ids():
    ds = assemble_auto([labeled(0), labeled(1)], ["n0"], exclude={"s1", "n0"})
    assert ds.ids() == ["s0"] and ds.summary["excluded"] == 2


def test_non_school_cannot_have_boxes():
    with pytest.raises(InputError):
        LabeledImage("a", "a.png", (BBox(0.5, 0.5, 0.1, 0.1),), is_school=False)


# -- split -------------------------------------------------------------------


def test_split_sizes_and_determinism():
    ds = images(10)
    a, b = split(ds, (0.8, 0.1, 0.1), seed=7), split(ds, (0.8, 0.1, 0.1), seed=7)
    assert [len(a.by_split(s)) for s in (Split.train, Split.val, Split.test)] == [8, 1, 1]
    assert a == b


def test_split_other_seed_same_sizes():
    ds = images(10)
    a, b = split(ds, seed=7), split(ds, seed=8)
    assert [len(a.by_split(s)) for s in Split] == [len(b.by_split(s)) for s in Split]


def test_split_ignores_input_order():
    ds = images(30)
    rev = Dataset(tuple(reversed(ds.images)))
    a, b = split(ds, seed=1), split(rev, seed=1)
    assert {im.id: im.split for im in a} == {im.id: im.split for im in b}


def test_split_duplicate_ids():
    ds = images(3) + images(1)
    with pytest.raises(InputError):
        split(ds)


def test_split_bad_fractions():
    with pytest.raises(InputError):
        split(images(3), (0.5, 0.5, 0.1))


@given(st.integers(0, 80), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_split_partition(n, a, b, seed):
    lo, hi = sorted((a, b))
    fr = (lo, hi - lo, 1 - hi)
    ds = images(n)
    out = split(ds, fr, seed)
    parts = [set(out.by_split(s).ids()) for s in (Split.train, Split.val, Split.test)]
    assert set().union(*parts) == set(ds.ids())
    assert sum(len(p) for p in parts) == n  # pairwise disjoint
    for p, f in zip(parts, fr):
        assert abs(len(p) - f * n) < 1 + 1e-9


# -- regimes -----------------------------------------------------------------


def pool443():
    return golden_dataset((288, 155), (0, 0), (0, 0), seed=3).by_split(Split.train)


@pytest.mark.parametrize("n,school,non", [(50, 32, 18), (100, 65, 35), (300, 195, 105), (443, 288, 155)])
def test_regime_compositions(n, school, non):
    assert (REGIMES[n].school, REGIMES[n].non_school) == (school, non)
    sub = make_regime(pool443(), REGIMES[n], seed=0)
    assert sum(im.is_school for im in sub) == school
    assert sum(not im.is_school for im in sub) == non


def test_regimes_nest():
    pool = pool443()
    for seed in range(5):
        sets = [set(make_regime(pool, REGIMES[n], seed).ids()) for n in (50, 100, 300, 443)]
        assert sets[0] <= sets[1] <= sets[2] <= sets[3]


def test_regime_deficit_named():
    pool = golden_dataset((5, 10), (0, 0), (0, 0))
    with pytest.raises(InputError, match="4 school"):
        make_regime(pool, RegimeSpec(10, 9, 1))


def test_regime_spec_must_add_up():
    with pytest.raises(InputError):
        RegimeSpec(50, 30, 18)


# -- separation --------------------------------------------------------------


def test_split_overlap_detects_leak():
    auto = split(images(20, "a"), seed=0)
    golden = golden_dataset((10, 5), (3, 2), (4, 1))
    assert split_overlap(auto, golden) == set()
    leaked = Dataset((LabeledImage(golden.images[0].id, "p.png", split=Split.test),))
    assert split_overlap(auto, golden, leaked) == {golden.images[0].id}


# -- label files -------------------------------------------------------------


def test_label_line_format():
    assert format_label_line(BBox(0.45, 0.50, 0.20, 0.20, 0)) == "0 0.450000 0.500000 0.200000 0.200000"
    assert parse_label_line("1 0.1 0.2 0.3 0.4") == BBox(0.1, 0.2, 0.3, 0.4, 1)
    with pytest.raises(InputError):
        parse_label_line("0 0.1 0.2")


def test_labels_round_trip(tmp_path):
    rng = random.Random(0)
    ims = []
    for i in range(40):
        boxes = tuple(BBox(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.01, 0.2),
                           rng.uniform(0.01, 0.2), rng.randint(0, 2)) for _ in range(rng.randint(0, 4)))
        ims.append(LabeledImage(f"i{i}", f"img/{i}.png", boxes, Provenance.golden, Split.val,
                                is_school=bool(boxes) or i % 3 == 0))
    ds = Dataset(tuple(ims))
    back = read_labels(write_labels(ds, tmp_path))
    assert back.ids() == ds.ids()
    for a, b in zip(ds, back):
        assert (a.image_path, a.provenance, a.split, a.is_school) == (b.image_path, b.provenance, b.split, b.is_school)
        assert len(a.boxes) == len(b.boxes)
        for x, y in zip(a.boxes, b.boxes):
            assert x.class_id == y.class_id
            assert max(abs(x.cx - y.cx), abs(x.cy - y.cy), abs(x.w - y.w), abs(x.h - y.h)) <= 1e-6
    assert (tmp_path / "labels" / "i1.txt").exists()


def test_box_free_images_get_empty_files(tmp_path):
    write_labels(images(2), tmp_path)
    assert (tmp_path / "labels" / "x000.txt").read_text() == ""


def test_manifest_box_count_mismatch(tmp_path):
    ds = Dataset((LabeledImage("a", "a.png", (BBox(0.5, 0.5, 0.1, 0.1),)),))
    manifest = write_labels(ds, tmp_path)
    (tmp_path / "labels" / "a.txt").write_text("")
    with pytest.raises(InputError):
        read_labels(manifest)


def test_digest_is_order_free():
    ds = images(5)
    assert ds.digest() == Dataset(tuple(reversed(ds.images))).digest()
    assert ds.digest() != images(4).digest()
