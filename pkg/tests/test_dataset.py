import json
import math
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sddkit.dataset import (
    DEFAULT_CATEGORIES,
    Dataset,
    DatasetError,
    ImageRecord,
    ObjectLabel,
    compute_stats,
    hellinger,
    histogram_edges,
    holdout_split,
    kfold_split,
    load_dataset,
    load_jsonl,
    load_voc_xml,
    rank_source_classes,
    save_jsonl,
    save_voc_xml,
)
from sddkit.geometry import Box

FIXTURES = Path(__file__).parent / "fixtures"


def _record(name, labels, w=100, h=80):
    return ImageRecord(name, w, h, [ObjectLabel(c, Box(*b)) for c, b in labels])


@st.composite
def datasets(draw):
    n = draw(st.integers(0, 6))
    records = []
    for i in range(n):
        w, h = draw(st.integers(1, 400)), draw(st.integers(1, 400))
        labels = []
        for _ in range(draw(st.integers(0, 4))):
            x0 = draw(st.floats(0, w, allow_nan=False))
            y0 = draw(st.floats(0, h, allow_nan=False))
            x1 = draw(st.floats(x0, w, allow_nan=False))
            y1 = draw(st.floats(y0, h, allow_nan=False))
            labels.append(ObjectLabel(draw(st.integers(0, 3)), Box(x0, y0, x1, y1)))
        records.append(ImageRecord(f"img_{i}.png", w, h, labels))
    return Dataset(records)


@settings(max_examples=40)
@given(datasets())
def test_jsonl_round_trip_is_lossless(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    save_jsonl(ds, path)
    assert load_jsonl(path) == ds


def test_voc_fixture():
    rec = load_voc_xml(FIXTURES / "crack.xml")
    assert (rec.image, rec.width, rec.height) == ("wall_001.jpg", 64, 48)
    assert len(rec.labels) == 1
    assert rec.labels[0] == ObjectLabel(0, Box(10, 20, 30, 40))


def test_voc_missing_bndbox(tmp_path):
    text = (FIXTURES / "crack.xml").read_text()
    start, end = text.index("<bndbox>"), text.index("</bndbox>") + len("</bndbox>")
    bad = tmp_path / "bad.xml"
    bad.write_text(text[:start] + text[end:])
    with pytest.raises(DatasetError, match="bndbox"):
        load_voc_xml(bad)


def test_voc_unknown_category_lists_known_names(tmp_path):
    bad = tmp_path / "bad.xml"
    bad.write_text((FIXTURES / "crack.xml").read_text().replace(">crack<", ">rust<"))
    with pytest.raises(DatasetError, match="rust.*crack.*pop-out"):
        load_voc_xml(bad)


def test_voc_parse_error_carries_line(tmp_path):
    bad = tmp_path / "bad.xml"
    bad.write_text("<annotation>\n<size>\n</annotation>\n")
    with pytest.raises(DatasetError) as err:
        load_voc_xml(bad)
    assert err.value.line == 3 and err.value.path == str(bad)


def test_voc_round_trip(tmp_path):
    rec = _record("a.png", [(2, (1, 2, 30, 40)), (3, (5, 5, 6, 7))])
    save_voc_xml(rec, DEFAULT_CATEGORIES, tmp_path / "a.xml")
    ds = load_dataset(tmp_path)
    assert ds.records == [rec]


def test_jsonl_errors_carry_line(tmp_path):
    p = tmp_path / "d.jsonl"
    good = {"image": "a.png", "width": 10, "height": 10, "objects": []}
    p.write_text(json.dumps(good) + "\n{not json\n")
    with pytest.raises(DatasetError) as err:
        load_jsonl(p)
    assert err.value.line == 2
    p.write_text(json.dumps({**good, "objects": [{"category": "mold", "bbox": [0, 0, 1, 1]}]}) + "\n")
    with pytest.raises(DatasetError, match="known categories"):
        load_jsonl(p)


def test_out_of_bounds_box_is_clamped_with_warning(tmp_path):
    p = tmp_path / "d.jsonl"
    obj = {"image": "a.png", "width": 10, "height": 10, "objects": [{"category": "crack", "bbox": [-2, 3, 12, 8]}]}
    p.write_text(json.dumps(obj) + "\n")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = load_jsonl(p)
    assert caught and "clamped" in str(caught[0].message)
    assert ds.records[0].labels[0].box == Box(0, 3, 10, 8)


def test_holdout_sizes_and_determinism():
    ds = Dataset([_record(f"{i}.png", [(0, (0, 0, 5, 5))]) for i in range(10)])
    train, test = holdout_split(ds, 0.8, seed=4)
    assert (len(train), len(test)) == (8, 2)
    assert {r.image for r in train.records} | {r.image for r in test.records} == {r.image for r in ds.records}
    assert not {r.image for r in train.records} & {r.image for r in test.records}
    assert holdout_split(ds, 0.8, seed=4) == (train, test)
    with pytest.raises(ValueError):
        holdout_split(ds, 1.0)


def test_kfold_stratified_fixture():
    recs = [_record(f"a{i}.png", [(0, (0, 0, 5, 5))]) for i in range(5)]
    recs += [_record(f"b{i}.png", [(1, (0, 0, 5, 5))]) for i in range(5)]
    ds = Dataset(recs)
    folds = kfold_split(ds, 5, seed=1)
    for fold in folds:
        assert sorted(ds.records[i].dominant_category() for i in fold) == [0, 1]
    assert kfold_split(ds, 5, seed=1) == folds


@given(st.integers(5, 60), st.integers(2, 5), st.integers(0, 1000))
def test_kfold_partitions_every_record(n, k, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset([_record(f"{i}.png", [(int(rng.integers(4)), (0, 0, 5, 5))]) for i in range(n)])
    folds = kfold_split(ds, k, seed)
    flat = sorted(i for f in folds for i in f)
    assert flat == list(range(n))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_kfold_too_few_images():
    with pytest.raises(ValueError, match="folds"):
        kfold_split(Dataset([_record("a.png", [])]), 5)


def test_relative_area_fixture():
    ds = Dataset([_record("a.png", [(0, (0, 0, 64, 48))], w=1280, h=960)])
    stats = compute_stats(ds)
    assert stats.median_relative_area == pytest.approx(0.0025, abs=1e-12)
    assert stats.area_quantiles[0.0] == stats.area_quantiles[1.0]


def test_median_midpoint_rule():
    ds = Dataset([_record("a.png", [(0, (0, 0, 10, 10)), (1, (0, 0, 20, 10))], w=100, h=100)])
    assert compute_stats(ds).median_relative_area == pytest.approx(0.015)


@settings(max_examples=40)
@given(datasets())
def test_stats_fractions_and_mass(ds):
    if ds.num_labels == 0:
        with pytest.raises(ValueError):
            compute_stats(ds)
        return
    s = compute_stats(ds)
    assert s.counts.sum() == ds.num_labels
    assert s.fractions.sum() == pytest.approx(1.0, abs=1e-9)
    assert s.histogram.sum() == pytest.approx(1.0, abs=1e-9)


def test_histogram_grid():
    scale, aspect = histogram_edges()
    assert len(scale) == len(aspect) == 17
    assert scale[0] == pytest.approx(1e-4) and scale[-1] == pytest.approx(1.0)
    assert aspect[0] == pytest.approx(1 / 16) and aspect[-1] == pytest.approx(16)


def test_hellinger_bounds():
    p = np.array([0.5, 0.5, 0, 0])
    q = np.array([0, 0, 0.5, 0.5])
    assert hellinger(p, p) == 0.0
    assert hellinger(p, q) == pytest.approx(1.0)
    r = np.array([0.25, 0.25, 0.25, 0.25])
    assert hellinger(p, r) == pytest.approx(hellinger(r, p))
    assert hellinger(p, r) == pytest.approx(math.sqrt(1 - math.sqrt(0.5)))


def test_rank_source_classes():
    target = Dataset([_record("t.png", [(0, (0, 0, 10, 10))], w=100, h=100)])
    source = Dataset([
        _record("s.png", [(0, (0, 0, 80, 5)), (1, (0, 0, 10, 10)), (2, (0, 0, 10, 10))], w=100, h=100)
    ])
    ranked = rank_source_classes(source, target)
    assert ranked[0] == (1, 0.0) and ranked[1] == (2, 0.0)  # tie broken by id
    assert ranked[2][0] == 0 and ranked[2][1] == pytest.approx(1.0)


def test_rank_source_classes_rejects_mismatched_grid():
    ds = Dataset([_record("t.png", [(0, (0, 0, 10, 10))], w=100, h=100)])
    tgt = compute_stats(ds)
    src = compute_stats(ds)
    src.scale_edges = src.scale_edges * 2
    with pytest.raises(ValueError, match="bin grid"):
        rank_source_classes({0: src}, tgt)


def test_dataset_rejects_out_of_range_category():
    with pytest.raises(DatasetError):
        Dataset([_record("a.png", [(7, (0, 0, 1, 1))])])
