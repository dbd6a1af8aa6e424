import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sddkit.dataset import Dataset, DatasetError, ImageRecord, ObjectLabel
from sddkit.evaluation import (
    ap_from_pr,
    average_precision,
    load_detections_jsonl,
    match_detections,
    mean_ap,
    pr_curve,
)
from sddkit.geometry import Box, Detection


def _det(box, cat, conf):
    return Detection(Box(*box), cat, conf)


def _ds(*images):
    return Dataset([
        ImageRecord(f"{i}.png", 200, 200, [ObjectLabel(c, Box(*b)) for c, b in labels])
        for i, labels in enumerate(images)
    ])


def test_match_examples():
    gt = np.array([[0, 0, 10, 10]])
    m = match_detections([_det((0, 0, 10, 9), 0, 0.5)], gt, [0])
    assert m.tp.tolist() == [True]
    m = match_detections([_det((0, 0, 10, 10), 0, 0.4), _det((0, 0, 10, 9), 0, 0.9)], gt, [0])
    assert m.order == [1, 0] and m.tp.tolist() == [True, False]
    m = match_detections([_det((0, 0, 10, 10), 1, 0.9)], gt, [0])
    assert m.tp.tolist() == [False] and m.false_negatives == 1


def test_ap_hand_fixture():
    ds = _ds([(0, (0, 0, 10, 10)), (0, (50, 50, 60, 60))])
    dets = [[_det((0, 0, 10, 10), 0, 0.9), _det((100, 100, 110, 110), 0, 0.8), _det((50, 50, 60, 60), 0, 0.7)]]
    res = mean_ap(dets, ds)
    assert res.map[0.5] == pytest.approx(0.8333, abs=1e-4)
    assert res.map[0.5] == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-6)
    rec, prec = res.curves[(0, 0.5)]
    assert rec.tolist() == [0.5, 0.5, 1.0]
    assert prec == pytest.approx([1.0, 0.5, 2 / 3])


def test_ap_edge_cases():
    ds = _ds([(0, (0, 0, 10, 10))])
    assert mean_ap([[_det((0, 0, 10, 10), 0, 0.5)]], ds).map[0.5] == 1.0
    assert mean_ap([[]], ds).map[0.5] == 0.0


def test_map_is_mean_over_present_categories():
    ds = _ds([(0, (0, 0, 10, 10)), (2, (50, 50, 60, 60))])
    res = mean_ap([[_det((0, 0, 10, 10), 0, 0.9)]], ds)
    assert res.per_class[0][0.5] == 1.0 and res.per_class[2][0.5] == 0.0
    assert set(res.per_class) == {0, 2}
    assert res.map[0.5] == 0.5


def test_errors():
    with pytest.raises(ValueError, match="no objects"):
        mean_ap([[]], _ds([]))
    with pytest.raises(ValueError):
        mean_ap([], _ds([(0, (0, 0, 1, 1))]))
    with pytest.raises(ValueError, match="no ground truth"):
        average_precision([match_detections([], np.zeros((0, 4)), [])], 0)


def _brute_ap(conf, tp, n_gt):
    """Interpolated AP by recall step: each true positive adds 1/n_gt of
    recall, weighted by the best precision reached at that recall or beyond."""
    order = sorted(range(len(conf)), key=lambda i: -conf[i])
    hits = 0
    points = []
    for k, i in enumerate(order, start=1):
        hits += bool(tp[i])
        points.append((hits / n_gt, hits / k))
    total = 0.0
    for level in range(1, n_gt + 1):
        r = level / n_gt
        best = max((p for rr, p in points if rr >= r - 1e-12), default=0.0)
        total += best / n_gt
    return total


@settings(max_examples=200)
@given(st.integers(1, 8), st.lists(st.tuples(st.floats(0, 1), st.booleans()), max_size=12))
def test_ap_matches_brute_force(n_gt, rows):
    tps = sum(t for _, t in rows)
    if tps > n_gt:
        return
    conf = np.array([c for c, _ in rows])
    tp = np.array([t for _, t in rows], dtype=bool)
    order = sorted(range(len(conf)), key=lambda i: -conf[i])
    r, p = pr_curve(conf[order], tp[order], n_gt)
    ap = ap_from_pr(r, p) if len(conf) else 0.0
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(_brute_ap(conf, tp, n_gt), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_map_invariant_to_detection_order(seed):
    rng = np.random.default_rng(seed)
    images = []
    dets = []
    for _ in range(3):
        labels = []
        for _ in range(int(rng.integers(1, 4))):
            x, y = rng.uniform(0, 150, 2)
            labels.append((int(rng.integers(0, 2)), (x, y, x + rng.uniform(5, 40), y + rng.uniform(5, 40))))
        images.append(labels)
        row = []
        for c, b in labels:
            jitter = rng.normal(0, 4, 4)
            row.append(_det(tuple(np.array(b) + jitter), c if rng.random() < 0.8 else 1 - c, float(rng.random())))
        dets.append(row)
    ds = _ds(*images)
    ref = mean_ap(dets, ds)
    shuffled = [[row[i] for i in rng.permutation(len(row))] for row in dets]
    res = mean_ap(shuffled, ds)
    assert res.map == ref.map
    assert all(0.0 <= v <= 1.0 for v in res.map.values())


def test_detection_jsonl_loading(tmp_path):
    ds = _ds([(0, (0, 0, 10, 10))], [(1, (5, 5, 20, 20))])
    p = tmp_path / "dets.jsonl"
    p.write_text(json.dumps({"image": "1.png", "detections": [{"category": "pop-out", "bbox": [5, 5, 20, 20], "score": 0.7}]}) + "\n")
    dets = load_detections_jsonl(p, ds)
    assert dets[0] == [] and dets[1][0].category == 1
    p.write_text(json.dumps({"image": "9.png", "detections": []}) + "\n")
    with pytest.raises(ValueError, match="not in ground truth"):
        load_detections_jsonl(p, ds)
    p.write_text("{}\n")
    with pytest.raises(DatasetError):
        load_detections_jsonl(p, ds)
