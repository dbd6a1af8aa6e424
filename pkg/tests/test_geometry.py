import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sddkit.geometry import (
    Box,
    Detection,
    iou,
    iou_matrix,
    letterbox_transform,
    nms,
    wh_iou,
    wh_iou_matrix,
)

coord = st.floats(0, 500, allow_nan=False)


@st.composite
def boxes(draw, min_size=0.0):
    x0, y0 = draw(coord), draw(coord)
    w = draw(st.floats(min_size, 300))
    h = draw(st.floats(min_size, 300))
    return Box(x0, y0, x0 + w, y0 + h)


def test_iou_fixture_one_seventh():
    # intersection 1, union 4 + 4 - 1
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-9)


def test_iou_identity_and_disjoint():
    assert iou((1, 2, 5, 9), (1, 2, 5, 9)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0  # empty union


def test_wh_iou_examples():
    assert wh_iou((2, 2), (2, 2)) == 1.0
    assert wh_iou((2, 2), (4, 4)) == 0.25
    assert wh_iou((0, 0), (4, 4)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)


@given(boxes(min_size=1e-3))
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100), st.floats(0, 100))
def test_wh_iou_equals_corner_anchored_iou(w1, h1, w2, h2):
    assert wh_iou((w1, h1), (w2, h2)) == pytest.approx(iou((0, 0, w1, h1), (0, 0, w2, h2)), abs=1e-12)


def test_matrices_match_scalar_versions():
    rng = np.random.default_rng(3)
    a = np.sort(rng.uniform(0, 50, (5, 2, 2)), axis=1).transpose(0, 2, 1).reshape(5, 4)[:, [0, 2, 1, 3]]
    b = np.sort(rng.uniform(0, 50, (4, 2, 2)), axis=1).transpose(0, 2, 1).reshape(4, 4)[:, [0, 2, 1, 3]]
    m = iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)
    wh1, wh2 = rng.uniform(1, 20, (6, 2)), rng.uniform(1, 20, (3, 2))
    wm = wh_iou_matrix(wh1, wh2)
    assert wm[2, 1] == pytest.approx(wh_iou(wh1[2], wh2[1]))


def _det(box, cat, conf):
    return Detection(Box(*box), cat, conf)


def test_nms_suppresses_same_category_overlap():
    a = _det((0, 0, 10, 10), 0, 0.9)
    b = _det((0, 0, 10, 9), 0, 0.8)  # IoU 0.9
    assert nms([b, a], 0.5) == [a]


def test_nms_keeps_other_categories_and_empty():
    a = _det((0, 0, 10, 10), 0, 0.9)
    b = _det((0, 0, 10, 10), 1, 0.8)
    assert nms([a, b], 0.5) == [a, b]
    assert nms([], 0.5) == []


def test_nms_tie_break_is_deterministic():
    a = _det((5, 0, 10, 10), 0, 0.5)
    b = _det((4, 0, 10, 10), 0, 0.5)
    # equal confidence: lower xmin wins
    assert nms([a, b], 0.5) == nms([b, a], 0.5) == [b]


@settings(max_examples=60)
@given(st.lists(st.tuples(boxes(min_size=1), st.integers(0, 2), st.floats(0, 1)), max_size=15),
       st.floats(0.1, 0.9))
def test_nms_subset_and_no_overlap_above_threshold(items, thr):
    dets = [Detection(b, c, p) for b, c, p in items]
    kept = nms(dets, thr)
    assert all(k in dets for k in kept)
    assert [k.confidence for k in kept] == sorted((k.confidence for k in kept), reverse=True)
    for i, p in enumerate(kept):
        for q in kept[i + 1:]:
            if p.category == q.category:
                assert iou(p.box, q.box) <= thr


def test_detection_rejects_bad_confidence():
    with pytest.raises(ValueError):
        Detection(Box(0, 0, 1, 1), 0, 1.5)


def test_letterbox_hand_example():
    tf = letterbox_transform(400, 300, 416)
    assert tf.scale == pytest.approx(1.04)
    assert (tf.pad_x, tf.pad_y) == (0, 52)
    assert tf.apply(Box(0, 0, 400, 300)) == pytest.approx((0, 52, 416, 364))


def test_letterbox_identity_for_matching_square():
    tf = letterbox_transform(416, 416, 416)
    b = Box(3.5, 7, 100, 200)
    assert tf.apply(b) == b


@given(st.integers(1, 2000), st.integers(1, 2000), st.sampled_from([128, 416, 608]),
       st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_letterbox_round_trip(w, h, target, a, b, c, d):
    tf = letterbox_transform(w, h, target)
    x0, x1 = sorted((a * w, b * w))
    y0, y1 = sorted((c * h, d * h))
    box = Box(x0, y0, x1, y1)
    assert tf.invert(tf.apply(box)) == pytest.approx(box, abs=1e-6)
