import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sddkit.anchors import (
    MS_SIZES,
    AnchorSet,
    anchor_quality,
    assign_scales,
    cluster_wh,
    kmeans_anchors,
    kmeans_objective,
    label_wh,
)
from sddkit.dataset import Dataset, ImageRecord, ObjectLabel
from sddkit.geometry import Box, wh_iou_matrix
from sddkit.synthgen import generate, preset

PAPER_ANCHORS = [(29, 22), (30, 95), (97, 37), (39, 267), (105, 101), (290, 59), (227, 139), (126, 282), (411, 209)]


def _ds(whs, size=(200, 100)):
    labels = [ObjectLabel(0, Box(0, 0, w, h)) for w, h in whs]
    return Dataset([ImageRecord("a.png", size[0], size[1], labels)])


def test_identical_labels_single_cluster():
    r = cluster_wh(np.array([[12.0, 7.0]] * 5), 1)
    assert r.centroids.tolist() == [[12.0, 7.0]]
    assert r.objective == 0.0


def test_two_boxes_single_cluster_mean():
    r = cluster_wh(np.array([[10.0, 10.0], [30.0, 30.0]]), 1)
    assert r.centroids.tolist() == [[20.0, 20.0]]


def test_errors():
    with pytest.raises(ValueError, match="divisible by 3"):
        kmeans_anchors(np.random.default_rng(0).uniform(1, 9, (20, 2)), k=4)
    with pytest.raises(ValueError, match="distinct"):
        cluster_wh(np.array([[3.0, 3.0]] * 5 + [[4.0, 4.0]]), 3)


def test_letterbox_pooling():
    ds = _ds([(20, 10)], size=(200, 100))
    wh = label_wh(ds, (416, 608))
    assert wh == pytest.approx(np.array([[41.6, 20.8], [60.8, 30.4]]))
    assert label_wh(ds, None).tolist() == [[20.0, 10.0]]
    assert len(label_wh(ds, MS_SIZES)) == 7


def test_assign_scales_paper_anchors():
    a = assign_scales(PAPER_ANCHORS)
    small = {tuple(map(int, p)) for p in a.level_anchors(0)}
    assert small == {(29, 22), (30, 95), (97, 37)}
    areas = a.anchors.prod(axis=1)
    assert (np.diff(areas) >= 0).all()


def test_assign_scales_permutation_invariant():
    rng = np.random.default_rng(1)
    perm = rng.permutation(9)
    a, b = assign_scales(PAPER_ANCHORS), assign_scales(np.array(PAPER_ANCHORS)[perm])
    assert np.array_equal(a.anchors, b.anchors) and a.levels == b.levels


def test_assign_scales_equal_area_tie_break():
    pairs = [(1, 36), (36, 1), (2, 18), (18, 2), (3, 12), (12, 3), (4, 9), (9, 4), (6, 6)]
    a = assign_scales(pairs)
    assert [tuple(map(int, p)) for p in a.anchors] == sorted(pairs)
    assert a.levels == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]


def test_anchor_quality_examples():
    assert anchor_quality(np.array([[10.0, 10.0]]), np.array([[20.0, 20.0]])) == (0.25, 0.0)
    wh = np.array([[5.0, 9.0], [30.0, 4.0], [5.0, 9.0]])
    assert anchor_quality(np.unique(wh, axis=0), wh) == (1.0, 1.0)


def test_anchor_set_json_round_trip():
    a = assign_scales(PAPER_ANCHORS)
    j = a.to_json()
    b = AnchorSet(np.array(j["anchors"]), j["levels"])
    assert np.array_equal(a.anchors, b.anchors) and a.levels == b.levels


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_assignment_step_never_raises_objective(seed, k):
    # reassigning to the nearest centroid can only lower the objective for
    # fixed centroids; the returned objective is the best iterate seen
    rng = np.random.default_rng(seed)
    pts = rng.uniform(2, 80, (40, 2))
    r = cluster_wh(pts, k, seed=seed)
    assert r.objective == pytest.approx(kmeans_objective(pts, r.centroids))
    assert r.objective <= min(r.history) + 1e-12
    own = np.sum(1 - wh_iou_matrix(pts, r.centroids)[np.arange(len(pts)), r.assignment])
    assert r.objective == pytest.approx(own)


def _partitions(n, k):
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) == k and labels[0] == 0:
            yield np.array(labels)


def test_matches_exhaustive_optimum_small():
    pts = np.array([[10.0, 12.0], [11.0, 10.0], [40.0, 9.0], [44.0, 12.0], [9.0, 50.0], [12.0, 45.0]])
    opt = min(kmeans_objective(pts, np.array([pts[p == c].mean(0) for c in range(3)])) for p in _partitions(6, 3))
    got = min(cluster_wh(pts, 3, seed=s).objective for s in range(10))
    assert got <= opt * 1.05 + 1e-12


def test_clustered_beats_random_anchors():
    ds = generate(preset("target", 60, 128, seed=3))
    km = kmeans_anchors(ds, 9, (128,), seed=0)
    rng = np.random.default_rng(0)
    wh = label_wh(ds, (128,))
    rand = wh[rng.choice(len(wh), 9, replace=False)] * rng.uniform(0.5, 1.5, (9, 2))
    assert anchor_quality(km, ds, 128)[0] >= anchor_quality(rand, ds, 128)[0]


def test_deterministic_per_seed():
    ds = generate(preset("target", 30, 128, seed=5))
    a, b = kmeans_anchors(ds, seed=2), kmeans_anchors(ds, seed=2)
    assert np.array_equal(a.anchors, b.anchors)
