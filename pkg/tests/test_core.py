import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowmot.core import BBox, DeltaFeatures, Detection, FrameObservations, iou, iou_matrix, occlusion_level

coord = st.floats(-500, 500, allow_nan=False)
extent = st.floats(0.5, 300, allow_nan=False)
boxes = st.builds(BBox, coord, coord, extent, extent)


def test_iou_identical_is_one():
    b = BBox(10.0, 20.0, 5.0, 7.0)
    assert iou(b, b) == 1.0


def test_iou_disjoint_is_zero():
    assert iou(BBox.from_corners(0, 0, 1, 1), BBox.from_corners(2, 0, 3, 1)) == 0.0


def test_iou_half_overlap():
    a = BBox.from_corners(0, 0, 2, 2)
    b = BBox.from_corners(1, 0, 3, 2)
    assert iou(a, b) == pytest.approx(2 / 6, abs=1e-15)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes)
def test_iou_self_exact(a):
    assert iou(a, a) == 1.0


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    a = [BBox(*rng.uniform(0, 50, 2), *rng.uniform(5, 30, 2)) for _ in range(4)]
    b = [BBox(*rng.uniform(0, 50, 2), *rng.uniform(5, 30, 2)) for _ in range(3)]
    m = iou_matrix(a, b)
    assert m.shape == (4, 3)
    for i in range(4):
        for j in range(3):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-15)
    assert iou_matrix([], b).shape == (0, 3)


def test_occlusion_no_occluders():
    assert occlusion_level(BBox(0, 0, 4, 4), []) == 0.0


def test_occlusion_identical_occluder():
    b = BBox(3, 3, 4, 4)
    assert occlusion_level(b, [b]) == 1.0


def test_occlusion_two_halves_cover_target():
    t = BBox.from_corners(0, 0, 4, 2)
    left = BBox.from_corners(-1, -1, 2, 3)
    right = BBox.from_corners(2, -1, 5, 3)
    assert occlusion_level(t, [left, right]) == pytest.approx(1.0, abs=1e-15)


def test_occlusion_overlapping_occluders_not_double_counted():
    t = BBox.from_corners(0, 0, 10, 10)
    a = BBox.from_corners(0, 0, 6, 10)
    b = BBox.from_corners(4, 0, 8, 10)
    assert occlusion_level(t, [a, b]) == pytest.approx(0.8, abs=1e-15)


@settings(max_examples=60)
@given(boxes, st.lists(boxes, max_size=4), boxes)
def test_occlusion_monotone_in_occluders(t, occ, extra):
    base = occlusion_level(t, occ)
    more = occlusion_level(t, occ + [extra])
    assert 0.0 <= base <= more + 1e-12 <= 1.0 + 1e-12


def test_occlusion_matches_grid_estimate():
    rng = np.random.default_rng(3)
    t = BBox.from_corners(0, 0, 10, 10)
    occ = []
    for _ in range(3):
        x1, x2 = sorted(rng.uniform(-2, 12, 2))
        y1, y2 = sorted(rng.uniform(-2, 12, 2))
        occ.append(BBox.from_corners(x1, y1, x2, y2))
    n = 400
    xs = (np.arange(n) + 0.5) / n * 10
    X, Y = np.meshgrid(xs, xs)
    covered = np.zeros_like(X, dtype=bool)
    for o in occ:
        x1, y1, x2, y2 = o.corners()
        covered |= (X >= x1) & (X <= x2) & (Y >= y1) & (Y <= y2)
    assert occlusion_level(t, occ) == pytest.approx(covered.mean(), abs=0.01)


def test_bbox_rejects_bad_extents():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 1)
    with pytest.raises(ValueError):
        BBox(0, 0, 1, -1)
    with pytest.raises(ValueError):
        BBox(math.nan, 0, 1, 1)


def test_bbox_conversions_roundtrip():
    b = BBox.from_tlwh(10, 20, 30, 40)
    assert (b.cx, b.cy) == (25, 40)
    assert b.tlwh() == pytest.approx((10, 20, 30, 40))
    assert BBox.from_corners(*b.corners()) == b


def test_detection_invariants():
    b = BBox(1, 1, 2, 2)
    with pytest.raises(ValueError):
        Detection(b, 0.0, 1.0, 0.5, 0)
    with pytest.raises(ValueError):
        Detection(b, 1.0, 0.0, 0.5, 0)
    with pytest.raises(ValueError):
        Detection(b, 1.0, 1.0, 1.5, 0)
    d = Detection(b, 5.0, 0.25, 0.9, 3)
    assert list(d.measurement()) == [1, 1, 2, 2, 5.0]


def test_frame_observations_share_frame():
    b = BBox(1, 1, 2, 2)
    with pytest.raises(ValueError):
        FrameObservations(0, (Detection(b, 5.0, 1.0, 0.9, 1),), "s")


def test_delta_features_roundtrip():
    d = DeltaFeatures.from_array([1, -2, 3, -4, 0.5])
    assert list(d.as_array()) == [1, -2, 3, -4, 0.5]
    with pytest.raises(ValueError):
        DeltaFeatures(math.inf, 0, 0, 0, 0)
