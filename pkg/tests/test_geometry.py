import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudolabel.geometry import (BBox, box_from_corners, clip_to_image, corners,
                                  diagonal_sq, enclosing_rect, iou, iou_matrix)

from conftest import random_box
from oracles import pixel_iou


def test_iou_examples():
    a = BBox(0, 0, 10, 10)
    assert iou(a, BBox(0, 0, 10, 10)) == 1.0
    assert iou(a, BBox(20, 20, 30, 30)) == 0.0
    assert iou(a, BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_touching_edges_is_zero():
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0


def test_iou_matches_pixel_count_oracle(rng):
    for _ in range(300):
        a = random_box(rng, 30, integer=True)
        b = random_box(rng, 30, integer=True)
        assert iou(a, b) == pytest.approx(pixel_iou(a, b), abs=1e-12)


def test_iou_symmetric_and_bounded_seeded(rng):
    for _ in range(10_000):
        a, b = random_box(rng), random_box(rng)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)
        assert iou(a, a) == 1.0


coord = st.floats(-1e3, 1e3, allow_nan=False)


@st.composite
def boxes(draw):
    x1, y1 = draw(coord), draw(coord)
    w = draw(st.floats(1e-3, 1e3))
    h = draw(st.floats(1e-3, 1e3))
    return BBox(x1, y1, x1 + w, y1 + h)


@given(boxes(), boxes())
@settings(max_examples=300, deadline=None)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


def test_iou_matrix_shape_and_values():
    a = [BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)]
    m = iou_matrix(a, a[:1])
    assert m.shape == (2, 1)
    assert m[1, 0] == pytest.approx(1 / 3)
    assert iou_matrix([], a).shape == (0, 2)


def test_corners_examples():
    assert corners(BBox(0, 0, 10, 10)).tolist() == [[0, 0], [10, 0], [10, 10], [0, 10]]
    assert corners(BBox(2, 3, 5, 7)).tolist() == [[2, 3], [5, 3], [5, 7], [2, 7]]


def test_corners_round_trip(rng):
    for _ in range(1000):
        b = random_box(rng, class_id=2, score=0.7)
        back = box_from_corners(corners(b), class_id=2, score=0.7)
        assert back.coords() == b.coords()


def test_corner_order_is_clockwise_in_image_coordinates(rng):
    for _ in range(100):
        c = corners(random_box(rng))
        # shoelace area is positive with y pointing down
        x, y = c[:, 0], c[:, 1]
        assert np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) > 0


def test_enclosing_rect_examples():
    a = BBox(0, 0, 10, 10)
    assert enclosing_rect(a, a).coords() == a.coords()
    e = enclosing_rect(a, BBox(3, 0, 13, 10))
    assert e.coords() == (0, 0, 13, 10)
    assert diagonal_sq(e) == 269
    assert enclosing_rect(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)).coords() == (0, 0, 6, 6)


def test_enclosing_rect_contains_both(rng):
    for _ in range(1000):
        a, b = random_box(rng), random_box(rng)
        e = enclosing_rect(a, b)
        for box in (a, b):
            assert e.x1 <= box.x1 and e.y1 <= box.y1 and e.x2 >= box.x2 and e.y2 >= box.y2
        # minimality: every edge is attained by one of the boxes
        assert e.x1 == min(a.x1, b.x1) and e.y2 == max(a.y2, b.y2)


def test_clip_examples():
    assert clip_to_image(BBox(-5, -5, 10, 10), 100, 100).coords() == (0, 0, 10, 10)
    b = BBox(0, 0, 10, 10)
    assert clip_to_image(b, 100, 100) == b
    assert clip_to_image(BBox(-10, -10, -1, -1), 100, 100) is None


def test_clip_min_area():
    assert clip_to_image(BBox(99.5, 0, 120, 10), 100, 100, min_area=10.0) is None
    assert clip_to_image(BBox(99.5, 0, 120, 10), 100, 100, min_area=1.0) is not None


@pytest.mark.parametrize("args", [
    (0, 0, 0, 10), (0, 0, 10, -1), (math.nan, 0, 1, 1), (0, 0, math.inf, 1),
])
def test_degenerate_boxes_rejected(args):
    with pytest.raises(ValueError):
        BBox(*args)


def test_score_and_probs_validation():
    with pytest.raises(ValueError):
        BBox(0, 0, 1, 1, score=1.5)
    with pytest.raises(ValueError):
        BBox(0, 0, 1, 1, class_id=0, score=0.5, probs=(0.5, 0.6))
    with pytest.raises(ValueError):
        BBox(0, 0, 1, 1, class_id=0, score=0.3, probs=(0.3, 0.7))
    b = BBox(0, 0, 1, 1, class_id=1, score=0.7, probs=(0.3, 0.7))
    assert b.probs == (0.3, 0.7)
