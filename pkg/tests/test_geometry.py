"""Oriented-rectangle geometry against analytic cases and a raster oracle."""

import math

import numpy as np
import pytest

from coopsim.geometry import (
    Box,
    box_corners,
    box_iou,
    clip_polygon,
    intersection_area,
    polygon_area,
    wrap_angle,
)
from oracles import raster_iou


def test_wrap_angle_basics():
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(math.pi / 4) == pytest.approx(math.pi / 4)
    assert wrap_angle(2 * math.pi + 0.3) == pytest.approx(0.3)
    assert wrap_angle(-3 * math.pi / 2) == pytest.approx(math.pi / 2)
    # wraps into [-pi, pi)
    for a in np.linspace(-20, 20, 401):
        w = wrap_angle(a)
        assert -math.pi <= w < math.pi
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)


def test_box_corners_axis_aligned():
    c = box_corners(Box(1.0, 2.0, 2.0, 4.0, 0.0))
    # length 4 along +x, width 2 along +y
    assert sorted(c) == [(-1.0, 1.0), (-1.0, 3.0), (3.0, 1.0), (3.0, 3.0)]


def test_box_corners_rotated_quarter_turn():
    c = box_corners(Box(0.0, 0.0, 2.0, 4.0, math.pi / 2))
    # heading +y: length along y, width along x
    got = sorted((round(x, 9), round(y, 9)) for x, y in c)
    assert got == [(-1.0, -2.0), (-1.0, 2.0), (1.0, -2.0), (1.0, 2.0)]


def test_polygon_area_shoelace():
    assert polygon_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == pytest.approx(1.0)
    assert polygon_area([(0, 0), (0, 1), (1, 1), (1, 0)]) == pytest.approx(1.0)  # CW too
    assert polygon_area([(0, 0), (2, 0), (0, 2)]) == pytest.approx(2.0)
    assert polygon_area([(0, 0), (1, 0)]) == 0.0


def test_clip_polygon_square_overlap():
    a = [(0, 0), (2, 0), (2, 2), (0, 2)]
    b = [(1, 1), (3, 1), (3, 3), (1, 3)]
    inter = clip_polygon(a, b)
    assert polygon_area(inter) == pytest.approx(1.0)


def test_clip_polygon_disjoint_is_empty():
    a = [(0, 0), (1, 0), (1, 1), (0, 1)]
    b = [(5, 5), (6, 5), (6, 6), (5, 6)]
    assert clip_polygon(a, b) == []


def test_identical_boxes_iou_one():
    b = Box(3.0, -2.0, 2.0, 4.5, 0.7)
    assert box_iou(b, b) == pytest.approx(1.0, abs=1e-12)


def test_disjoint_boxes_iou_zero():
    a = Box(0.0, 0.0, 1.0, 1.0, 0.3)
    b = Box(10.0, 10.0, 1.0, 1.0, -0.8)
    assert box_iou(a, b) == 0.0


def test_axis_aligned_half_overlap():
    # unit squares offset by 0.5 in x: inter 0.5, union 1.5
    a = Box(0.0, 0.0, 1.0, 1.0, 0.0)
    b = Box(0.5, 0.0, 1.0, 1.0, 0.0)
    assert intersection_area(a, b) == pytest.approx(0.5, abs=1e-12)
    assert box_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_rotated_square_against_itself_at_45deg():
    # unit square vs same square at 45 degrees: IoU is exactly 1/sqrt(2)
    a = Box(0.0, 0.0, 1.0, 1.0, 0.0)
    b = Box(0.0, 0.0, 1.0, 1.0, math.pi / 4)
    assert box_iou(a, b) == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-6)


def test_degenerate_zero_size_box():
    a = Box(0.0, 0.0, 0.0, 0.0, 0.0)
    b = Box(0.0, 0.0, 1.0, 1.0, 0.0)
    assert box_iou(a, b) == 0.0
    assert box_iou(a, a) == 0.0


def test_touching_edges_iou_zero():
    a = Box(0.0, 0.0, 1.0, 1.0, 0.0)
    b = Box(1.0, 0.0, 1.0, 1.0, 0.0)  # shares an edge, zero-area overlap
    assert box_iou(a, b) == 0.0


def _random_box(rng):
    return Box(
        cx=rng.uniform(-10, 10),
        cy=rng.uniform(-10, 10),
        width=rng.uniform(0.4, 5.0),
        length=rng.uniform(0.4, 7.0),
        yaw=rng.uniform(-math.pi, math.pi),
    )


def test_iou_properties_random():
    rng = np.random.default_rng(42)
    for _ in range(300):
        a, b = _random_box(rng), _random_box(rng)
        iou = box_iou(a, b)
        assert 0.0 <= iou <= 1.0
        assert box_iou(b, a) == pytest.approx(iou, abs=1e-9)
        # rigid motion of both boxes leaves IoU unchanged
        dx, dy, rot = rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3)
        ca, sa = math.cos(rot), math.sin(rot)

        def move(box):
            px = ca * box.cx - sa * box.cy + dx
            py = sa * box.cx + ca * box.cy + dy
            return Box(px, py, box.width, box.length, box.yaw + rot)

        assert box_iou(move(a), move(b)) == pytest.approx(iou, abs=1e-9)


def test_iou_against_raster_oracle_sample():
    # small sample here; the acceptance suite runs the full 500 pairs
    rng = np.random.default_rng(7)
    for _ in range(40):
        a = _random_box(rng)
        b = Box(
            a.cx + rng.uniform(-3, 3),
            a.cy + rng.uniform(-3, 3),
            rng.uniform(0.4, 5.0),
            rng.uniform(0.4, 7.0),
            rng.uniform(-math.pi, math.pi),
        )
        assert box_iou(a, b) == pytest.approx(raster_iou(tuple(a), tuple(b)), abs=2e-3)
