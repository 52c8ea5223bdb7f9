"""Oriented rectangle geometry: corners, convex clipping, overlap, IoU.

Boxes live in a y-up metric plane. `yaw` is radians counter-clockwise from
+x; `length` runs along the heading axis and `width` across it.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

__all__ = [
    "Box",
    "wrap_angle",
    "box_corners",
    "polygon_area",
    "clip_polygon",
    "intersection_area",
    "box_iou",
]

Point = tuple[float, float]

DEGENERATE_AREA = 1e-12


class Box(NamedTuple):
    """Oriented rectangle: center, width (across heading), length (along), yaw."""

    cx: float
    cy: float
    width: float
    length: float
    yaw: float


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def box_corners(box: Box) -> list[Point]:
    """Corner points in counter-clockwise order."""
    cx, cy, w, l, yaw = box
    ca, sa = math.cos(yaw), math.sin(yaw)
    # u along heading (half length), v across (half width)
    ux, uy = ca * l / 2.0, sa * l / 2.0
    vx, vy = -sa * w / 2.0, ca * w / 2.0
    return [
        (cx - ux - vx, cy - uy - vy),
        (cx + ux - vx, cy + uy - vy),
        (cx + ux + vx, cy + uy + vy),
        (cx - ux + vx, cy - uy + vy),
    ]


def polygon_area(poly: Sequence[Point]) -> float:
    """Shoelace area, sign-free."""
    if len(poly) < 3:
        return 0.0
    s = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i - 1]
        x1, y1 = poly[i]
        s += x0 * y1 - x1 * y0
    return abs(s) / 2.0


def clip_polygon(subject: Sequence[Point], clip: Sequence[Point]) -> list[Point]:
    """Sutherland-Hodgman clip of `subject` by a convex CCW `clip` polygon."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        current, output = output, []
        # inside = left of (or on) the directed clip edge
        prev = current[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= 0.0
        for pt in current:
            pt_in = ex * (pt[1] - ay) - ey * (pt[0] - ax) >= 0.0
            if pt_in != prev_in:
                dx, dy = pt[0] - prev[0], pt[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (ay - prev[1]) - ey * (ax - prev[0])) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if pt_in:
                output.append(pt)
            prev, prev_in = pt, pt_in
    return output


def intersection_area(a: Box, b: Box) -> float:
    """Overlap area of two oriented rectangles."""
    inter = clip_polygon(box_corners(a), box_corners(b))
    return polygon_area(inter)


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union; degenerate overlaps count as zero."""
    # cheap reject: centers further apart than the two circumradii
    ra = math.hypot(a.width, a.length) / 2.0
    rb = math.hypot(b.width, b.length) / 2.0
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    inter = intersection_area(a, b)
    if inter < DEGENERATE_AREA:
        return 0.0
    union = a.width * a.length + b.width * b.length - inter
    if union < DEGENERATE_AREA:
        return 0.0
    return min(inter / union, 1.0)
