"""Axis-aligned box geometry in pixel coordinates.

A box is a (top, left, bottom, right) tuple of floats with top < bottom
and left < right; area is the plain product of side lengths.
"""
from __future__ import annotations

from .errors import DegenerateBox

Box = tuple[float, float, float, float]


def box_from_center(center_row: float, center_col: float,
                    height: float, width: float) -> Box:
    return (center_row - height / 2.0, center_col - width / 2.0,
            center_row + height / 2.0, center_col + width / 2.0)


def area(box: Box) -> float:
    t, l, b, r = box
    return max(0.0, b - t) * max(0.0, r - l)


def intersection_area(a: Box, b: Box) -> float:
    t = max(a[0], b[0])
    l = max(a[1], b[1])
    bt = min(a[2], b[2])
    r = min(a[3], b[3])
    if bt <= t or r <= l:
        return 0.0
    return (bt - t) * (r - l)


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def union_area_within(base: Box, covers: list[Box]) -> float:
    """Area of `base` covered by the union of `covers`.

    Exact, via coordinate compression: clip every cover to `base`, then sum
    the grid cells of the induced rectangulation that any cover touches.
    """
    if area(base) <= 0.0:
        raise DegenerateBox(f"zero-area box {base}")
    clipped = []
    for c in covers:
        t = max(base[0], c[0])
        l = max(base[1], c[1])
        b = min(base[2], c[2])
        r = min(base[3], c[3])
        if b > t and r > l:
            clipped.append((t, l, b, r))
    if not clipped:
        return 0.0
    rows = sorted({v for c in clipped for v in (c[0], c[2])})
    cols = sorted({v for c in clipped for v in (c[1], c[3])})
    covered = 0.0
    for i in range(len(rows) - 1):
        rt, rb = rows[i], rows[i + 1]
        for j in range(len(cols) - 1):
            cl, cr = cols[j], cols[j + 1]
            for t, l, b, r in clipped:
                if t <= rt and b >= rb and l <= cl and r >= cr:
                    covered += (rb - rt) * (cr - cl)
                    break
    return covered
