"""Oriented-rectangle overlap (separating axes) and drivable-area containment."""

from __future__ import annotations

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.ops import unary_union

from ..geometry import box_corners


def _axes(corners: np.ndarray) -> np.ndarray:
    edges = np.roll(corners, -1, axis=-2) - corners
    normals = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
    return normals / np.linalg.norm(normals, axis=-1, keepdims=True)


def polygons_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons given as (n, 2) vertex arrays.

    Touching boundaries count as overlap.
    """
    for axis in np.concatenate([_axes(a), _axes(b)]):
        pa = a @ axis
        pb = b @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def boxes_overlap(box_a, box_b) -> bool:
    """Boxes are (x, y, heading, length, width)."""
    return polygons_overlap(box_corners(box_a[:2], box_a[2], box_a[3], box_a[4]),
                            box_corners(box_b[:2], box_b[2], box_b[3], box_b[4]))


def box_corners_many(boxes: np.ndarray) -> np.ndarray:
    """(N, 5) boxes -> (N, 4, 2) counter-clockwise corners."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    hl, hw = 0.5 * b[:, 3], 0.5 * b[:, 4]
    lx = np.stack([hl, -hl, -hl, hl], axis=1)
    ly = np.stack([hw, hw, -hw, -hw], axis=1)
    c, s = np.cos(b[:, 2])[:, None], np.sin(b[:, 2])[:, None]
    x = b[:, 0:1] + lx * c - ly * s
    y = b[:, 1:2] + lx * s + ly * c
    return np.stack([x, y], axis=-1)


def box_overlaps_many(box, others: np.ndarray) -> np.ndarray:
    """Vectorised SAT of one box against (N, 5) boxes; returns (N,) bool."""
    others = np.asarray(others, dtype=np.float64).reshape(-1, 5)
    if len(others) == 0:
        return np.zeros(0, dtype=bool)
    a = box_corners_many(np.asarray(box, dtype=np.float64)[None])[0]  # (4, 2)
    b = box_corners_many(others)  # (N, 4, 2)
    axes_a = np.broadcast_to(_axes(a)[None], (len(b), 4, 2))
    axes = np.concatenate([axes_a, _axes(b)], axis=1)  # (N, 8, 2)
    pa = np.einsum("kj,naj->nak", a, axes)  # (N, 8, 4)
    pb = np.einsum("nkj,naj->nak", b, axes)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return ~separated.any(axis=1)


class DrivableArea:
    """Union of region polygons with a footprint containment test."""

    def __init__(self, region):
        polys = [Polygon(r.exterior, [h for h in r.holes]) for r in region]
        self.geometry = unary_union(polys) if polys else Polygon()
        shapely.prepare(self.geometry)

    def contains_box(self, box) -> bool:
        if self.geometry.is_empty:
            return False
        corners = box_corners(box[:2], box[2], box[3], box[4])
        return bool(self.geometry.covers(Polygon(corners)))

    def contains_boxes(self, boxes: np.ndarray) -> np.ndarray:
        if self.geometry.is_empty:
            return np.zeros(len(boxes), dtype=bool)
        polys = shapely.polygons(box_corners_many(boxes))
        return shapely.covers(self.geometry, polys)
