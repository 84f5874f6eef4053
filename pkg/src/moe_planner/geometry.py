"""Planar geometry: angle wrapping, rigid frame transforms, arc-length paths."""

from __future__ import annotations

import math

import numpy as np


def wrap_angle(a):
    """Map angles into (-pi, pi]; values already in range pass through unchanged."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w <= -np.pi, np.pi, w)
    w = np.where((a > -np.pi) & (a <= np.pi), a, w)
    return float(w) if np.ndim(w) == 0 else w


def to_frame(points: np.ndarray, origin, heading: float) -> np.ndarray:
    """Express world points (..., 2) in the frame located at ``origin`` rotated by ``heading``."""
    c, s = math.cos(heading), math.sin(heading)
    d = np.asarray(points, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    x = d[..., 0] * c + d[..., 1] * s
    y = -d[..., 0] * s + d[..., 1] * c
    return np.stack([x, y], axis=-1)


def rotate(vectors: np.ndarray, heading: float) -> np.ndarray:
    """Rotate vectors from a frame with the given heading back into the parent frame."""
    c, s = math.cos(heading), math.sin(heading)
    v = np.asarray(vectors, dtype=np.float64)
    return np.stack([v[..., 0] * c - v[..., 1] * s, v[..., 0] * s + v[..., 1] * c], axis=-1)


def from_frame(points: np.ndarray, origin, heading: float) -> np.ndarray:
    return rotate(points, heading) + np.asarray(origin, dtype=np.float64)


def rotate_into(vectors: np.ndarray, heading: float) -> np.ndarray:
    return rotate(vectors, -heading)


def box_corners(center, heading: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle, counter-clockwise, shape (4, 2)."""
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return from_frame(local, center, heading)


def dedupe(points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return pts
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > tol
    return pts[keep]


def resample(points: np.ndarray, n: int | None = None, spacing: float | None = None) -> np.ndarray:
    """Resample a polyline to ``n`` evenly spaced points or to a fixed spacing."""
    pts = dedupe(points)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if n is None:
        n = max(2, int(math.floor(s[-1] / spacing)) + 1)
        targets = np.arange(n) * spacing
    else:
        targets = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])], axis=-1)


class Path:
    """Polyline parameterised by arc length, extended linearly past both ends."""

    def __init__(self, points: np.ndarray):
        pts = dedupe(points)
        if len(pts) < 2:
            raise ValueError("a path needs at least two distinct points")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.seg_dir = seg / self.seg_len[:, None]
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.s[-1])
        # projection bounds per segment; the first and last segments extend to infinity
        self._lo = np.zeros_like(self.seg_len)
        self._lo[0] = -np.inf
        self._hi = self.seg_len.copy()
        self._hi[-1] = np.inf

    def point_at(self, s):
        s = np.asarray(s, dtype=np.float64)
        i = np.minimum(np.maximum(np.searchsorted(self.s, s, side="right") - 1, 0), len(self.seg_len) - 1)
        return self.points[i] + self.seg_dir[i] * (s - self.s[i])[..., None]

    def heading_at(self, s):
        s = np.asarray(s, dtype=np.float64)
        i = np.minimum(np.maximum(np.searchsorted(self.s, s, side="right") - 1, 0), len(self.seg_len) - 1)
        d = self.seg_dir[i]
        return np.arctan2(d[..., 1], d[..., 0])

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Arc length and signed lateral offset (left positive) of the nearest path point."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = p[:, None, :] - self.points[None, :-1, :]
        t = rel[..., 0] * self.seg_dir[:, 0] + rel[..., 1] * self.seg_dir[:, 1]
        t_clamped = np.minimum(np.maximum(t, self._lo), self._hi)
        foot = self.points[None, :-1, :] + self.seg_dir[None] * t_clamped[..., None]
        diff = p[:, None, :] - foot
        dist = diff[..., 0] ** 2 + diff[..., 1] ** 2
        k = np.argmin(dist, axis=1)
        rows = np.arange(len(p))
        s = self.s[k] + t_clamped[rows, k]
        d = self.seg_dir[k]
        r = p - foot[rows, k]
        lateral = d[:, 0] * r[:, 1] - d[:, 1] * r[:, 0]
        return s, lateral

    def slice(self, s0: float, length: float, spacing: float) -> np.ndarray:
        n = int(round(length / spacing)) + 1
        return self.point_at(s0 + np.arange(n) * spacing)
