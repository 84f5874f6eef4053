"""Future displacement targets of scene elements relative to the AV."""

from __future__ import annotations

import numpy as np

from .types import Scenario


def hold_last_valid(position: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid rows with the most recent valid row (earlier rows are left as is)."""
    idx = np.where(valid, np.arange(len(valid)), -1)
    idx = np.maximum.accumulate(idx)
    out = position.copy()
    held = idx >= 0
    out[held] = position[idx[held]]
    return out


def representative_point(points: np.ndarray, anchor) -> np.ndarray:
    """Polyline point nearest to ``anchor`` (first one on ties)."""
    d = np.sum((points - np.asarray(anchor)) ** 2, axis=1)
    return points[int(np.argmin(d))]


def compute_displacement_targets(s: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Targets of shape (N_a + N_p, T_f, 2) and the matching boolean step mask.

    Agent rows hold the agent position minus the AV position at each future
    step; map rows hold the static point of the polyline nearest the AV at
    t = 0 minus the AV future position. Agent steps where the agent is not
    observed carry its last observed position and are masked out.
    """
    sl = slice(s.t0 + 1, s.t0 + 1 + s.future_steps)
    av_future = s.av.position[sl]
    if len(av_future) != s.future_steps or not s.av.valid[sl].all():
        raise ValueError("AV future must be valid over the planning horizon")
    n_a, n_p, T = len(s.agents), len(s.map_polylines), s.future_steps
    targets = np.zeros((n_a + n_p, T, 2))
    mask = np.zeros((n_a + n_p, T), dtype=bool)
    for a, track in enumerate(s.agents):
        held = hold_last_valid(track.position, track.valid)
        targets[a] = held[sl] - av_future
        mask[a] = track.valid[sl]
    anchor = s.av.position[s.t0]
    for p, poly in enumerate(s.map_polylines):
        targets[n_a + p] = representative_point(poly.points, anchor) - av_future
        mask[n_a + p] = True
    return targets, mask
