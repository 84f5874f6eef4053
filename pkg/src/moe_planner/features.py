"""Model inputs: ego-frame scene snapshots and padded batches.

All inputs are expressed in the frame of the AV at the planning instant.
Positions are divided by ``POS_SCALE`` and velocities by ``VEL_SCALE``;
targets stay in meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Path, rotate_into, to_frame, wrap_angle
from .numerics import DTYPE
from .scene.targets import compute_displacement_targets
from .scene.types import Centerline, MapPolyline, Scenario

POS_SCALE = 20.0
VEL_SCALE = 10.0
AGENT_DIM = 11  # x, y, cos h, sin h, vx, vy, length, width, category one-hot(3)
AV_DIM = 8  # x, y, cos h, sin h, vx, vy, length, width
MAP_DIM = 7  # x, y, dx, dy, kind one-hot(3)
CENTERLINE_DIM = 4  # x, y, dx, dy
CENTERLINE_POINTS = 30
CENTERLINE_SPACING = 2.0


@dataclass
class Snapshot:
    av: np.ndarray  # (AV_DIM,)
    agents: np.ndarray  # (N_a, H+1, AGENT_DIM)
    agent_steps: np.ndarray  # (N_a, H+1) bool
    map: np.ndarray  # (N_p, P, MAP_DIM)
    centerlines: np.ndarray  # (N_K, L, CENTERLINE_DIM)
    disp_target: np.ndarray | None = None  # (N_a + N_p, T_f, 2) m
    disp_mask: np.ndarray | None = None  # (N_a + N_p, T_f) bool
    gt: np.ndarray | None = None  # (T_f, 3)


def _agent_features(position, heading, velocity, valid, size, category) -> np.ndarray:
    T = len(heading)
    f = np.zeros((T, AGENT_DIM))
    f[:, 0:2] = position / POS_SCALE
    f[:, 2] = np.cos(heading)
    f[:, 3] = np.sin(heading)
    f[:, 4:6] = velocity / VEL_SCALE
    f[:, 6] = size[0]
    f[:, 7] = size[1]
    f[:, 8 + int(category)] = 1.0
    f[~valid] = 0.0
    return f


def _polyline_features(points: np.ndarray) -> np.ndarray:
    d = np.zeros_like(points)
    d[:-1] = np.diff(points, axis=0)
    d[-1] = d[-2] if len(points) > 1 else 0.0
    return np.concatenate([points / POS_SCALE, d], axis=1)


def crop_centerline(points: np.ndarray, position, n: int = CENTERLINE_POINTS, spacing: float = CENTERLINE_SPACING) -> np.ndarray:
    """Resample ``n`` points ahead of the projection of ``position`` onto the line."""
    path = Path(points)
    s0 = float(path.project(np.asarray(position, dtype=np.float64))[0][0])
    s0 = min(max(s0, 0.0), path.length)
    return path.point_at(s0 + spacing * np.arange(n))


def build_snapshot(
    origin,
    heading: float,
    av_velocity,
    av_size,
    agent_windows: list[tuple],
    polylines: list[MapPolyline],
    centerlines: list[Centerline],
) -> Snapshot:
    """Assemble a snapshot in the frame at ``origin``/``heading``.

    ``agent_windows`` holds ``(position, heading, velocity, valid, size, category)``
    history windows ending at the planning instant, in the scenario frame.
    Only the AV's current state is used.
    """
    origin = np.asarray(origin, dtype=np.float64)
    vel = rotate_into(np.asarray(av_velocity, dtype=np.float64), heading)
    av = np.array([0.0, 0.0, 1.0, 0.0, vel[0] / VEL_SCALE, vel[1] / VEL_SCALE, av_size[0], av_size[1]])

    rows, steps = [], []
    for pos, hdg, v, valid, size, cat in agent_windows:
        p = to_frame(pos, origin, heading)
        h = wrap_angle(np.asarray(hdg) - heading)
        vv = rotate_into(v, heading)
        rows.append(_agent_features(p, h, vv, np.asarray(valid, dtype=bool), size, cat))
        steps.append(np.asarray(valid, dtype=bool))
    H1 = len(agent_windows[0][1]) if agent_windows else 0
    agents = np.stack(rows) if rows else np.zeros((0, H1, AGENT_DIM))
    agent_steps = np.stack(steps) if steps else np.zeros((0, H1), dtype=bool)

    maps = []
    for poly in polylines:
        f = _polyline_features(to_frame(poly.points, origin, heading))
        kind = np.zeros((len(f), 3))
        kind[:, int(poly.kind)] = 1.0
        maps.append(np.concatenate([f, kind], axis=1))
    P = len(polylines[0].points) if polylines else 0
    map_arr = np.stack(maps) if maps else np.zeros((0, P, MAP_DIM))

    cls = [_polyline_features(to_frame(crop_centerline(c.points, origin), origin, heading)) for c in centerlines]
    cl_arr = np.stack(cls) if cls else np.zeros((0, CENTERLINE_POINTS, CENTERLINE_DIM))
    return Snapshot(av, agents, agent_steps, map_arr, cl_arr)


def history_window(track, end: int, steps: int):
    """Window of ``steps`` samples ending at index ``end`` (inclusive)."""
    sl = slice(end - steps + 1, end + 1)
    return (track.position[sl], track.heading[sl], track.velocity[sl], track.valid[sl], track.size, track.category)


def scenario_snapshot(s: Scenario, with_targets: bool = True) -> Snapshot:
    """Snapshot at t = 0 with planning and displacement targets."""
    t0 = s.t0
    windows = [history_window(a, t0, s.history_steps + 1) for a in s.agents]
    snap = build_snapshot(
        s.av.position[t0], float(s.av.heading[t0]), s.av.velocity[t0], s.av.size,
        windows, s.map_polylines, s.centerlines,
    )
    if with_targets:
        snap.disp_target, snap.disp_mask = compute_displacement_targets(s)
        snap.gt = s.gt_future()
    return snap


def collate(snaps: list[Snapshot]) -> dict[str, torch.Tensor]:
    """Pad a list of snapshots into batched tensors with validity masks."""
    B = len(snaps)
    n_a = max((len(s.agents) for s in snaps), default=0)
    n_p = max((len(s.map) for s in snaps), default=0)
    n_k = max(len(s.centerlines) for s in snaps)
    H1 = max((s.agents.shape[1] for s in snaps), default=0)
    P = max((s.map.shape[1] for s in snaps), default=0)

    av = np.stack([s.av for s in snaps])
    agents = np.zeros((B, n_a, H1, AGENT_DIM))
    agent_steps = np.zeros((B, n_a, H1), dtype=bool)
    maps = np.zeros((B, n_p, P, MAP_DIM))
    map_points = np.zeros((B, n_p, P), dtype=bool)
    cls = np.zeros((B, n_k, CENTERLINE_POINTS, CENTERLINE_DIM))
    cl_mask = np.zeros((B, n_k), dtype=bool)
    for b, s in enumerate(snaps):
        a, p, k = len(s.agents), len(s.map), len(s.centerlines)
        if a:
            agents[b, :a, : s.agents.shape[1]] = s.agents
            agent_steps[b, :a, : s.agents.shape[1]] = s.agent_steps
        if p:
            maps[b, :p, : s.map.shape[1]] = s.map
            map_points[b, :p, : s.map.shape[1]] = True
        cls[b, :k] = s.centerlines
        cl_mask[b, :k] = True

    out = {
        "av": torch.tensor(av, dtype=DTYPE),
        "agents": torch.tensor(agents, dtype=DTYPE),
        "agent_steps": torch.tensor(agent_steps),
        "agent_mask": torch.tensor(agent_steps[:, :, -1] if H1 else np.zeros((B, n_a), dtype=bool)),
        "map": torch.tensor(maps, dtype=DTYPE),
        "map_points": torch.tensor(map_points),
        "map_mask": torch.tensor(map_points.any(axis=2) if P else np.zeros((B, n_p), dtype=bool)),
        "centerlines": torch.tensor(cls, dtype=DTYPE),
        "centerline_mask": torch.tensor(cl_mask),
    }
    if all(s.gt is not None for s in snaps):
        T = snaps[0].gt.shape[0]
        disp = np.zeros((B, n_a + n_p, T, 2))
        disp_mask = np.zeros((B, n_a + n_p, T), dtype=bool)
        is_map = np.zeros((B, n_a + n_p), dtype=bool)
        is_map[:, n_a:] = True
        for b, s in enumerate(snaps):
            a, p = len(s.agents), len(s.map)
            disp[b, :a] = s.disp_target[:a]
            disp_mask[b, :a] = s.disp_mask[:a]
            disp[b, n_a: n_a + p] = s.disp_target[a:]
            disp_mask[b, n_a: n_a + p] = s.disp_mask[a:]
        out["disp_target"] = torch.tensor(disp, dtype=DTYPE)
        out["disp_mask"] = torch.tensor(disp_mask)
        out["disp_is_map"] = torch.tensor(is_map)
        out["gt"] = torch.tensor(np.stack([s.gt for s in snaps]), dtype=DTYPE)
    return out
