"""Shared oracles and invariant checks used by unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np

from moe_planner.scene import GeneratorConfig, Scenario


def scenario_violations(s: Scenario, cfg: GeneratorConfig | None = None) -> list[str]:
    """Every broken scenario invariant, as readable messages (empty when sound)."""
    cfg = cfg or GeneratorConfig()
    bad = []
    T = cfg.history_steps + 1 + cfg.log_steps
    t0 = s.t0
    tracks = [("av", s.av)] + [(f"agent{k}", a) for k, a in enumerate(s.agents)]
    for name, tr in tracks:
        if len(tr) != T:
            bad.append(f"{name}: {len(tr)} steps, expected {T}")
        if not tr.valid[t0]:
            bad.append(f"{name}: invalid at t=0")
        if not (tr.size[0] > 0 and tr.size[1] > 0):
            bad.append(f"{name}: non-positive size {tr.size}")
        h = tr.heading[tr.valid]
        if np.any(h <= -math.pi) or np.any(h > math.pi):
            bad.append(f"{name}: heading outside (-pi, pi]")
        inv = ~tr.valid
        if np.any(tr.position[inv]) or np.any(tr.velocity[inv]) or np.any(tr.heading[inv]):
            bad.append(f"{name}: invalid steps not zeroed")
    if not s.av.valid[t0: t0 + 1 + s.future_steps].all():
        bad.append("av future not valid over the horizon")
    if np.any(s.av.position[t0] != 0.0) or s.av.heading[t0] != 0.0:
        bad.append("scenario not in the AV frame at t=0")
    if s.gt_future().shape != (cfg.future_steps, 3):
        bad.append(f"gt shape {s.gt_future().shape}")
    if len(s.agents) > cfg.max_agents:
        bad.append(f"{len(s.agents)} agents exceed cap")
    if not 1 <= len(s.map_polylines) <= cfg.max_polylines:
        bad.append(f"{len(s.map_polylines)} polylines")
    for k, p in enumerate(s.map_polylines):
        if len(p.points) != cfg.polyline_points:
            bad.append(f"polyline {k}: {len(p.points)} points")
        if np.any(np.linalg.norm(np.diff(p.points, axis=0), axis=1) == 0):
            bad.append(f"polyline {k}: repeated consecutive points")
    if not 1 <= len(s.centerlines) <= cfg.max_centerlines:
        bad.append(f"{len(s.centerlines)} centerlines")
    for k, c in enumerate(s.centerlines):
        seg = np.linalg.norm(np.diff(c.points, axis=0), axis=1)
        if np.any(seg <= 0):
            bad.append(f"centerline {k}: arc length not monotone")
    if s.centerlines and np.linalg.norm(s.centerlines[0].points[-1] - s.goal) > 1.0:
        bad.append("goal is not at the end of the route centerline")
    return bad


def displacement_oracle(s: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Element-by-element x_a(t) - x_AV(t), written as plain loops."""
    T = s.future_steps
    rows, masks = [], []
    for a in s.agents:
        row, m = [], []
        for t in range(1, T + 1):
            i = s.t0 + t
            j = i
            while not a.valid[j]:
                j -= 1
            row.append([a.position[j][0] - s.av.position[i][0], a.position[j][1] - s.av.position[i][1]])
            m.append(bool(a.valid[i]))
        rows.append(row)
        masks.append(m)
    x0 = s.av.position[s.t0]
    for p in s.map_polylines:
        best, best_d = None, math.inf
        for q in p.points:
            d = (q[0] - x0[0]) ** 2 + (q[1] - x0[1]) ** 2
            if d < best_d:
                best, best_d = q, d
        rows.append([[best[0] - s.av.position[s.t0 + t][0], best[1] - s.av.position[s.t0 + t][1]]
                     for t in range(1, T + 1)])
        masks.append([True] * T)
    return np.array(rows, dtype=np.float64).reshape(-1, T, 2), np.array(masks, dtype=bool).reshape(-1, T)


def _corners(box) -> np.ndarray:
    x, y, h, length, width = (float(v) for v in box)
    c, s = math.cos(h), math.sin(h)
    local = [(length / 2, width / 2), (-length / 2, width / 2), (-length / 2, -width / 2), (length / 2, -width / 2)]
    return np.array([(x + u * c - v * s, y + u * s + v * c) for u, v in local])


def _boundary_samples(box, spacing: float) -> np.ndarray:
    corners = _corners(box)
    pts = [corners]
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        n = max(2, int(math.ceil(np.linalg.norm(b - a) / spacing)) + 1)
        f = np.linspace(0.0, 1.0, n)[:, None]
        pts.append(a + f * (b - a))
    return np.concatenate(pts)


def _inside(points: np.ndarray, box) -> np.ndarray:
    x, y, h, length, width = (float(v) for v in box)
    d = points - (x, y)
    u = d[:, 0] * math.cos(h) + d[:, 1] * math.sin(h)
    v = -d[:, 0] * math.sin(h) + d[:, 1] * math.cos(h)
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def sampled_overlap(a, b, spacing: float = 0.01) -> bool:
    """Overlap by dense boundary sampling: some sample of one box lies in the other."""
    return bool(_inside(_boundary_samples(a, spacing), b).any() or _inside(_boundary_samples(b, spacing), a).any())


def random_box_pairs(n: int, seed: int) -> np.ndarray:
    """(n, 2, 5) rectangle pairs concentrated around first contact."""
    g = np.random.default_rng(seed)
    size = g.uniform(0.5, 5.0, size=(n, 2, 2))
    heading = g.uniform(-math.pi, math.pi, size=(n, 2))
    reach = 0.5 * np.hypot(size[..., 0], size[..., 1]).sum(1)
    dist = reach * g.uniform(0.2, 1.1, size=n)
    ang = g.uniform(-math.pi, math.pi, size=n)
    out = np.zeros((n, 2, 5))
    out[:, 1, 0], out[:, 1, 1] = dist * np.cos(ang), dist * np.sin(ang)
    out[:, :, 2] = heading
    out[:, :, 3:] = size
    return out
