"""Synthetic driving scenarios with scripted-expert demonstrations.

A scenario is produced by building a small road world for the requested
topology, placing agents on lanes at IDM-consistent spacing, and jointly
simulating the scripted AV expert and IDM lane agents. Logs with an AV
collision or an off-road AV footprint are discarded and regenerated from a
derived seed, so generation stays a pure function of ``(config, seed)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import LineString, Polygon
from shapely.ops import unary_union

from ..geometry import Path, resample, wrap_angle
from ..sim.collision import DrivableArea, box_overlaps_many
from ..sim.expert import ScriptedExpert, VehicleState, unicycle_step
from ..sim.idm import DEFAULT_IDM, desired_gap, idm_accel, integrate_speed
from .types import (
    AgentTrack,
    Category,
    Centerline,
    MapPolyline,
    PolylineKind,
    RegionPolygon,
    Scenario,
    normalize_frame,
)

TOPOLOGIES = ("straight", "curved", "intersection", "lane_change")


class GenerationError(RuntimeError):
    pass


@dataclass
class GeneratorConfig:
    topology: str = "straight"
    num_agents: tuple[int, int] = (2, 10)
    speed_range: tuple[float, float] = (6.0, 14.0)
    history_steps: int = 20
    future_steps: int = 40
    log_steps: int = 120
    max_agents: int = 16
    max_polylines: int = 32
    polyline_points: int = 20
    max_centerlines: int = 4
    lane_width: float = 3.5
    sensor_range: float = 80.0
    pedestrian_prob: float = 0.1
    bicycle_prob: float = 0.1
    lead_gap: float | None = None
    lead_speed: float | None = None
    max_attempts: int = 40

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise GenerationError(f"unknown topology {self.topology!r}")
        self.num_agents = (int(self.num_agents[0]), int(self.num_agents[1]))
        self.speed_range = (float(self.speed_range[0]), float(self.speed_range[1]))
        if self.num_agents[0] > self.num_agents[1] or self.num_agents[0] < 0:
            raise GenerationError(f"bad agent count range {self.num_agents}")
        if self.log_steps < self.future_steps:
            raise GenerationError("log_steps must cover future_steps")


# ---------------------------------------------------------------------------
# worlds
# ---------------------------------------------------------------------------


@dataclass
class _World:
    lanes: list[Path]
    route: np.ndarray
    route_lane: int
    av_start: np.ndarray
    drivable: object
    alt_offset: float | None = None
    crosswalks: list[np.ndarray] = field(default_factory=list)
    sidewalks: list[Path] = field(default_factory=list)
    crossing_lanes: list[int] = field(default_factory=list)
    conflict_point: np.ndarray | None = None


def _normals(points: np.ndarray) -> np.ndarray:
    tang = np.gradient(points, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    return np.stack([-tang[:, 1], tang[:, 0]], axis=1)


def _offset(points: np.ndarray, d: float) -> np.ndarray:
    """Shift a polyline laterally (left positive)."""
    return points + d * _normals(points)


def _straight(x0: float, x1: float, y: float) -> np.ndarray:
    xs = np.arange(x0, x1 + 0.5, 1.0)
    return np.stack([xs, np.full_like(xs, y)], axis=1)


def _arc(center, radius: float, a0: float, a1: float, step: float = 1.0) -> np.ndarray:
    n = max(2, int(abs(a1 - a0) * radius / step) + 1)
    a = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def _rect(x0: float, x1: float, y0: float, y1: float) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]])


def _drivable(lanes: list[np.ndarray], half_width: float):
    geom = unary_union([LineString(p).buffer(half_width, cap_style="flat", join_style="round") for p in lanes])
    return geom.simplify(0.02)


def _sidewalks(lane_w: float, n_lanes: int, x0: float = -150.0, x1: float = 450.0) -> list[Path]:
    return [Path(_straight(x0, x1, -lane_w / 2 - 2.5)), Path(_straight(x0, x1, (n_lanes - 0.5) * lane_w + 2.5))]


def _world_straight(rng, cfg: GeneratorConfig) -> _World:
    w = cfg.lane_width
    lanes = [_straight(-150, 450, 0.0), _straight(-150, 450, w)]
    return _World(
        lanes=[Path(p) for p in lanes],
        route=lanes[0],
        route_lane=0,
        av_start=np.array([0.0, 0.0]),
        drivable=_drivable(lanes, w / 2 + 0.25),
        alt_offset=w,
        sidewalks=_sidewalks(w, 2),
    )


def _world_lane_change(rng, cfg: GeneratorConfig) -> _World:
    world = _world_straight(rng, cfg)
    w = cfg.lane_width
    x_start = 25.0 + rng.uniform(5.0, 35.0)
    length = rng.uniform(30.0, 50.0)
    xs = world.lanes[0].points[:, 0]
    ramp = np.clip((xs - x_start) / length, 0.0, 1.0)
    ys = w * 0.5 * (1 - np.cos(np.pi * ramp))
    world.route = np.stack([xs, ys], axis=1)
    world.alt_offset = w
    return world


def _world_curved(rng, cfg: GeneratorConfig) -> _World:
    w = cfg.lane_width
    x_curve = 30.0 + rng.uniform(0.0, 40.0)
    radius = rng.uniform(50.0, 120.0)
    sweep = rng.uniform(np.pi / 4, np.pi / 2)
    sign = rng.choice([-1.0, 1.0])
    lead_in = _straight(-150, x_curve, 0.0)
    center = np.array([x_curve, sign * radius])
    a0 = -sign * np.pi / 2
    arc = _arc(center, radius, a0, a0 + sign * sweep)[1:]
    end_heading = sign * sweep
    tail_len = 400.0
    tail = arc[-1] + np.outer(np.arange(1.0, tail_len + 1.0), [math.cos(end_heading), math.sin(end_heading)])
    ref = resample(np.concatenate([lead_in, arc, tail]), spacing=1.0)
    lanes = [ref, resample(_offset(ref, w), spacing=1.0)]
    return _World(
        lanes=[Path(p) for p in lanes],
        route=lanes[0],
        route_lane=0,
        av_start=np.array([0.0, 0.0]),
        drivable=_drivable(lanes, w / 2 + 0.25),
        alt_offset=w,
    )


def _world_intersection(rng, cfg: GeneratorConfig) -> _World:
    w = cfg.lane_width
    xc = 50.0 + rng.uniform(0.0, 30.0)
    main = [_straight(-150, 450, 0.0), _straight(-150, 450, w)]
    cross = [np.stack([np.full(601, xc), np.arange(-150.0, 451.0)], axis=1),
             np.stack([np.full(601, xc + w), np.arange(-150.0, 451.0)], axis=1)]
    turn_left = rng.uniform() < 0.5
    lanes = main + cross
    if turn_left:
        radius = 9.0
        center = np.array([xc - radius, w + radius])
        approach = _straight(-150, xc - radius, w)
        arc = _arc(center, radius, -np.pi / 2, 0.0, step=0.5)[1:]
        exit_ = np.stack([np.full(440, xc), np.arange(w + radius + 1.0, w + radius + 441.0)], axis=1)
        route = resample(np.concatenate([approach, arc, exit_]), spacing=1.0)
        lanes = lanes + [route]
        route_lane, alt = 1, None
        start = np.array([0.0, w])
    else:
        route = main[0]
        route_lane, alt = 0, w
        start = np.array([0.0, 0.0])
    crosswalks = [
        _rect(xc - 8.5, xc - 5.5, -w / 2 - 0.5, 1.5 * w + 0.5),
        _rect(xc - w / 2 - 0.5, xc + 1.5 * w + 0.5, -8.5, -5.5),
    ]
    world = _World(
        lanes=[Path(p) for p in lanes],
        route=route,
        route_lane=route_lane,
        av_start=start,
        drivable=_drivable(lanes, w / 2 + 0.25),
        alt_offset=alt,
        crosswalks=crosswalks,
        sidewalks=_sidewalks(w, 2, -150.0, xc - w),
        crossing_lanes=[2, 3],
        conflict_point=np.array([xc + w / 2, w / 2]),
    )
    if turn_left:
        # the turn connector is not a spawn lane
        world.lanes = world.lanes[:4]
    return world


_WORLDS = {
    "straight": _world_straight,
    "lane_change": _world_lane_change,
    "curved": _world_curved,
    "intersection": _world_intersection,
}


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------


@dataclass
class _LaneAgent:
    lane: int
    s: float
    v: float
    v0: float
    length: float
    width: float
    category: Category


@dataclass
class _Walker:
    path: Path
    s: float
    v: float  # signed along path
    length: float = 0.6
    width: float = 0.6
    category: Category = Category.PEDESTRIAN


def _spacing_ok(lane_agents: list[_LaneAgent], cand: _LaneAgent) -> bool:
    for o in lane_agents:
        if o.lane != cand.lane:
            continue
        back, front = (cand, o) if o.s >= cand.s else (o, cand)
        gap = front.s - back.s - 0.5 * (front.length + back.length)
        if gap < desired_gap(back.v, back.v):
            return False
    return True


def _place_agents(rng, world: _World, cfg: GeneratorConfig, av_speed: float, av_len: float):
    n = int(rng.integers(cfg.num_agents[0], cfg.num_agents[1] + 1))
    av_lane = world.lanes[world.route_lane]
    s_av = float(av_lane.project(world.av_start)[0][0])
    av_proxy = _LaneAgent(world.route_lane, s_av, av_speed, av_speed, av_len, 1.9, Category.VEHICLE)
    lane_agents: list[_LaneAgent] = []
    walkers: list[_Walker] = []

    if cfg.lead_speed is not None and n > 0:
        gap = 30.0 if cfg.lead_gap is None else cfg.lead_gap
        length = 4.6
        lead = _LaneAgent(world.route_lane, s_av + gap + 0.5 * (length + av_len), cfg.lead_speed,
                          cfg.lead_speed, length, 1.9, Category.VEHICLE)
        if not _spacing_ok([av_proxy], lead):
            raise GenerationError("lead agent violates IDM spacing")
        lane_agents.append(lead)
        n -= 1

    av_arrival = None
    if world.conflict_point is not None:
        av_arrival = (world.conflict_point[0] - world.av_start[0]) / max(av_speed, 1e-3)

    for _ in range(n):
        placed = False
        for _try in range(80):
            roll = rng.uniform()
            if roll < cfg.pedestrian_prob and world.sidewalks:
                path = world.sidewalks[int(rng.integers(len(world.sidewalks)))]
                s = float(path.project(world.av_start)[0][0] + rng.uniform(-30.0, 80.0))
                v = float(rng.uniform(0.8, 1.6) * rng.choice([-1.0, 1.0]))
                if all(abs(s - o.s) > 2.0 or o.path is not path for o in walkers):
                    walkers.append(_Walker(path, s, v))
                    placed = True
                    break
                continue
            if roll < cfg.pedestrian_prob + cfg.bicycle_prob:
                cat, length, width = Category.BICYCLE, 1.8, 0.7
                v = float(rng.uniform(3.0, 6.0))
            else:
                cat = Category.VEHICLE
                length, width = float(rng.uniform(4.2, 5.0)), float(rng.uniform(1.8, 2.0))
                v = float(rng.uniform(*cfg.speed_range))
            lane = int(rng.integers(len(world.lanes)))
            path = world.lanes[lane]
            if lane in world.crossing_lanes:
                s_conf = float(path.project(world.conflict_point)[0][0])
                t_arr = float(rng.uniform(-6.0, 16.0))
                if abs(t_arr - av_arrival) < 4.5:
                    continue
                s = s_conf - v * t_arr
            else:
                s_ref = float(path.project(world.av_start)[0][0])
                s = s_ref + float(rng.uniform(-60.0, 120.0))
            cand = _LaneAgent(lane, s, v, v, length, width, cat)
            others = lane_agents + ([av_proxy] if lane == world.route_lane else [])
            if _spacing_ok(others, cand):
                lane_agents.append(cand)
                placed = True
                break
        if not placed:
            raise GenerationError(f"cannot place {n} agents at IDM-consistent spacing")
    return lane_agents, walkers


# ---------------------------------------------------------------------------
# joint simulation
# ---------------------------------------------------------------------------


def _lane_leader(agents: list[_LaneAgent], i: int, av: VehicleState, av_proj: dict, corridor: float):
    me = agents[i]
    best = None
    for j, o in enumerate(agents):
        if j == i or o.lane != me.lane or o.s <= me.s:
            continue
        gap = o.s - me.s - 0.5 * (o.length + me.length)
        if best is None or gap < best[0]:
            best = (gap, o.v)
    s_av, lat = av_proj[me.lane]
    if abs(lat) < corridor and s_av > me.s:
        gap = s_av - me.s - 0.5 * (av.length + me.length)
        if best is None or gap < best[0]:
            best = (float(gap), av.speed)
    return best


def _simulate(world: _World, cfg: GeneratorConfig, av: VehicleState, av_v0: float,
              lane_agents: list[_LaneAgent], walkers: list[_Walker]):
    steps = cfg.history_steps + 1 + cfg.log_steps
    dt = 0.1
    expert = ScriptedExpert(world.route, av_v0)
    n_agents = len(lane_agents) + len(walkers)
    av_log = np.zeros((steps, 4))  # x, y, heading, speed
    ag_log = np.zeros((steps, n_agents, 4))
    sizes = np.array([[a.length, a.width] for a in lane_agents] + [[w.length, w.width] for w in walkers]).reshape(-1, 2)
    corridor = cfg.lane_width / 2 + 0.5

    def agent_states():
        out = np.zeros((n_agents, 4))
        for k, a in enumerate(lane_agents):
            p = world.lanes[a.lane]
            out[k, :2] = p.point_at(a.s)
            out[k, 2] = p.heading_at(a.s)
            out[k, 3] = a.v
        for k, wk in enumerate(walkers, start=len(lane_agents)):
            out[k, :2] = wk.path.point_at(wk.s)
            h = float(wk.path.heading_at(wk.s))
            out[k, 2] = h if wk.v >= 0 else h + math.pi
            out[k, 3] = abs(wk.v)
        return out

    for t in range(steps):
        states = agent_states()
        av_log[t] = (av.x, av.y, av.heading, av.speed)
        ag_log[t] = states
        if t == steps - 1:
            break
        boxes = np.concatenate([states[:, :3], sizes], axis=1)
        ctrl = expert.control(av, boxes[: len(lane_agents)], states[: len(lane_agents), 3])
        accels = []
        av_proj = {}
        for lane in {a.lane for a in lane_agents}:
            s_av, lat = world.lanes[lane].project(av.position)
            av_proj[lane] = (float(s_av[0]), float(lat[0]))
        for i, a in enumerate(lane_agents):
            leader = _lane_leader(lane_agents, i, av, av_proj, corridor)
            if leader is None:
                accels.append(idm_accel(a.v, params=DEFAULT_IDM, v0=a.v0))
            else:
                accels.append(idm_accel(a.v, leader[1], leader[0], params=DEFAULT_IDM, v0=a.v0))
        av = unicycle_step(av, ctrl, dt)
        for a, acc in zip(lane_agents, accels):
            a.s, a.v = integrate_speed(a.s, a.v, acc, dt)
        for wk in walkers:
            wk.s += wk.v * dt
    return av_log, ag_log, sizes


def _track(log: np.ndarray, valid: np.ndarray, size, category) -> AgentTrack:
    vel = log[:, 3:4] * np.stack([np.cos(log[:, 2]), np.sin(log[:, 2])], axis=1)
    pos = log[:, :2].copy()
    hdg = log[:, 2].copy()
    pos[~valid] = 0.0
    vel[~valid] = 0.0
    hdg[~valid] = 0.0
    return AgentTrack(pos, wrap_angle(hdg), vel, valid, tuple(size), category)


def _chop(points: np.ndarray, piece_len: float, n_points: int) -> list[np.ndarray]:
    path = Path(points)
    n = max(1, int(math.ceil(path.length / piece_len)))
    edges = np.linspace(0.0, path.length, n + 1)
    return [path.point_at(np.linspace(edges[k], edges[k + 1], n_points)) for k in range(n)]


def _rings(geom) -> list[tuple[np.ndarray, list[np.ndarray]]]:
    polys = [geom] if isinstance(geom, Polygon) else list(geom.geoms)
    return [(np.asarray(p.exterior.coords), [np.asarray(r.coords) for r in p.interiors]) for p in polys]


def _build_map(world: _World, cfg: GeneratorConfig, av_log: np.ndarray) -> list[MapPolyline]:
    lines: list[tuple[np.ndarray, PolylineKind]] = []
    for lane in world.lanes:
        lines.append((lane.points, PolylineKind.LANE_CENTER))
    if world.route_lane is not None and not any(np.array_equal(world.route, l.points) for l in world.lanes):
        lines.append((world.route, PolylineKind.LANE_CENTER))
    for ext, holes in _rings(world.drivable):
        lines.append((ext, PolylineKind.ROAD_BOUNDARY))
        for h in holes:
            lines.append((h, PolylineKind.ROAD_BOUNDARY))
    for cw in world.crosswalks:
        lines.append((cw, PolylineKind.CROSSWALK))

    t0 = cfg.history_steps
    future = av_log[t0:, :2]
    origin = av_log[t0, :2]
    pieces = []
    for pts, kind in lines:
        for piece in _chop(pts, piece_len=19.0, n_points=cfg.polyline_points):
            d_path = np.min(np.linalg.norm(piece[:, None, :] - future[None, ::5, :], axis=-1))
            if d_path > 20.0:
                continue
            d0 = float(np.min(np.linalg.norm(piece - origin, axis=1)))
            pieces.append((d0, len(pieces), piece, kind))
    pieces.sort(key=lambda x: (x[0], x[1]))
    return [MapPolyline(p, k) for _, _, p, k in pieces[: cfg.max_polylines]]


def _centerlines(world: _World, cfg: GeneratorConfig, av_log: np.ndarray) -> list[Centerline]:
    route = Path(resample(world.route, spacing=1.0))
    s_start = float(route.project(av_log[0, :2])[0][0]) - 5.0
    s_end = float(route.project(av_log[-1, :2])[0][0]) + 60.0
    ss = np.arange(s_start, s_end + 1e-9, 1.0)
    main = route.point_at(ss)
    out = [Centerline(main)]
    if world.alt_offset is not None and cfg.max_centerlines > 1:
        s0 = float(route.project(av_log[cfg.history_steps, :2])[0][0])
        ramp = np.clip((ss - (s0 + 10.0)) / 40.0, 0.0, 1.0)
        off = world.alt_offset * 0.5 * (1 + np.cos(np.pi * ramp))
        alt_pts = resample(main + _normals(main) * off[:, None], spacing=1.0)
        out.append(Centerline(alt_pts))
    return out[: cfg.max_centerlines]


def _attempt(cfg: GeneratorConfig, seed: int, attempt: int) -> Scenario | None:
    rng = np.random.default_rng([seed, attempt, TOPOLOGIES.index(cfg.topology)])
    world = _WORLDS[cfg.topology](rng, cfg)
    av_v0 = float(rng.uniform(*cfg.speed_range))
    expert_probe = ScriptedExpert(world.route, av_v0)
    s0 = float(expert_probe.route.project(world.av_start)[0][0])
    av_speed = float(min(av_v0, np.interp(s0, expert_probe.route.s, expert_probe.vlim)))
    av_len, av_wid = 4.6, 1.9
    heading0 = float(expert_probe.route.heading_at(s0))
    av = VehicleState(float(world.av_start[0]), float(world.av_start[1]), heading0, av_speed, av_len, av_wid)
    lane_agents, walkers = _place_agents(rng, world, cfg, av_speed, av_len)

    av_log, ag_log, sizes = _simulate(world, cfg, av, av_v0, lane_agents, walkers)

    # reject logs where the expert collides or leaves the road
    area = DrivableArea([RegionPolygon(e, h) for e, h in _rings(world.drivable.buffer(-0.05))])
    av_boxes = np.concatenate([av_log[:, :3], np.tile([av_len, av_wid], (len(av_log), 1))], axis=1)
    if not area.contains_boxes(av_boxes).all():
        return None
    for t in range(len(av_log)):
        others = np.concatenate([ag_log[t, :, :3], sizes], axis=1)
        if box_overlaps_many(av_boxes[t], others).any():
            return None

    t0 = cfg.history_steps
    dist = np.linalg.norm(ag_log[:, :, :2] - av_log[:, None, :2], axis=-1)
    valid = dist <= cfg.sensor_range
    keep = [k for k in np.argsort(dist[t0], kind="stable") if valid[t0, k]][: cfg.max_agents]
    categories = [a.category for a in lane_agents] + [w.category for w in walkers]
    agents = [_track(ag_log[:, k], valid[:, k], sizes[k], categories[k]) for k in keep]
    av_track = _track(av_log, np.ones(len(av_log), dtype=bool), (av_len, av_wid), Category.VEHICLE)

    centerlines = _centerlines(world, cfg, av_log)
    scenario = Scenario(
        av=av_track,
        agents=agents,
        map_polylines=_build_map(world, cfg, av_log),
        centerlines=centerlines,
        goal=centerlines[0].points[-1],
        drivable_region=[RegionPolygon(e, h) for e, h in _rings(world.drivable)],
        seed=seed,
        topology=cfg.topology,
        history_steps=cfg.history_steps,
        future_steps=cfg.future_steps,
    )
    return normalize_frame(scenario)


def generate_scenario(config: GeneratorConfig, seed: int) -> Scenario:
    """Deterministic in ``(config, seed)``."""
    for attempt in range(config.max_attempts):
        s = _attempt(config, seed, attempt)
        if s is not None:
            return s
    raise GenerationError(f"no safe expert log after {config.max_attempts} attempts (seed {seed})")
