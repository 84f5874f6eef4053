"""Closed-loop rollouts under receding-horizon replanning.

The ego follows the highest-scoring planned trajectory. Each step it takes
the constant-curvature arc whose chord reaches the next waypoint. Other
agents either replay the log (``NR``) or, for vehicles and bicycles, follow
IDM along their logged path and react to the ego (``R``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..features import build_snapshot, collate
from ..geometry import Path, from_frame, to_frame, wrap_angle
from ..scene.types import DT, Category, Scenario
from .collision import DrivableArea, box_overlaps_many
from .idm import DEFAULT_IDM, IDMParams, idm_accel, integrate_speed

MODES = ("NR", "R")
LOG_REPLAY, IDM = "log_replay", "idm"
REPLAN_EVERY = 10
MAX_YAW_RATE = 2.0  # rad/s
MAX_SPEED = 40.0  # m/s
SENSOR_RANGE = 80.0


@dataclass
class SimState:
    t: int  # steps since the start of the rollout
    ego: np.ndarray  # x, y, heading, speed
    agents: np.ndarray  # (N, 5) x, y, heading, vx, vy
    present: np.ndarray  # (N,) bool
    controllers: list[str]


@dataclass
class PlanRecord:
    t: int
    trajectory: np.ndarray  # (T_f, 3) scenario frame
    scores: list[float] | None = None
    routing: list[list[int]] | None = None


@dataclass
class RolloutTrace:
    scenario_seed: int
    mode: str
    states: list[SimState] = field(default_factory=list)
    plans: list[PlanRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    aborted: bool = False

    def ego_path(self) -> np.ndarray:
        return np.array([s.ego for s in self.states])

    def to_jsonl(self) -> str:
        plans = {p.t: p for p in self.plans}
        events: dict[int, list] = {}
        for e in self.events:
            events.setdefault(e["t"], []).append(e)
        lines = []
        for s in self.states:
            rec = {
                "t": s.t,
                "mode": self.mode,
                "seed": self.scenario_seed,
                "ego": [float(v) for v in s.ego],
                "agents": [[float(v) for v in a] + [bool(p)] for a, p in zip(s.agents, s.present)],
                "controllers": s.controllers,
                "events": events.get(s.t, []),
            }
            if s.t in plans:
                p = plans[s.t]
                rec["plan"] = {"trajectory": p.trajectory.tolist(), "scores": p.scores, "routing": p.routing}
            lines.append(json.dumps(rec, separators=(",", ":")))
        return "\n".join(lines) + "\n"


@dataclass
class PlanResult:
    trajectory: np.ndarray  # (T_f, 3) in the ego frame at planning time
    scores: list[float] | None = None
    routing: list[list[int]] | None = None


# ---------------------------------------------------------------------------
# planners
# ---------------------------------------------------------------------------


class LearnedPlanner:
    """Runs a trained model on ego-frame snapshots and returns its top-scoring mode."""

    name = "learned"

    def __init__(self, model):
        self.model = model.eval()

    def plan(self, items: list[tuple[Scenario, SimState, "_AgentModel"]]) -> list[PlanResult]:
        snaps = [agents.snapshot(scn, state) for scn, state, agents in items]
        with torch.no_grad():
            out = self.model.plan(collate(snaps))
        best = out.best().numpy()
        scores = out.scores.numpy()
        routing = [[d.mask()[b].sum(0).tolist() for d in out.decisions] for b in range(len(items))]
        return [
            PlanResult(best[b], [float(v) for v in scores[b]], [[int(v) for v in r] for r in routing[b]])
            for b in range(len(items))
        ]


class LogReplayPlanner:
    """Plans the logged AV future, extrapolated at constant velocity past the log end."""

    name = "log_replay"

    def plan(self, items) -> list[PlanResult]:
        out = []
        for scn, state, _ in items:
            idx = scn.t0 + state.t + 1 + np.arange(scn.future_steps)
            pos = np.array([_log_pose(scn.av, i)[:2] for i in idx])
            hdg = np.array([_log_pose(scn.av, i)[2] for i in idx])
            local = to_frame(pos, state.ego[:2], state.ego[2])
            out.append(PlanResult(np.concatenate([local, wrap_angle(hdg - state.ego[2])[:, None]], axis=1)))
        return out


class ConstantSpeedPlanner:
    """Drives straight ahead at a fixed speed, ignoring everything (an aggressive probe)."""

    name = "constant_speed"

    def __init__(self, speed: float = 15.0, future_steps: int = 40, dt: float = 0.1):
        self.speed, self.future_steps, self.dt = speed, future_steps, dt

    def plan(self, items) -> list[PlanResult]:
        x = self.speed * self.dt * np.arange(1, self.future_steps + 1)
        traj = np.stack([x, np.zeros_like(x), np.zeros_like(x)], axis=1)
        return [PlanResult(traj.copy()) for _ in items]


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def track_waypoint(ego: np.ndarray, target, dt: float) -> np.ndarray:
    """Advance (x, y, heading, speed) one unicycle step towards ``target``.

    The ego first turns towards the target, limited to ``MAX_YAW_RATE``, then
    drives straight along its new heading for the target's projection on it,
    limited to ``MAX_SPEED``. A reachable target is hit exactly. The ego never
    reverses: a target behind it leaves it in place.
    """
    x, y, h, _ = ego
    dx, dy = float(target[0]) - x, float(target[1]) - y
    if math.hypot(dx, dy) < 1e-9:
        return np.array([x, y, h, 0.0])
    bearing = wrap_angle(math.atan2(dy, dx) - h)
    if abs(bearing) > 0.5 * math.pi:
        return np.array([x, y, h, 0.0])
    turn = float(np.clip(bearing, -MAX_YAW_RATE * dt, MAX_YAW_RATE * dt))
    h_new = h + turn
    dist = float(np.clip(dx * math.cos(h_new) + dy * math.sin(h_new), 0.0, MAX_SPEED * dt))
    return np.array([x + dist * math.cos(h_new), y + dist * math.sin(h_new), wrap_angle(h_new), dist / dt])


def _log_pose(track, i: int) -> np.ndarray:
    """(x, y, heading, vx, vy) at log index ``i``.

    Unobserved or out-of-log steps continue from the last observed sample at
    constant velocity.
    """
    if i < len(track) and track.valid[i]:
        return np.array([*track.position[i], track.heading[i], *track.velocity[i]])
    last = int(np.flatnonzero(track.valid[: min(i, len(track) - 1) + 1])[-1])
    pos = track.position[last] + track.velocity[last] * DT * (i - last)
    return np.array([*pos, track.heading[last], *track.velocity[last]])


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------


class _AgentModel:
    """Per-rollout agent bookkeeping: histories, reactive state, snapshot building."""

    def __init__(self, scn: Scenario, mode: str, idm: IDMParams):
        self.scn = scn
        self.mode = mode
        self.idm = idm
        n = len(scn.agents)
        H1 = scn.history_steps + 1
        self.sizes = np.array([a.size for a in scn.agents]).reshape(n, 2)
        self.reactive = np.array(
            [mode == "R" and a.category != Category.PEDESTRIAN for a in scn.agents], dtype=bool
        )
        self.controllers = [IDM if r else LOG_REPLAY for r in self.reactive]
        # history windows (H1, N, 5) and validity, seeded from the log
        self.hist = np.zeros((H1, n, 5))
        self.hist_valid = np.zeros((H1, n), dtype=bool)
        for k, a in enumerate(scn.agents):
            sl = slice(scn.t0 - H1 + 1, scn.t0 + 1)
            self.hist[:, k, :2] = a.position[sl]
            self.hist[:, k, 2] = a.heading[sl]
            self.hist[:, k, 3:] = a.velocity[sl]
            self.hist_valid[:, k] = a.valid[sl]
        self.paths: list[Path | None] = []
        self.s = np.zeros(n)
        self.v = np.zeros(n)
        self.v0 = np.zeros(n)
        for k, a in enumerate(scn.agents):
            if not self.reactive[k]:
                self.paths.append(None)
                continue
            path = _agent_path(a)
            self.paths.append(path)
            self.s[k] = float(path.project(a.position[scn.t0])[0][0])
            self.v[k] = float(np.hypot(*a.velocity[scn.t0]))
            speeds = np.hypot(a.velocity[a.valid, 0], a.velocity[a.valid, 1])
            self.v0[k] = max(float(speeds.max()), 1.0)

    def current(self) -> tuple[np.ndarray, np.ndarray]:
        return self.hist[-1], self.hist_valid[-1]

    def advance(self, t_next: int, ego: np.ndarray, ego_size, dt: float) -> None:
        """Move every agent to rollout step ``t_next`` given the ego state at the current step."""
        cur, present = self.current()
        new = np.zeros_like(cur)
        new_valid = np.zeros_like(present)
        accels = {}
        for k in np.flatnonzero(self.reactive):
            accels[k] = self._idm_accel(k, cur, present, ego, ego_size)
        for k, a in enumerate(self.scn.agents):
            if self.reactive[k]:
                self.s[k], self.v[k] = integrate_speed(self.s[k], self.v[k], accels[k], dt)
                path = self.paths[k]
                p = path.point_at(self.s[k])
                h = float(path.heading_at(self.s[k]))
                new[k] = (p[0], p[1], h, self.v[k] * math.cos(h), self.v[k] * math.sin(h))
                new_valid[k] = True
            else:
                i = self.scn.t0 + t_next
                new[k] = _log_pose(a, i)
                new_valid[k] = bool(a.valid[i]) if i < len(a.valid) else bool(a.valid[-1])
        self.hist = np.concatenate([self.hist[1:], new[None]], axis=0)
        self.hist_valid = np.concatenate([self.hist_valid[1:], new_valid[None]], axis=0)

    def _idm_accel(self, k: int, cur: np.ndarray, present: np.ndarray, ego: np.ndarray, ego_size) -> float:
        path = self.paths[k]
        me_len = self.sizes[k, 0]
        corridor = 2.25
        others = [j for j in range(len(cur)) if j != k and present[j]]
        pts = [ego[:2]] + [cur[j, :2] for j in others]
        lens = [ego_size[0]] + [self.sizes[j, 0] for j in others]
        speeds = [ego[3]] + [float(np.hypot(*cur[j, 3:5])) for j in others]
        s, lat = path.project(np.array(pts))
        ahead = (s > self.s[k]) & (np.abs(lat) < corridor)
        if not ahead.any():
            return idm_accel(self.v[k], params=self.idm, v0=self.v0[k])
        gaps = s - self.s[k] - 0.5 * (np.array(lens) + me_len)
        gaps = np.where(ahead, gaps, np.inf)
        i = int(np.argmin(gaps))
        return idm_accel(self.v[k], speeds[i], float(gaps[i]), params=self.idm, v0=self.v0[k])

    def snapshot(self, scn: Scenario, state: SimState):
        ego = state.ego
        near = np.linalg.norm(self.hist[:, :, :2] - ego[None, None, :2], axis=-1) <= SENSOR_RANGE
        valid = self.hist_valid & near
        keep = [k for k in np.argsort(np.linalg.norm(self.hist[-1, :, :2] - ego[:2], axis=-1), kind="stable")
                if valid[-1, k]]
        windows = [
            (self.hist[:, k, :2], self.hist[:, k, 2], self.hist[:, k, 3:5], valid[:, k], scn.agents[k].size,
             scn.agents[k].category)
            for k in keep
        ]
        vel = ego[3] * np.array([math.cos(ego[2]), math.sin(ego[2])])
        return build_snapshot(ego[:2], float(ego[2]), vel, scn.av.size, windows, scn.map_polylines, scn.centerlines)


def _agent_path(track) -> Path:
    pts = track.position[track.valid]
    if len(pts) >= 2 and np.linalg.norm(pts[-1] - pts[0]) > 1.0:
        return Path(pts)
    # barely moving agent: a straight path along its heading
    i = int(np.flatnonzero(track.valid)[0])
    d = np.array([math.cos(track.heading[i]), math.sin(track.heading[i])])
    return Path(np.stack([track.position[i], track.position[i] + 100.0 * d]))


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


def _boxes(agents: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    return np.concatenate([agents[:, :3], sizes], axis=1)


class _Rollout:
    def __init__(self, scn: Scenario, mode: str, idm: IDMParams):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.scn = scn
        self.agents = _AgentModel(scn, mode, idm)
        t0 = scn.t0
        v0 = float(np.hypot(*scn.av.velocity[t0]))
        ego = np.array([*scn.av.position[t0], scn.av.heading[t0], v0])
        cur, present = self.agents.current()
        self.state = SimState(0, ego, cur.copy(), present.copy(), list(self.agents.controllers))
        self.trace = RolloutTrace(scn.seed, mode, [self.state])
        self.plan_world: np.ndarray | None = None
        self.plan_t = 0
        self.area = DrivableArea(scn.drivable_region)
        self._check_events(self.state)

    def set_plan(self, result: PlanResult) -> None:
        traj = np.asarray(result.trajectory, dtype=np.float64)
        world = from_frame(traj[:, :2], self.state.ego[:2], float(self.state.ego[2]))
        hdg = wrap_angle(traj[:, 2] + self.state.ego[2])
        self.plan_world = np.concatenate([world, np.asarray(hdg).reshape(-1, 1)], axis=1)
        self.plan_t = self.state.t
        self.trace.plans.append(PlanRecord(self.state.t, self.plan_world, result.scores, result.routing))

    def step(self, dt: float) -> None:
        st = self.state
        k = min(st.t - self.plan_t, len(self.plan_world) - 1)
        ego = track_waypoint(st.ego, self.plan_world[k, :2], dt)
        self.agents.advance(st.t + 1, st.ego, self.scn.av.size, dt)
        cur, present = self.agents.current()
        self.state = SimState(st.t + 1, ego, cur.copy(), present.copy(), list(self.agents.controllers))
        self.trace.states.append(self.state)
        self._check_events(self.state)

    def _check_events(self, st: SimState) -> None:
        ego_box = np.array([st.ego[0], st.ego[1], st.ego[2], *self.scn.av.size])
        if len(st.agents):
            hit = box_overlaps_many(ego_box, _boxes(st.agents, self.agents.sizes)) & st.present
            if hit.any():
                self.trace.events.append({"t": st.t, "type": "collision", "agents": [int(i) for i in np.flatnonzero(hit)]})
        if not self.area.contains_box(ego_box):
            self.trace.events.append({"t": st.t, "type": "offroad"})


def rollout_many(
    planner,
    scenarios: list[Scenario],
    mode: str = "NR",
    horizon_s: float = 8.0,
    replan_every: int = REPLAN_EVERY,
    idm: IDMParams = DEFAULT_IDM,
) -> list[RolloutTrace]:
    """Lockstep rollouts sharing batched planner calls; deterministic.

    A trace holds ``horizon_s / dt`` states, the initial one included.
    """
    runs = [_Rollout(s, mode, idm) for s in scenarios]
    steps = int(round(horizon_s / (scenarios[0].dt if scenarios else 0.1)))
    for t in range(steps - 1):
        active = [r for r in runs if not r.trace.aborted]
        if not active:
            break
        if t % replan_every == 0:
            _replan(planner, active)
            active = [r for r in active if not r.trace.aborted]
        for r in active:
            r.step(r.scn.dt)
    return [r.trace for r in runs]


def _replan(planner, runs: list[_Rollout]) -> None:
    items = [(r.scn, r.state, r.agents) for r in runs]
    try:
        results = planner.plan(items)
    except Exception:  # isolate the failing scenario(s)
        results = []
        for item in items:
            try:
                results.append(planner.plan([item])[0])
            except Exception as exc:
                results.append(exc)
    for r, res in zip(runs, results):
        if isinstance(res, Exception) or not np.all(np.isfinite(res.trajectory)):
            msg = repr(res) if isinstance(res, Exception) else "non-finite plan"
            r.trace.events.append({"t": r.state.t, "type": "planner_failure", "message": msg})
            r.trace.aborted = True
        else:
            r.set_plan(res)


def open_loop_plans(planner, scenarios: list[Scenario]) -> list[np.ndarray]:
    """Each planner's first plan at t = 0, (T_f, 3) in the scenario frame."""
    if not scenarios:
        return []
    runs = [_Rollout(s, "NR", DEFAULT_IDM) for s in scenarios]
    for r, res in zip(runs, planner.plan([(r.scn, r.state, r.agents) for r in runs])):
        r.set_plan(res)
    return [r.plan_world for r in runs]


def rollout(planner, scenario: Scenario, mode: str = "NR", horizon_s: float = 8.0, **kw) -> RolloutTrace:
    return rollout_many(planner, [scenario], mode, horizon_s, **kw)[0]
