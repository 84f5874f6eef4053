from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ..geometry import rotate_into, to_frame, wrap_angle

DT = 0.1


class Category(IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    BICYCLE = 2


class PolylineKind(IntEnum):
    LANE_CENTER = 0
    ROAD_BOUNDARY = 1
    CROSSWALK = 2


@dataclass(frozen=True)
class AgentState:
    position: tuple[float, float]
    heading: float
    velocity: tuple[float, float]
    size: tuple[float, float]
    category: Category

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


def _arr_eq(a, b) -> bool:
    return np.array_equal(np.asarray(a), np.asarray(b))


@dataclass(eq=False)
class AgentTrack:
    """States over the scenario timeline; index ``history_steps`` is t = 0.

    Invalid steps hold zeroed placeholders.
    """

    position: np.ndarray  # (T, 2) m
    heading: np.ndarray  # (T,) rad
    velocity: np.ndarray  # (T, 2) m/s
    valid: np.ndarray  # (T,) bool
    size: tuple[float, float]  # (length, width) m
    category: Category = Category.VEHICLE

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1, 2)
        self.heading = np.asarray(self.heading, dtype=np.float64).reshape(-1)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(-1, 2)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        self.size = (float(self.size[0]), float(self.size[1]))
        self.category = Category(int(self.category))

    def __len__(self) -> int:
        return len(self.heading)

    def state(self, i: int) -> AgentState:
        return AgentState(
            position=tuple(self.position[i]),
            heading=float(self.heading[i]),
            velocity=tuple(self.velocity[i]),
            size=self.size,
            category=self.category,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            _arr_eq(self.position, other.position)
            and _arr_eq(self.heading, other.heading)
            and _arr_eq(self.velocity, other.velocity)
            and _arr_eq(self.valid, other.valid)
            and self.size == other.size
            and self.category == other.category
        )

    def transformed(self, origin, heading: float) -> "AgentTrack":
        pos = to_frame(self.position, origin, heading)
        vel = rotate_into(self.velocity, heading)
        hdg = wrap_angle(self.heading - heading)
        pos[~self.valid] = 0.0
        vel[~self.valid] = 0.0
        hdg = np.where(self.valid, hdg, 0.0)
        return AgentTrack(pos, hdg, vel, self.valid.copy(), self.size, self.category)


@dataclass(eq=False)
class MapPolyline:
    points: np.ndarray  # (n, 2) m
    kind: PolylineKind

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.kind = PolylineKind(int(self.kind))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapPolyline):
            return NotImplemented
        return self.kind == other.kind and _arr_eq(self.points, other.points)


@dataclass(eq=False)
class Centerline:
    points: np.ndarray  # (n, 2) m at fixed arc-length spacing

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Centerline):
            return NotImplemented
        return _arr_eq(self.points, other.points)


@dataclass(eq=False)
class RegionPolygon:
    exterior: np.ndarray  # (n, 2)
    holes: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.exterior = np.asarray(self.exterior, dtype=np.float64).reshape(-1, 2)
        self.holes = [np.asarray(h, dtype=np.float64).reshape(-1, 2) for h in self.holes]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionPolygon):
            return NotImplemented
        return (
            _arr_eq(self.exterior, other.exterior)
            and len(self.holes) == len(other.holes)
            and all(_arr_eq(a, b) for a, b in zip(self.holes, other.holes))
        )


@dataclass(eq=False)
class Scenario:
    """One driving episode in the frame of the AV at t = 0.

    Tracks cover ``history_steps`` past samples, t = 0, and ``log_steps`` future
    samples; the planning target is the first ``future_steps`` of the AV future.
    """

    av: AgentTrack
    agents: list[AgentTrack]
    map_polylines: list[MapPolyline]
    centerlines: list[Centerline]
    goal: np.ndarray
    drivable_region: list[RegionPolygon]
    seed: int
    topology: str = "straight"
    history_steps: int = 20
    future_steps: int = 40
    dt: float = DT

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(2)

    @property
    def t0(self) -> int:
        return self.history_steps

    @property
    def log_steps(self) -> int:
        return len(self.av) - self.history_steps - 1

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    def gt_future(self) -> np.ndarray:
        """AV (x, y, heading) over (0, T_f], shape (T_f, 3)."""
        sl = slice(self.t0 + 1, self.t0 + 1 + self.future_steps)
        return np.concatenate([self.av.position[sl], self.av.heading[sl, None]], axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.av == other.av
            and self.agents == other.agents
            and self.map_polylines == other.map_polylines
            and self.centerlines == other.centerlines
            and _arr_eq(self.goal, other.goal)
            and self.drivable_region == other.drivable_region
            and self.seed == other.seed
            and self.topology == other.topology
            and self.history_steps == other.history_steps
            and self.future_steps == other.future_steps
            and self.dt == other.dt
        )


def normalize_frame(s: Scenario) -> Scenario:
    """Re-express a scenario in the frame of its AV at t = 0."""
    origin = s.av.position[s.t0].copy()
    heading = float(s.av.heading[s.t0])
    return Scenario(
        av=s.av.transformed(origin, heading),
        agents=[a.transformed(origin, heading) for a in s.agents],
        map_polylines=[MapPolyline(to_frame(p.points, origin, heading), p.kind) for p in s.map_polylines],
        centerlines=[Centerline(to_frame(c.points, origin, heading)) for c in s.centerlines],
        goal=to_frame(s.goal, origin, heading),
        drivable_region=[
            RegionPolygon(to_frame(r.exterior, origin, heading), [to_frame(h, origin, heading) for h in r.holes])
            for r in s.drivable_region
        ],
        seed=s.seed,
        topology=s.topology,
        history_steps=s.history_steps,
        future_steps=s.future_steps,
        dt=s.dt,
    )
