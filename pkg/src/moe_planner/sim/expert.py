"""Scripted expert driver: pure-pursuit steering plus IDM speed control."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..geometry import Path, resample, wrap_angle
from .idm import DEFAULT_IDM, IDMParams, idm_accel, integrate_speed


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    length: float = 4.6
    width: float = 1.9

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])

    def box(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.length, self.width])


@dataclass(frozen=True)
class Control:
    accel: float
    yaw_rate: float


def unicycle_step(state: VehicleState, control: Control, dt: float) -> VehicleState:
    h_mid = state.heading + 0.5 * control.yaw_rate * dt
    dist, v_new = integrate_speed(0.0, state.speed, control.accel, dt)
    return replace(
        state,
        x=state.x + dist * math.cos(h_mid),
        y=state.y + dist * math.sin(h_mid),
        heading=wrap_angle(state.heading + control.yaw_rate * dt),
        speed=v_new,
    )


def curvature(path: Path, window: int = 5) -> np.ndarray:
    """Unsigned curvature per path vertex, box-smoothed."""
    h = np.arctan2(path.seg_dir[:, 1], path.seg_dir[:, 0])
    k = np.zeros(len(path.points))
    if len(h) > 1:
        k[1:-1] = np.abs(wrap_angle(np.diff(h))) / (0.5 * (path.seg_len[1:] + path.seg_len[:-1]))
    kernel = np.ones(window) / window
    return np.convolve(k, kernel, mode="same")


def speed_profile(path: Path, v0: float, a_lat: float = 2.5, decel: float = 1.2) -> np.ndarray:
    """Per-vertex speed limit honouring lateral acceleration and a comfortable approach."""
    k = curvature(path)
    vlim = np.minimum(v0, np.sqrt(a_lat / np.maximum(k, 1e-9)))
    for i in range(len(vlim) - 2, -1, -1):
        vlim[i] = min(vlim[i], math.sqrt(vlim[i + 1] ** 2 + 2 * decel * path.seg_len[i]))
    return vlim


class ScriptedExpert:
    """Tracks a route with pure pursuit; IDM keeps distance to the nearest leader in the corridor."""

    def __init__(
        self,
        route_points: np.ndarray,
        v0: float,
        idm: IDMParams = DEFAULT_IDM,
        corridor: float = 2.0,
        max_yaw_rate: float = 1.0,
    ):
        self.route = Path(resample(route_points, spacing=1.0))
        self.v0 = v0
        self.idm = idm
        self.corridor = corridor
        self.max_yaw_rate = max_yaw_rate
        self.vlim = speed_profile(self.route, v0)

    def find_leader(self, ego: VehicleState, boxes: np.ndarray, speeds: np.ndarray, s_ego: float | None = None):
        """Nearest vehicle ahead along the route within the corridor: (gap, speed) or None."""
        if len(boxes) == 0:
            return None
        if s_ego is None:
            s_ego = float(self.route.project(ego.position)[0][0])
        s, lat = self.route.project(boxes[:, :2])
        ahead = (s > s_ego) & (np.abs(lat) < self.corridor)
        if not ahead.any():
            return None
        gaps = s - s_ego - 0.5 * (boxes[:, 3] + ego.length)
        gaps = np.where(ahead, gaps, np.inf)
        i = int(np.argmin(gaps))
        return float(gaps[i]), float(speeds[i])

    def control(self, ego: VehicleState, boxes: np.ndarray, speeds: np.ndarray) -> Control:
        s_ego = float(self.route.project(ego.position)[0][0])
        v_des = float(np.interp(s_ego, self.route.s, self.vlim))
        leader = self.find_leader(ego, boxes, speeds, s_ego)
        if leader is None:
            accel = idm_accel(ego.speed, params=self.idm, v0=v_des)
        else:
            accel = idm_accel(ego.speed, leader[1], leader[0], params=self.idm, v0=v_des)
        lookahead = max(4.0, 0.6 * ego.speed + 2.0)
        target = self.route.point_at(s_ego + lookahead)
        alpha = wrap_angle(math.atan2(target[1] - ego.y, target[0] - ego.x) - ego.heading)
        yaw_rate = ego.speed * 2.0 * math.sin(alpha) / lookahead
        yaw_rate = float(np.clip(yaw_rate, -self.max_yaw_rate, self.max_yaw_rate))
        return Control(accel, yaw_rate)


def scripted_expert(
    ego: VehicleState, expert: ScriptedExpert, boxes: np.ndarray, speeds: np.ndarray
) -> Control:
    return expert.control(ego, np.asarray(boxes, dtype=np.float64).reshape(-1, 5), np.asarray(speeds, dtype=np.float64))
