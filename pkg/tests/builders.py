"""Hand-built scenarios for targeted simulator and rendering checks."""

from __future__ import annotations

import numpy as np

from moe_planner.scene import AgentTrack, Centerline, MapPolyline, PolylineKind, RegionPolygon, Scenario


def road_scenario(agents, T=40, H=20, log=80, av_speed=10.0, av_y=0.0):
    n = H + 1 + log
    ts = np.arange(-H, log + 1) * 0.1
    av_pos = np.stack([av_speed * ts, np.full(n, av_y)], axis=1)
    av = AgentTrack(av_pos, np.zeros(n), np.tile([av_speed, 0.0], (n, 1)), np.ones(n, bool), (4.6, 1.9))
    road = RegionPolygon([[-300, -5.25], [600, -5.25], [600, 5.25], [-300, 5.25]])
    lanes = [MapPolyline(np.stack([np.linspace(-20, 20, 20), np.full(20, y)], 1), PolylineKind.LANE_CENTER)
             for y in (0.0, 3.5)]
    centerline = Centerline(np.stack([np.arange(-50.0, 300.0), np.full(350, av_y)], 1))
    return Scenario(av, agents, lanes, [centerline], centerline.points[-1], [road], seed=0, history_steps=H,
                    future_steps=T)


def straight_agent(x0, y, v, n=101, H=20):
    ts = np.arange(-H, n - H) * 0.1
    pos = np.stack([x0 + v * ts, np.full(n, y)], axis=1)
    return AgentTrack(pos, np.zeros(n), np.tile([v, 0.0], (n, 1)), np.ones(n, bool), (4.6, 1.9))
