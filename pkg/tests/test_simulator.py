from __future__ import annotations

import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from builders import road_scenario, straight_agent
from conftest import scenario
from invariants import random_box_pairs, sampled_overlap
from moe_planner.geometry import box_corners
from moe_planner.scene import (
    GeneratorConfig,
    RegionPolygon,
    generate_scenario,
)
from moe_planner.sim.collision import DrivableArea, box_overlaps_many, boxes_overlap
from moe_planner.sim.expert import Control, ScriptedExpert, VehicleState, unicycle_step
from moe_planner.sim.idm import DEFAULT_IDM, desired_gap, idm_accel, integrate_speed
from moe_planner.sim.metrics import rms_jerk, route_progress, score
from moe_planner.sim.simulator import (
    ConstantSpeedPlanner,
    LogReplayPlanner,
    PlanResult,
    open_loop_plans,
    rollout,
    rollout_many,
    track_waypoint,
)

P = DEFAULT_IDM


# IDM


def test_idm_free_road():
    assert idm_accel(P.v0) == 0.0
    assert idm_accel(0.0) == P.a_max


def test_idm_hand_evaluation():
    s_star = 2.0 + 10.0 * 1.5 + 10.0 * 0.0 / (2 * math.sqrt(1.5 * 2.0))
    expect = 1.5 * (1 - (10 / 15) ** 4 - (s_star / 30) ** 2)
    assert idm_accel(10.0, 10.0, 30.0) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.722037, abs=1e-6)


def test_idm_emergency_and_clamp():
    assert idm_accel(5.0, 5.0, 0.0) == -P.b_max
    assert idm_accel(5.0, 5.0, -1.0) == -P.b_max
    assert idm_accel(20.0, 0.0, 0.5) == -P.b_max
    assert desired_gap(0.0, 10.0) == P.s0


def test_integrate_speed_never_reverses():
    s, v = integrate_speed(0.0, 1.0, -9.0, 0.5)
    assert v == 0.0 and s == pytest.approx(1.0 / 18.0)


# expert


def _straight_expert(v0=10.0):
    return ScriptedExpert(np.stack([np.linspace(-50, 400, 451), np.zeros(451)], axis=1), v0)


def test_expert_empty_road_holds_speed():
    ex = _straight_expert()
    car = VehicleState(0.0, 0.0, 0.0, 10.0)
    for _ in range(100):
        car = unicycle_step(car, ex.control(car, np.zeros((0, 5)), np.zeros(0)), 0.1)
    assert car.speed == pytest.approx(10.0, abs=1e-9) and abs(car.y) < 1e-9 and abs(car.heading) < 1e-9


def test_expert_stops_behind_stopped_lead():
    ex = _straight_expert()
    car = VehicleState(0.0, 0.0, 0.0, 10.0)
    lead = np.array([[0.5 * 4.6 + 20.0 + 0.5 * 4.6, 0.0, 0.0, 4.6, 1.9]])
    for _ in range(400):
        car = unicycle_step(car, ex.control(car, lead, np.zeros(1)), 0.1)
    gap = lead[0, 0] - car.x - 4.6
    assert car.speed < 0.05 and gap >= P.s0 - 1e-3


def test_expert_is_deterministic():
    ex = _straight_expert()
    car = VehicleState(0.0, 0.3, 0.05, 8.0)
    boxes = np.array([[30.0, 0.0, 0.0, 4.6, 1.9]])
    a = ex.control(car, boxes, np.array([3.0]))
    b = _straight_expert().control(car, boxes, np.array([3.0]))
    assert a == b and isinstance(a, Control)


# collision


def test_axis_aligned_overlap():
    assert boxes_overlap([0, 0, 0, 1, 1], [0.5, 0, 0, 1, 1])


def test_rotated_near_miss():
    a, b = [0, 0, math.pi / 4, 1, 1], [2.0, 0, math.pi / 4, 1, 1]
    assert not boxes_overlap(a, b) and not sampled_overlap(a, b)


def test_sat_agrees_with_sampling_oracle_on_sample():
    pairs = random_box_pairs(300, seed=1)
    for a, b in pairs:
        pa, pb = Polygon(box_corners(a[:2], a[2], a[3], a[4])), Polygon(box_corners(b[:2], b[2], b[3], b[4]))
        if pa.distance(pb) > 1e-3 or pa.buffer(-1e-3, join_style="mitre").intersects(pb):
            assert boxes_overlap(a, b) == sampled_overlap(a, b)
    many = box_overlaps_many(pairs[0, 0], pairs[:, 1])
    assert many.tolist() == [boxes_overlap(pairs[0, 0], b) for b in pairs[:, 1]]


def test_drivable_area_footprint():
    area = DrivableArea([RegionPolygon([[0, -2], [50, -2], [50, 2], [0, 2]])])
    assert area.contains_box([10, 0, 0, 4.6, 1.9])
    assert not area.contains_box([10, 1.5, 0, 4.6, 1.9])  # centre inside, corner outside
    assert area.contains_boxes(np.array([[10, 0, 0, 4.6, 1.9], [60, 0, 0, 1, 1]])).tolist() == [True, False]
    assert not DrivableArea([]).contains_box([0, 0, 0, 1, 1])


# kinematics


def test_track_waypoint_reaches_reachable_target():
    ego = np.array([0.0, 0.0, 0.0, 10.0])
    nxt = track_waypoint(ego, (1.0, 0.0), 0.1)
    assert nxt.tolist() == [1.0, 0.0, 0.0, 10.0]
    turn = track_waypoint(ego, (1.0, 0.05), 0.1)
    assert np.allclose(turn[:2], [1.0, 0.05], atol=1e-12)
    assert turn[2] == pytest.approx(math.atan2(0.05, 1.0))
    assert turn[3] == pytest.approx(math.hypot(1.0, 0.05) / 0.1)


def test_track_waypoint_heading_does_not_build_up():
    # a plan whose first waypoint is slightly off the line, then straight again
    ego = np.array([0.0, 0.0, 0.0, 10.0])
    plan = [(1.0, 0.04)] + [(1.0 + k, 0.0) for k in range(1, 10)]
    for wp in plan:
        ego = track_waypoint(ego, wp, 0.1)
    assert np.allclose(ego[:2], plan[-1], atol=1e-12)
    assert ego[2] == pytest.approx(0.0, abs=1e-12)


def test_track_waypoint_limits():
    ego = np.array([0.0, 0.0, 0.0, 5.0])
    assert track_waypoint(ego, (-3.0, 0.0), 0.1).tolist() == [0.0, 0.0, 0.0, 0.0]  # no reversing
    sharp = track_waypoint(ego, (0.1, 1.0), 0.1)
    assert sharp[2] == pytest.approx(2.0 * 0.1)
    # drives only as far as the target's projection on the limited heading
    assert math.hypot(*sharp[:2]) == pytest.approx(0.1 * math.cos(0.2) + 1.0 * math.sin(0.2))
    far = track_waypoint(ego, (100.0, 0.0), 0.1)
    assert far[0] == pytest.approx(4.0) and far[3] == pytest.approx(40.0)


# rollouts


class StayPlanner:
    def plan(self, items):
        return [PlanResult(np.zeros((scn.future_steps, 3))) for scn, _, _ in items]


class FailingPlanner:
    def plan(self, items):
        raise RuntimeError("boom")


class CutInPlanner:
    """Drifts right towards the y = 0 lane at a fixed lateral slope, then keeps straight."""

    def __init__(self, speed=10.0, slope=3.5 / 20.0):
        self.speed, self.slope = speed, slope

    def plan(self, items):
        out = []
        for scn, state, _ in items:
            x = self.speed * 0.1 * np.arange(1, scn.future_steps + 1)
            y_world = np.maximum(state.ego[1] - self.slope * x, 0.0)
            out.append(PlanResult(np.stack([x, y_world - state.ego[1], np.zeros_like(x)], axis=1)))
        return out


def test_stay_in_place_plan_keeps_ego_fixed():
    s = generate_scenario(GeneratorConfig(num_agents=(0, 0)), 1)
    tr = rollout(StayPlanner(), s, "NR", 3.0)
    path = tr.ego_path()
    assert np.abs(path[:, :3] - path[0, :3]).max() <= 1e-12
    rep = score(tr, s)
    assert (rep.collision_free, rep.drivable_compliance, rep.arrived) == (1, 1, 0)
    assert rep.progress_ratio == pytest.approx(0.0, abs=1e-9)


def test_non_reactive_agents_replay_the_log():
    s = road_scenario([straight_agent(15.0, 0.0, 3.0)], av_speed=10.0)
    tr = rollout(ConstantSpeedPlanner(speed=12.0), s, "NR", 4.0)
    assert any(e["type"] == "collision" for e in tr.events)
    for st in tr.states:
        assert np.allclose(st.agents[0, :2], s.agents[0].position[s.t0 + st.t], atol=1e-12)


def test_reactive_follower_brakes_on_cut_in():
    follower = straight_agent(-14.0, 0.0, 11.0)
    s = road_scenario([follower], av_speed=10.0, av_y=3.5)
    nr = rollout(CutInPlanner(), s, "NR", 4.0)
    r = rollout(CutInPlanner(), s, "R", 4.0)
    v_nr = [np.hypot(*st.agents[0, 3:5]) for st in nr.states]
    v_r = [np.hypot(*st.agents[0, 3:5]) for st in r.states]
    assert min(v_nr) == pytest.approx(11.0)
    assert min(v_r) < 10.0
    assert r.states[0].controllers == ["idm"] and nr.states[0].controllers == ["log_replay"]


def test_nr_and_r_diverge_with_aggressive_ego():
    scns = [scenario("straight", k) for k in range(4)]
    nr = rollout_many(ConstantSpeedPlanner(speed=20.0), scns, "NR", 6.0)
    r = rollout_many(ConstantSpeedPlanner(speed=20.0), scns, "R", 6.0)
    diffs = [max(np.abs(a.agents - b.agents).max() if len(a.agents) else 0.0 for a, b in zip(x.states, y.states))
             for x, y in zip(nr, r)]
    assert max(diffs) > 0.1


@pytest.mark.parametrize("mode", ["NR", "R"])
def test_rollout_determinism(mode):
    s = scenario("intersection", 2)
    a, b = rollout(ConstantSpeedPlanner(), s, mode), rollout(ConstantSpeedPlanner(), s, mode)
    assert a.to_jsonl() == b.to_jsonl()
    assert score(a, s) == score(b, s)


def test_horizon_bounds_states():
    s = scenario("straight", 3)
    tr = rollout(LogReplayPlanner(), s, "NR", 15.0)
    assert len(tr.states) <= 150
    assert [p.t for p in tr.plans] == list(range(0, 150, 10))


def test_planner_failure_aborts_safely():
    s = scenario("curved", 1)
    tr = rollout(FailingPlanner(), s, "NR", 2.0)
    assert tr.aborted and tr.events[-1]["type"] == "planner_failure"
    assert score(tr, s).composite == 0.0


@pytest.mark.parametrize("topology", ["straight", "curved", "intersection", "lane_change"])
def test_log_replay_is_clean(topology):
    s = scenario(topology, 6)
    for mode in ("NR", "R"):
        tr = rollout(LogReplayPlanner(), s, mode)
        rep = score(tr, s)
        assert tr.events == [] and rep.collision_free == 1 and rep.drivable_compliance == 1
        assert rep.progress_ratio == pytest.approx(1.0)


def test_open_loop_plans_of_log_replay_equal_gt():
    scns = [scenario("curved", 0), scenario("lane_change", 1)]
    for plan, s in zip(open_loop_plans(LogReplayPlanner(), scns), scns):
        np.testing.assert_allclose(plan, s.gt_future(), atol=1e-12)


# metrics


def test_rms_jerk():
    xy = np.stack([np.arange(20.0), np.zeros(20)], 1)
    assert rms_jerk(xy, 0.1) == 0.0
    assert rms_jerk(xy[:3], 0.1) == 0.0
    t = np.arange(20) * 0.1
    cubic = np.stack([t**3, np.zeros(20)], 1)
    assert rms_jerk(cubic, 0.1) == pytest.approx(6.0, rel=1e-6)


def test_route_progress_clipped():
    s = scenario("straight", 0)
    gt = s.av.position[s.t0: s.t0 + 50]
    assert route_progress(s, gt) == pytest.approx(1.0)
    assert route_progress(s, gt[::-1]) == 0.0
