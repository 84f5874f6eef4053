"""Closed-loop scoring of a rollout trace.

The composite is ``100 * gate * (0.8 * progress + 0.2 * comfort_score)``,
where ``gate`` is 0 after any collision or off-road step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..geometry import Path
from ..scene.types import Scenario
from .simulator import RolloutTrace

ARRIVAL_PROGRESS = 0.95
JERK_REF = 4.0  # m/s^3; RMS jerk at or below this scores full comfort
MIN_EXPERT_PROGRESS = 1.0  # m


@dataclass
class MetricsReport:
    collision_free: int
    drivable_compliance: int
    progress_ratio: float
    arrived: int
    comfort: float  # RMS longitudinal jerk, m/s^3
    comfort_score: float
    composite: float

    def row(self) -> dict:
        return asdict(self)


METRIC_FIELDS = tuple(f.name for f in fields(MetricsReport))


def rms_jerk(xy: np.ndarray, dt: float) -> float:
    """RMS of the third finite difference of travelled distance."""
    if len(xy) < 4:
        return 0.0
    speed = np.linalg.norm(np.diff(xy, axis=0), axis=1) / dt
    jerk = np.diff(speed, n=2) / dt**2
    return float(np.sqrt(np.mean(jerk**2)))


def route_progress(scn: Scenario, xy: np.ndarray) -> float:
    """Ego advance along the route relative to the logged AV over the same number of steps."""
    route = Path(scn.centerlines[0].points)
    n = len(xy)
    expert = scn.av.position[scn.t0: scn.t0 + n]
    s_ego = route.project(xy[[0, -1]])[0]
    s_exp = route.project(expert[[0, len(expert) - 1]])[0]
    denom = max(float(s_exp[1] - s_exp[0]), MIN_EXPERT_PROGRESS)
    return float(np.clip((s_ego[1] - s_ego[0]) / denom, 0.0, 1.0))


def score(trace: RolloutTrace, scn: Scenario) -> MetricsReport:
    xy = trace.ego_path()[:, :2]
    collided = any(e["type"] == "collision" for e in trace.events)
    offroad = any(e["type"] == "offroad" for e in trace.events)
    failed = trace.aborted
    progress = route_progress(scn, xy)
    jerk = rms_jerk(xy, scn.dt)
    comfort_score = 1.0 if jerk <= JERK_REF else JERK_REF / jerk
    gate = 0.0 if (collided or offroad or failed) else 1.0
    composite = 100.0 * gate * (0.8 * progress + 0.2 * comfort_score)
    return MetricsReport(
        collision_free=int(not collided),
        drivable_compliance=int(not offroad),
        progress_ratio=progress,
        arrived=int(progress >= ARRIVAL_PROGRESS and not collided and not offroad and not failed),
        comfort=jerk,
        comfort_score=comfort_score,
        composite=composite,
    )


def aggregate(reports: list[MetricsReport]) -> dict[str, float]:
    if not reports:
        return {k: math.nan for k in METRIC_FIELDS}
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_FIELDS}


def write_metrics_csv(path, rows: list[dict], fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
