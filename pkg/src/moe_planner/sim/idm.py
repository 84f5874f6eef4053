"""Intelligent Driver Model longitudinal control."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IDMParams:
    v0: float = 15.0  # desired speed, m/s
    s0: float = 2.0  # jam distance, m
    T: float = 1.5  # time headway, s
    a_max: float = 1.5  # m/s^2
    b: float = 2.0  # comfortable deceleration, m/s^2
    delta: float = 4.0
    b_max: float = 9.0  # emergency deceleration bound, m/s^2


DEFAULT_IDM = IDMParams()


def desired_gap(v: float, v_lead: float, params: IDMParams = DEFAULT_IDM) -> float:
    dyn = v * params.T + v * (v - v_lead) / (2.0 * math.sqrt(params.a_max * params.b))
    return params.s0 + max(0.0, dyn)


def idm_accel(
    v: float,
    v_lead: float | None = None,
    gap: float | None = None,
    params: IDMParams = DEFAULT_IDM,
    v0: float | None = None,
) -> float:
    """IDM acceleration; ``gap is None`` means free road.

    A non-positive gap returns the emergency value ``-b_max``. The result is
    clamped to ``[-b_max, a_max]``.
    """
    v0 = params.v0 if v0 is None else v0
    free = 1.0 - (max(v, 0.0) / max(v0, 1e-6)) ** params.delta
    if gap is None:
        a = params.a_max * free
    else:
        if gap <= 0.0:
            return -params.b_max
        s_star = desired_gap(v, v if v_lead is None else v_lead, params)
        a = params.a_max * (free - (s_star / gap) ** 2)
    return float(np.clip(a, -params.b_max, params.a_max))


def integrate_speed(s: float, v: float, a: float, dt: float) -> tuple[float, float]:
    """Advance position/speed one step without reversing; returns (s, v)."""
    v_new = v + a * dt
    if v_new >= 0.0:
        return s + 0.5 * (v + v_new) * dt, v_new
    # stops within the step
    t_stop = v / -a if a < 0 else 0.0
    return s + 0.5 * v * t_stop, 0.0
