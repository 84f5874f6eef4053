"""Vehicle kinematics, IDM, collision checks; rollouts live in ``sim.simulator`` and scoring in ``sim.metrics``."""

from .collision import DrivableArea, box_overlaps_many, boxes_overlap, polygons_overlap
from .expert import Control, ScriptedExpert, VehicleState, scripted_expert, unicycle_step
from .idm import DEFAULT_IDM, IDMParams, desired_gap, idm_accel, integrate_speed
