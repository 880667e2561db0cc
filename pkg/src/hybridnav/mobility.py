"""Mobility services: mode transitions, per-mode goal streams and the hybrid client."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .cloud import Point3, PointCloud, Pose
from .targets import AxisMode, Mobility, PositionTarget, XyFrame, YawMode, ZFrame


class MobilityMode(enum.Enum):
    IDLE = "Idle"
    HOVER = "Hover"
    TAKE_OFF = "TakeOff"
    LAND = "Land"
    FLY_TO = "FlyTo"
    FLY_FORWARD = "FlyForward"
    DRIVE_TO = "DriveTo"
    DRIVE_FORWARD = "DriveForward"


MODE_ORDER = tuple(MobilityMode)

# Rows are the current mode, columns the requested one, both in MODE_ORDER.
# None marks the unprinted diagonal entries.
TRANSITION_FIXTURE = (
    (None, 0, 1, 0, 0, 0, 1, 1),
    (0, None, 0, 1, 1, 1, 0, 0),
    (0, 1, None, 1, 1, 1, 0, 0),
    (0, 1, 1, None, 1, 1, 0, 0),
    (0, 1, 0, 1, 1, 1, 0, 0),
    (0, 1, 0, 1, 1, 1, 0, 0),
    (1, 1, 1, 0, 0, 0, 1, 1),
    (1, 0, 1, 0, 0, 0, 1, 1),
)

# Unprinted diagonals are read as "keep doing what you are doing".
TRANSITIONS = np.array([[1 if v is None else v for v in row] for row in TRANSITION_FIXTURE], dtype=bool)


def request_transition(current: MobilityMode, requested: MobilityMode) -> bool:
    return bool(TRANSITIONS[MODE_ORDER.index(current), MODE_ORDER.index(requested)])


# -- services -------------------------------------------------------------------

@dataclass(frozen=True)
class ServiceParams:
    goal: Optional[Point3] = None
    desired_height: float = 1.0
    takeoff_tol: float = 0.05
    land_rate: float = -0.3
    wheel_radius: float = 0.2
    land_margin: float = 0.02
    lowpass_alpha: float = 0.2
    z_ground: float = 0.0

    @property
    def landed_threshold(self) -> float:
        return self.wheel_radius + self.land_margin


class LowPass:
    """First-order exponential smoother seeded with its first input."""

    def __init__(self, alpha: float):
        if not 0 < alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        self.alpha = alpha
        self.value: Optional[float] = None

    def __call__(self, x: float) -> float:
        self.value = x if self.value is None else self.value + self.alpha * (x - self.value)
        return self.value


def lowpass_series(xs: Iterable[float], alpha: float) -> list:
    f = LowPass(alpha)
    return [f(x) for x in xs]


class MobilityService:
    """One active mobility service producing a goal per 30 Hz iteration.

    ``step`` returns the goal to publish this iteration.  ``done`` is set
    when a finite service (TakeOff, Land) completes; later calls keep
    returning the final hold goal.  ``trace`` collects service log lines.
    """

    def __init__(self, mode: MobilityMode, latest: Pose, params: ServiceParams = ServiceParams(),
                 trace: Optional[list] = None):
        if mode in (MobilityMode.FLY_TO, MobilityMode.DRIVE_TO) and params.goal is None:
            raise ValueError(f"{mode.value} needs a goal")
        self.mode = mode
        self.params = params
        self.start = latest
        self.done = False
        self.preempted = False
        self.trace = trace if trace is not None else []
        self._filter = LowPass(params.lowpass_alpha)
        self._hold: Optional[PositionTarget] = None
        self._last_goal: Optional[PositionTarget] = None
        self._log("started")

    def _log(self, event: str) -> None:
        self.trace.append(f"svc {self.mode.value} event={event}")

    @staticmethod
    def _hold_goal(pose: Pose, mobility: Mobility, z: float) -> PositionTarget:
        return PositionTarget(mobility=mobility, x=pose.x, y=pose.y, z=z, yaw=pose.yaw)

    def _goal(self, latest: Pose) -> PositionTarget:
        p = self.params
        m = self.mode
        if m is MobilityMode.IDLE:
            return self._hold_goal(self.start, Mobility.GROUND, p.z_ground)
        if m is MobilityMode.HOVER:
            return self._hold_goal(self.start, Mobility.AERIAL, self.start.z)
        if m is MobilityMode.TAKE_OFF:
            return PositionTarget(mobility=Mobility.AERIAL, z_frame=ZFrame.GROUND, x=self.start.x,
                                  y=self.start.y, z=p.desired_height, yaw=self.start.yaw)
        if m is MobilityMode.LAND:
            return PositionTarget(mobility=Mobility.AERIAL, z_mode=AxisMode.VELOCITY, x=self.start.x,
                                  y=self.start.y, z=p.z_ground, vz=p.land_rate, yaw=self.start.yaw)
        if m is MobilityMode.FLY_TO:
            g = p.goal
            return PositionTarget(mobility=Mobility.AERIAL, z_frame=ZFrame.GROUND, x=g.x, y=g.y, z=g.z,
                                  yaw=latest.yaw)
        if m is MobilityMode.FLY_FORWARD:
            return PositionTarget(mobility=Mobility.AERIAL, xy_frame=XyFrame.BODY, z_frame=ZFrame.GROUND,
                                  x=1.0, y=0.0, z=self.start.z - p.z_ground, yaw_mode=YawMode.RATE)
        if m is MobilityMode.DRIVE_TO:
            g = p.goal
            return PositionTarget(mobility=Mobility.GROUND, x=g.x, y=g.y, z=0.0, yaw=latest.yaw)
        return PositionTarget(mobility=Mobility.GROUND, xy_frame=XyFrame.BODY, z_frame=ZFrame.GROUND,
                              x=1.0, y=0.0, z=0.0, yaw_mode=YawMode.RATE)

    def step(self, latest: Pose, bottom_clearance: Optional[float] = None) -> PositionTarget:
        if self._hold is not None:
            return self._hold
        goal = self._goal(latest)
        if goal != self._last_goal:
            # a goal event is logged whenever the published goal changes
            self._log("goal")
            self._last_goal = goal
        p = self.params
        if self.mode is MobilityMode.TAKE_OFF and bottom_clearance is not None:
            if abs(p.desired_height - bottom_clearance) < p.takeoff_tol:
                self._finish(goal)
        elif self.mode is MobilityMode.LAND and bottom_clearance is not None:
            if self._filter(bottom_clearance) < p.landed_threshold:
                self._finish(self._hold_goal(latest, Mobility.GROUND, latest.z))
        return goal

    def _finish(self, hold: PositionTarget) -> None:
        self.done = True
        self._hold = hold
        self._log("done")

    def preempt(self, latest: Pose) -> PositionTarget:
        """Stop the service and return the final hold goal."""
        self.preempted = True
        self._log("preempted")
        mobility = Mobility.GROUND if self.mode in (MobilityMode.IDLE, MobilityMode.DRIVE_TO,
                                                    MobilityMode.DRIVE_FORWARD) else Mobility.AERIAL
        self._hold = self._hold_goal(latest, mobility, latest.z)
        return self._hold


def run_service(mode: MobilityMode, latest: Pose, params: ServiceParams = ServiceParams(),
                clearances: Iterable[float] = (), max_steps: int = 1000, trace: Optional[list] = None) -> list:
    """Drive a service over a recorded clearance stream and collect its goals.

    Stops when the service reports done, the stream ends, or after
    ``max_steps`` iterations.
    """
    svc = MobilityService(mode, latest, params, trace)
    goals = []
    for i, clearance in enumerate(clearances):
        if i >= max_steps:
            break
        goals.append(svc.step(latest, clearance))
        if svc.done:
            break
    return goals


# -- hybrid client ----------------------------------------------------------------

class Behavior(NamedTuple):
    mode: MobilityMode
    goal: Optional[Point3]


def hybrid_client_step(prev_mode, next_mode, next_goal: Point3) -> list:
    """Behaviours needed to reach ``next_goal`` given the mode change.

    Modes are ``mapping.Mode`` members or the strings ``"ground"``/``"air"``.
    """
    prev_air = getattr(prev_mode, "value", prev_mode) == "air"
    next_air = getattr(next_mode, "value", next_mode) == "air"
    if next_air:
        move = Behavior(MobilityMode.FLY_TO, next_goal)
        return [move] if prev_air else [Behavior(MobilityMode.TAKE_OFF, None), move]
    move = Behavior(MobilityMode.DRIVE_TO, next_goal)
    return [Behavior(MobilityMode.LAND, None), move] if prev_air else [move]


class LandingVerdict(enum.Enum):
    OK = "Ok"
    TOO_ROUGH = "TooRough"
    NO_HEADROOM = "NoHeadroom"


def landing_site_check(bottom_cloud: PointCloud, variance_threshold: float = 0.005,
                       top_clearance: float = float("inf"), min_top: float = 0.5) -> LandingVerdict:
    """Judge whether the patch under the vehicle suits a mode change.

    Headroom is checked first since it gates takeoff regardless of the
    ground.  An empty cloud is treated as rough.
    """
    if top_clearance < min_top:
        return LandingVerdict.NO_HEADROOM
    if len(bottom_cloud) == 0:
        return LandingVerdict.TOO_ROUGH
    if float(np.var(bottom_cloud.points[:, 2])) > variance_threshold:
        return LandingVerdict.TOO_ROUGH
    return LandingVerdict.OK
