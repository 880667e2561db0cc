"""Deterministic kinematic simulator: vehicle dynamics, sensors, worlds and the test manager."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Union

import numpy as np

from .cloud import Frame, KdIndex, PointCloud, Pose, wrap_angle
from .targets import AxisMode, Mobility, PositionTarget, UnsupportedTargetError, XyFrame, YawMode, ZFrame


@dataclass(frozen=True)
class VehicleParams:
    wheel_radius: float = 0.2
    vehicle_radius: float = 0.35
    sensor_height: float = 0.15
    half_track: float = 0.25
    yaw_rate_max: float = 1.5
    z_rate_max: float = 0.5


@dataclass(frozen=True)
class VehicleState:
    pose: Pose
    forward_velocity: float = 0.0
    mobility: Mobility = Mobility.GROUND
    stamp: float = 0.0


# -- dynamics -------------------------------------------------------------------

def step_ground(state: VehicleState, target: PositionTarget, dt: float, T: float,
                wheel_radius: float = 0.2) -> VehicleState:
    """Unicycle update for rolling: body speed and yaw change, then integrate."""
    p = state.pose
    if target.xy_frame is XyFrame.ODOMETRY:
        c, s = math.cos(p.yaw), math.sin(p.yaw)
        if target.xy_mode is AxisMode.POSITION:
            d_yaw = wrap_angle(target.yaw - p.yaw)
            vxd, vyd = (target.x - p.x) / T, (target.y - p.y) / T
        else:
            d_yaw = target.yaw_rate * dt
            vxd, vyd = target.vx, target.vy
        v_b = vxd * c + vyd * s
    else:
        if target.xy_mode is AxisMode.POSITION:
            raise UnsupportedTargetError("body-frame position goals are not supported on the ground")
        d_yaw = target.yaw_rate * dt
        v_b = target.vx
    yaw = p.yaw + d_yaw
    x = p.x + v_b * dt * math.cos(yaw)
    y = p.y + v_b * dt * math.sin(yaw)
    pose = Pose(x, y, wheel_radius, 0.0, 0.0, yaw)
    return VehicleState(pose, v_b, Mobility.GROUND, state.stamp + dt)


def slew(current: float, desired: float, max_step: float) -> float:
    """Move toward ``desired`` by at most ``max_step``, landing on it exactly."""
    if desired < current:
        nxt = current - max_step
        return desired if nxt < desired else nxt
    if desired > current:
        nxt = current + max_step
        return desired if nxt > desired else nxt
    return current


def slew_yaw(current: float, desired: float, max_step: float) -> float:
    """Angular slew along the shorter way round; never passes ``desired``."""
    delta = wrap_angle(desired - current)
    if abs(delta) <= max_step:
        return wrap_angle(desired)
    return wrap_angle(current + math.copysign(max_step, delta))


def step_aerial(state: VehicleState, target: PositionTarget, dt: float, T: float,
                yaw_rate_max: float = 1.5) -> VehicleState:
    """Horizontal position and yaw update while flying (z is left untouched)."""
    p = state.pose
    if target.xy_frame is XyFrame.ODOMETRY:
        if target.xy_mode is AxisMode.POSITION:
            vx, vy = (target.x - p.x) / T, (target.y - p.y) / T
        else:
            vx, vy = target.vx, target.vy
    else:
        if target.xy_mode is AxisMode.POSITION:
            raise UnsupportedTargetError("body-frame position goals are not supported in flight")
        c, s = math.cos(p.yaw), math.sin(p.yaw)
        vx, vy = target.vx * c - target.vy * s, target.vx * s + target.vy * c
    if target.yaw_mode is YawMode.ANGLE:
        yaw = slew_yaw(p.yaw, target.yaw, yaw_rate_max * dt)
    else:
        rate = max(-yaw_rate_max, min(yaw_rate_max, target.yaw_rate))
        yaw = wrap_angle(p.yaw + rate * dt)
    x, y = p.x + vx * dt, p.y + vy * dt
    fwd = vx * math.cos(p.yaw) + vy * math.sin(p.yaw)
    return VehicleState(Pose(x, y, p.z, 0.0, 0.0, yaw), fwd, Mobility.AERIAL, state.stamp + dt)


def step_z(state: VehicleState, target: PositionTarget, dt: float, T: float, z_rate_max: float = 0.5,
           ground_z: float = 0.0, ceiling_z: float = math.inf) -> float:
    z = state.pose.z
    if target.z_mode is AxisMode.VELOCITY:
        if target.z_frame is ZFrame.BODY:
            return z + target.vz / T * dt
        return z + target.vz * dt
    if target.z_frame is ZFrame.BODY:
        raise UnsupportedTargetError("body-frame z position goals are not supported")
    if target.z_frame is ZFrame.ODOMETRY:
        goal = target.z
    elif target.z_frame is ZFrame.GROUND:
        goal = target.z + ground_z
    else:
        goal = ceiling_z - target.z
    return slew(z, goal, z_rate_max * dt)


# -- sensors ----------------------------------------------------------------------

def bottom_clearance(sonar1: float, sonar2: float, wheel_radius: float) -> float:
    return min(sonar1, sonar2) + wheel_radius


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def contains_xy(self, x: float, y: float) -> bool:
        return self.lo[0] <= x <= self.hi[0] and self.lo[1] <= y <= self.hi[1]


@dataclass
class WorldGeometry:
    points: np.ndarray
    ground_z: float = 0.0
    ceiling_z: float = 3.0
    floor_boxes: tuple = ()
    ceiling_boxes: tuple = ()
    index: KdIndex = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.index = KdIndex(self.points)

    def ground_height(self, x: float, y: float) -> float:
        h = self.ground_z
        for b in self.floor_boxes:
            if b.contains_xy(x, y):
                h = max(h, b.hi[2])
        return h

    def ceiling_at(self, x: float, y: float) -> float:
        c = self.ceiling_z
        for b in self.ceiling_boxes:
            if b.contains_xy(x, y):
                c = min(c, b.lo[2])
        return c


def sonar_readings(world: WorldGeometry, pose: Pose, params: VehicleParams = VehicleParams()):
    """Downward ranges from the bottom of each wheel to the ground beneath it."""
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out = []
    for side in (1.0, -1.0):
        wx = pose.x - s * side * params.half_track
        wy = pose.y + c * side * params.half_track
        out.append(max(0.0, pose.z - params.wheel_radius - world.ground_height(wx, wy)))
    return tuple(out)


def clearances(world: WorldGeometry, pose: Pose, params: VehicleParams = VehicleParams()):
    """``(bottom, top)`` clearance of the vehicle centre."""
    s1, s2 = sonar_readings(world, pose, params)
    return bottom_clearance(s1, s2, params.wheel_radius), world.ceiling_at(pose.x, pose.y) - pose.z


def sensor_pose(params: VehicleParams = VehicleParams()) -> Pose:
    """Extrinsics of the LIDAR in the body frame."""
    return Pose(0.0, 0.0, params.sensor_height)


def sense_lidar(world: WorldGeometry, pose: Pose, max_range: float = 8.0, min_depth: float = 0.5,
                elevation_fov: float = math.radians(15.0), params: VehicleParams = VehicleParams(),
                n_rings: int = 16, azimuth_res: float = math.radians(0.4), stamp: float = 0.0) -> PointCloud:
    """World points seen by a spinning LIDAR, in the sensor frame.

    Points are binned by (ring, azimuth) and only the nearest return in
    each bin survives, so walls occlude what is behind them.
    """
    rot = pose.rotation()
    origin = pose.position + rot @ np.array([0.0, 0.0, params.sensor_height])
    if world.index.is_empty:
        return PointCloud(np.empty((0, 3)), Frame.SENSOR, stamp, ring=np.empty(0, dtype=int))
    idx = world.index.within(origin, max_range)
    local = (world.points[idx] - origin) @ rot
    rng = np.linalg.norm(local, axis=1)
    horiz = np.hypot(local[:, 0], local[:, 1])
    elev = np.arctan2(local[:, 2], horiz)
    keep = (rng >= min_depth) & (rng <= max_range) & (np.abs(elev) <= elevation_fov + 1e-12)
    local, rng, elev = local[keep], rng[keep], elev[keep]
    ring = np.clip(np.floor((elev + elevation_fov) / (2 * elevation_fov) * n_rings), 0, n_rings - 1).astype(int)
    az_bin = np.floor((np.arctan2(local[:, 1], local[:, 0]) + math.pi) / azimuth_res).astype(int)
    bins = ring * 100000 + az_bin
    order = np.lexsort((rng, bins))
    first = np.ones(len(order), dtype=bool)
    first[1:] = bins[order][1:] != bins[order][:-1]
    sel = np.sort(order[first])
    return PointCloud(local[sel], Frame.SENSOR, stamp, ring=ring[sel])


def collision_check(world: WorldGeometry, pose: Pose, vehicle_radius: float = 0.35,
                    ceiling_height: float = math.inf) -> bool:
    if pose.z + vehicle_radius > ceiling_height:
        return True
    return world.index.any_within(pose.position, vehicle_radius)


# -- environments -----------------------------------------------------------------

class EnvStatus(enum.Enum):
    NOT_TESTING = "NOT_TESTING"
    INCOMPLETE = "INCOMPLETE"
    IN_PROGRESS = "IN_PROGRESS"
    STUCK = "STUCK"
    COLLIDED = "COLLIDED"
    SUCCESSFUL = "SUCCESSFUL"
    TIMEOUT = "TIMEOUT"


TERMINAL = frozenset({EnvStatus.STUCK, EnvStatus.COLLIDED, EnvStatus.SUCCESSFUL, EnvStatus.TIMEOUT})


@dataclass
class Environment:
    name: str
    start: Pose
    end_x_range: tuple
    end_y_range: tuple
    ceiling_height: float = 3.0
    status: EnvStatus = EnvStatus.INCOMPLETE
    start_time: float = 0.0
    end_time: Optional[float] = None

    def in_end_range(self, x: float, y: float) -> bool:
        return (self.end_x_range[0] <= x <= self.end_x_range[1]
                and self.end_y_range[0] <= y <= self.end_y_range[1])


def _resample_polyline(pts: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate(([0.0], np.cumsum(seg)))
    n = max(1, int(math.ceil(s[-1] / spacing)))
    st = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(st, s, pts[:, 0]), np.interp(st, s, pts[:, 1])], axis=1)


def extrude(xy: np.ndarray, z0: float, z1: float, spacing: float) -> np.ndarray:
    """Vertical wall through a polyline, sampled on a ``spacing`` grid."""
    base = _resample_polyline(np.asarray(xy, dtype=float), spacing)
    zs = np.linspace(z0, z1, max(2, int(round((z1 - z0) / spacing)) + 1))
    out = np.empty((len(base) * len(zs), 3))
    out[:, :2] = np.repeat(base, len(zs), axis=0)
    out[:, 2] = np.tile(zs, len(base))
    return out


def box_surface(box: Box, spacing: float) -> np.ndarray:
    (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
    ring = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]])
    sides = extrude(ring, z0, z1, spacing)
    xs = np.linspace(x0, x1, max(2, int(round((x1 - x0) / spacing)) + 1))
    ys = np.linspace(y0, y1, max(2, int(round((y1 - y0) / spacing)) + 1))
    gx, gy = np.meshgrid(xs, ys)
    flat = np.stack([gx.ravel(), gy.ravel()], axis=1)
    caps = [np.column_stack([flat, np.full(len(flat), z)]) for z in (z0, z1)]
    return np.vstack([sides] + caps)


class ImpassableError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    start: Optional[Pose] = None
    end_x_range: Optional[tuple] = None
    end_y_range: Optional[tuple] = None
    ceiling_height: float = 3.0
    enabled: bool = True


ENV_KINDS = ("Corridor", "HorizontalSine", "VerticalSine", "TJunction", "Doorway")

WALL_HEIGHT = 2.0


def _corridor(p, vp, sp):
    width = float(p.get("width", 1.2))
    length = float(p.get("length", 10.0))
    bay = max(width / 2, 0.6)
    walls = [
        np.array([[-1.0, -bay], [-1.0, bay]]),
        np.array([[-1.0, bay], [0.0, bay], [0.0, width / 2], [length, width / 2]]),
        np.array([[-1.0, -bay], [0.0, -bay], [0.0, -width / 2], [length, -width / 2]]),
    ]
    pts = np.vstack([extrude(w, 0.0, WALL_HEIGHT, sp) for w in walls])
    start = Pose(-0.4, 0.0, vp.wheel_radius)
    return pts, (), (), start, (length - 1.0, length + 1.0), (-width / 2, width / 2), width


def _horizontal_sine(p, vp, sp):
    width = float(p.get("width", 3.5))
    amp = float(p.get("amplitude", 1.0))
    period = float(p.get("period", 8.0))
    length = float(p.get("length", 12.0))
    pillar = float(p.get("pillar", 0.3))
    pillar_x = float(p.get("pillar_x", 0.75 * period))
    xs = np.linspace(0.0, length, int(length / 0.01) + 1)
    yc = amp * np.sin(2 * math.pi * xs / period)
    walls = [np.column_stack([xs, yc + width / 2]), np.column_stack([xs, yc - width / 2]),
             np.array([[0.0, yc[0] - width / 2], [0.0, yc[0] + width / 2]])]
    pts = [extrude(w, 0.0, WALL_HEIGHT, sp) for w in walls]
    if pillar > 0:
        pc = amp * math.sin(2 * math.pi * pillar_x / period)
        h = pillar / 2
        pts.append(box_surface(Box((pillar_x - h, pc - h, 0.0), (pillar_x + h, pc + h, WALL_HEIGHT)), sp))
    yaw0 = math.atan(amp * 2 * math.pi / period)
    start = Pose(0.8, amp * math.sin(2 * math.pi * 0.8 / period), vp.wheel_radius, 0.0, 0.0, yaw0)
    yend = amp * math.sin(2 * math.pi * length / period)
    # gap between the pillar and a wall is what the vehicle must pass through
    gap = (width - pillar) / 2 if pillar > 0 else width
    return (np.vstack(pts), (), (), start, (length - 1.0, length + 0.5),
            (yend - width / 2, yend + width / 2), gap)


def _vertical_sine(p, vp, sp, ceiling):
    width = float(p.get("width", 2.0))
    length = float(p.get("length", 10.0))
    floor_h = float(p.get("floor_height", 1.0))
    ceil_low = float(p.get("ceiling_low", 1.8))
    spacing = float(p.get("obstacle_spacing", 2.0))
    walls = [np.array([[-1.0, -width / 2], [-1.0, width / 2]]),
             np.array([[-1.0, width / 2], [length, width / 2]]),
             np.array([[-1.0, -width / 2], [length, -width / 2]])]
    pts = [extrude(w, 0.0, ceiling, sp) for w in walls]
    floors, ceils = [], []
    x = spacing
    up = True
    while x + 0.5 < length - 1.0:
        if up:
            b = Box((x, -width / 2, 0.0), (x + 0.5, width / 2, floor_h))
            floors.append(b)
        else:
            b = Box((x, -width / 2, ceil_low), (x + 0.5, width / 2, ceiling))
            ceils.append(b)
        pts.append(box_surface(b, sp))
        up = not up
        x += spacing
    start = Pose(0.0, 0.0, vp.wheel_radius)
    return (np.vstack(pts), tuple(floors), tuple(ceils), start, (length - 1.0, length + 1.0),
            (-width / 2, width / 2), min(width, ceil_low - floor_h))


def _t_junction(p, vp, sp):
    width = float(p.get("width", 2.0))
    stem = float(p.get("stem", 6.0))
    arm = float(p.get("arm", 5.0))
    h = width / 2
    walls = [
        np.array([[-1.0, -h], [-1.0, h]]),
        np.array([[-1.0, h], [stem, h], [stem, arm]]),
        np.array([[-1.0, -h], [stem, -h], [stem, -arm]]),
        np.array([[stem + width, -arm], [stem + width, arm]]),
    ]
    pts = np.vstack([extrude(w, 0.0, WALL_HEIGHT, sp) for w in walls])
    start = Pose(0.0, 0.0, vp.wheel_radius)
    return pts, (), (), start, (stem, stem + width), (arm - 1.5, arm), width


def _doorway(p, vp, sp):
    door = float(p.get("door_width", 1.0))
    room = float(p.get("room_width", 6.0))
    wall_x = float(p.get("wall_x", 4.0))
    length = float(p.get("length", 9.0))
    h = room / 2
    walls = [
        np.array([[-1.0, -h], [-1.0, h]]),
        np.array([[-1.0, h], [length, h]]),
        np.array([[-1.0, -h], [length, -h]]),
        np.array([[wall_x, h], [wall_x, door / 2]]),
        np.array([[wall_x, -door / 2], [wall_x, -h]]),
    ]
    pts = np.vstack([extrude(w, 0.0, WALL_HEIGHT, sp) for w in walls])
    start = Pose(0.0, 0.0, vp.wheel_radius)
    return pts, (), (), start, (length - 2.0, length), (-h, h), door


def generate_environment(spec: EnvSpec, params: VehicleParams = VehicleParams(), spacing: float = 0.05,
                         check_passable: bool = False):
    """Build the obstacle points and test record for one course.

    With ``check_passable`` an ``ImpassableError`` is raised when the
    narrowest opening is not wider than the vehicle.
    """
    p = spec.params
    kind = spec.kind
    if kind == "Corridor":
        out = _corridor(p, params, spacing)
    elif kind == "HorizontalSine":
        out = _horizontal_sine(p, params, spacing)
    elif kind == "VerticalSine":
        out = _vertical_sine(p, params, spacing, spec.ceiling_height)
    elif kind == "TJunction":
        out = _t_junction(p, params, spacing)
    elif kind == "Doorway":
        out = _doorway(p, params, spacing)
    else:
        raise ValueError(f"unknown environment kind {kind!r}")
    pts, floors, ceils, start, xr, yr, opening = out
    if check_passable and opening <= 2 * params.vehicle_radius:
        raise ImpassableError(f"{spec.name}: opening {opening:.2f} m is not wider than the vehicle")
    world = WorldGeometry(pts, 0.0, spec.ceiling_height, floors, ceils)
    env = Environment(
        spec.name,
        spec.start if spec.start is not None else start,
        tuple(spec.end_x_range) if spec.end_x_range is not None else xr,
        tuple(spec.end_y_range) if spec.end_y_range is not None else yr,
        spec.ceiling_height,
        EnvStatus.INCOMPLETE if spec.enabled else EnvStatus.NOT_TESTING,
    )
    return world, env


def is_passable(spec: EnvSpec, params: VehicleParams = VehicleParams()) -> bool:
    try:
        generate_environment(spec, params, spacing=0.5, check_passable=True)
    except ImpassableError:
        return False
    return True


# -- environment manager ------------------------------------------------------------

class Tick(NamedTuple):
    t: float


class StuckReported(NamedTuple):
    t: float


class CollidedEvent(NamedTuple):
    t: float


class ReachedEnd(NamedTuple):
    t: float
    x: float
    y: float


Event = Union[Tick, StuckReported, CollidedEvent, ReachedEnd]


class Continue(NamedTuple):
    pass


class AdvanceTo(NamedTuple):
    env: Environment


class ReportLine(NamedTuple):
    name: str
    status: EnvStatus
    t: float

    def format(self) -> str:
        return f"env {self.name} status={self.status.value} t={self.t:.2f}"


class Finished(NamedTuple):
    report: tuple


class EnvironmentManager:
    """Runs environments one at a time, recording how each one ended."""

    def __init__(self, envs, timeout: float = 60.0):
        names = [e.name for e in envs]
        if len(set(names)) != len(names):
            raise ValueError("environment names must be unique")
        self.envs = list(envs)
        self.timeout = timeout
        self.current: Optional[Environment] = None
        self.flags: dict = {}

    def _advance(self, now: float):
        self.current = None
        for env in self.envs:
            if env.status is EnvStatus.INCOMPLETE:
                # new-environment procedure: mark, teleport (done by the caller), reset clock, clear flags
                env.status = EnvStatus.IN_PROGRESS
                env.start_time = now
                self.flags = {}
                self.current = env
                return AdvanceTo(env)
        return Finished(self.report())

    def start(self, now: float = 0.0):
        if self.current is not None:
            raise RuntimeError("manager already running an environment")
        return self._advance(now)

    def _end(self, status: EnvStatus, t: float):
        env = self.current
        env.status = status
        env.end_time = t
        return self._advance(t)

    def step(self, event: Event):
        env = self.current
        if env is None:
            return Finished(self.report())
        if isinstance(event, CollidedEvent):
            return self._end(EnvStatus.COLLIDED, event.t)
        if isinstance(event, StuckReported):
            return self._end(EnvStatus.STUCK, event.t)
        if isinstance(event, ReachedEnd):
            if env.in_end_range(event.x, event.y):
                return self._end(EnvStatus.SUCCESSFUL, event.t)
            return Continue()
        if isinstance(event, Tick):
            if event.t - env.start_time > self.timeout:
                return self._end(EnvStatus.TIMEOUT, event.t)
            return Continue()
        raise TypeError(f"unknown event {event!r}")

    def report(self) -> tuple:
        lines = []
        for env in self.envs:
            t = 0.0 if env.end_time is None else env.end_time - env.start_time
            lines.append(ReportLine(env.name, env.status, t))
        return tuple(lines)


def teleport(env: Environment, mobility: Mobility = Mobility.GROUND, stamp: float = 0.0) -> VehicleState:
    return VehicleState(env.start, 0.0, mobility, stamp)


def step_vehicle(state: VehicleState, target: PositionTarget, dt: float, T: float, world: WorldGeometry,
                 params: VehicleParams = VehicleParams()) -> VehicleState:
    """Dispatch one simulator step on the target's mobility mode."""
    target.check_sim_supported()
    if target.mobility is Mobility.GROUND:
        return step_ground(state, target, dt, T, params.wheel_radius)
    nxt = step_aerial(state, target, dt, T, params.yaw_rate_max)
    ground = world.ground_height(state.pose.x, state.pose.y)
    z = step_z(state, target, dt, T, params.z_rate_max, ground, world.ceiling_at(state.pose.x, state.pose.y))
    # the wheels rest on whatever is below
    z = max(z, ground + params.wheel_radius)
    return replace(nxt, pose=replace(nxt.pose, z=z))
