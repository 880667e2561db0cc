"""Local planner loop: cloud ingestion, primitive selection, vertical state machine and publisher."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cloud import (CloudStatus, Frame, KdIndex, NoPlaneError, Point3, PointCloud, Pose, classify_cloud_status,
                    crop_box_remove, dust_filter, fit_plane, transform_cloud, voxel_downsample, wrap_angle)
from .mapping import LocalMap
from .primitives import (CollisionStatus, CostConfig, Primitive, build_primitive, check_collision,
                         generate_endpoints, primitive_cost, select_best, vector_angle)
from .targets import (AxisMode, Mobility, PositionTarget, XyFrame, YawMode, ZFrame, is_valid_combination)

log = logging.getLogger(__name__)

__all__ = [
    "PlannerConfig", "PlannerStatus", "PositionTarget", "VerticalSm", "VerticalSmState", "LocalPlanner",
    "vertical_sm_step", "wall_follow_plane_baseline", "WallFollowCommand", "format_tick",
]


class PlannerStatus(enum.Enum):
    WAITING = "Waiting"
    RUNNING = "Running"
    STUCK = "Stuck"


class VerticalSm(enum.Enum):
    FORWARD = "Forward"
    DESCENDING = "Descending"
    ASCENDING = "Ascending"


@dataclass(frozen=True)
class VerticalSmState:
    state: VerticalSm = VerticalSm.FORWARD
    min_bottom_clearance: float = 0.5
    min_top_clearance: float = 0.5
    max_height: float = math.inf
    speed: float = 0.3
    sweeps: int = 0


def vertical_sm_step(sm: VerticalSmState, primitives_free: bool, bottom: float, top: float, z: float = 0.0):
    """Advance the stuck-recovery state machine and return ``(sm', z_velocity)``.

    The search goes down until the bottom clearance limit, then up until the
    top clearance (or ``max_height``) limit, then down again.  A free
    primitive sends it straight back to Forward.  ``sweeps`` counts
    completed down-then-up passes.
    """
    if bottom < 0 or top < 0:
        raise ValueError("clearances must be non-negative")
    if primitives_free:
        return replace(sm, state=VerticalSm.FORWARD, sweeps=0), 0.0
    floor_hit = bottom <= sm.min_bottom_clearance
    roof_hit = top <= sm.min_top_clearance or z >= sm.max_height
    state, sweeps = sm.state, sm.sweeps
    if state is VerticalSm.FORWARD:
        state = VerticalSm.ASCENDING if floor_hit else VerticalSm.DESCENDING
    elif state is VerticalSm.DESCENDING and floor_hit:
        state = VerticalSm.ASCENDING
    elif state is VerticalSm.ASCENDING and roof_hit:
        state = VerticalSm.DESCENDING
        sweeps += 1
    if state is VerticalSm.DESCENDING:
        cmd = 0.0 if floor_hit else -sm.speed
    else:
        cmd = 0.0 if roof_hit else sm.speed
    return replace(sm, state=state, sweeps=sweeps), cmd


@dataclass(frozen=True)
class PlannerConfig:
    horizon: float = 1.5
    speed: float = 0.75
    n_azimuth: int = 9
    azimuth_fov: float = math.pi
    aerial_elevations: tuple = (-math.radians(15.0), 0.0, math.radians(15.0))
    yaw_escape: bool = True
    cost: CostConfig = CostConfig()
    voxel_size: float = 0.1
    voxel_min_points: int = 1
    dust_filter: bool = True
    dust_window: int = 7
    dust_threshold: float = 0.05
    wheel_radius: float = 0.2
    ground_margin: float = 0.02
    crop_min: tuple = (-0.3, -0.4, -0.35)
    crop_max: tuple = (0.3, 0.4, 0.35)
    sensor_extrinsics: Pose = Pose(0.0, 0.0, 0.15)
    yaw_gain: float = 2.0
    yaw_rate_max: float = 1.0
    sample_spacing: float = 0.1
    vertical: VerticalSmState = VerticalSmState()
    use_map: bool = False
    map_resolution: float = 0.1
    map_radius: float = 4.0

    @property
    def duration(self) -> float:
        return self.horizon / self.speed


@dataclass
class WallFollowCommand:
    forward: float
    lateral: float
    ok: bool


def format_tick(t: float, status: PlannerStatus, sel: Optional[Primitive], target: PositionTarget) -> str:
    sel_s = "none" if sel is None else str(sel.index)
    cost_s = "nan" if sel is None else f"{sel.cost:.3f}"
    return (f"tick t={t:.3f} status={status.value} sel={sel_s} cost={cost_s} "
            f"vcmd={target.vx:.3f},{target.vy:.3f},{target.vz:.3f}")


class LocalPlanner:
    """Single-threaded local planner; callers serialise callbacks and ticks."""

    def __init__(self, config: PlannerConfig = PlannerConfig(), mobility: Mobility = Mobility.GROUND):
        self.cfg = config
        self.mobility = mobility
        self.goal: Optional[Point3] = None
        self.goal_frame: Frame = Frame.BODY
        self.wall_follow = False
        self.pose: Optional[Pose] = None
        self.pose_stamp = 0.0
        self.bottom: Optional[float] = None
        self.top: Optional[float] = None
        self.selection: Optional[Primitive] = None
        self.escape_selected = False
        self.status = PlannerStatus.WAITING
        self.rounds = 0
        self.primitives: list = []
        self.last_cloud: Optional[PointCloud] = None
        self.cloud_status: Optional[CloudStatus] = None
        self.sm = config.vertical
        self.tick_log: list = []
        self.local_map = LocalMap(config.map_resolution, retain_radius=config.map_radius) if config.use_map else None
        self.on_goal(Point3(1.0, 0.0, 0.0), Frame.BODY)

    # -- callbacks --------------------------------------------------------------

    def on_goal(self, goal, frame: Frame) -> None:
        self.goal = Point3(*goal)
        self.goal_frame = Frame(frame)
        self.wall_follow = self.goal_frame is Frame.BODY and tuple(self.goal) == (1.0, 0.0, 0.0)

    def on_pose(self, pose: Pose, stamp: float = 0.0) -> None:
        self.pose = pose
        self.pose_stamp = stamp

    def on_clearance(self, bottom: float, top: float) -> None:
        self.bottom = bottom
        self.top = top

    def set_mobility(self, mobility: Mobility) -> None:
        if mobility is not self.mobility:
            self.mobility = mobility
            self.sm = self.cfg.vertical

    # -- cloud processing ---------------------------------------------------------

    def process_cloud(self, cloud: PointCloud, state_at_stamp: Pose):
        """Filter a raw sensor cloud and bring it into the odometry frame.

        Returns ``(cloud, status)``.
        """
        cfg = self.cfg
        raw_size = len(cloud)
        if cloud.frame is not Frame.SENSOR:
            raise ValueError("planner expects a sensor-frame cloud")
        if cfg.dust_filter and raw_size:
            # range variance is only meaningful around the sensor origin, so dust goes first
            cloud, _ = dust_filter(cloud, cfg.dust_window, cfg.dust_threshold)
        cloud = voxel_downsample(cloud, cfg.voxel_size, cfg.voxel_min_points)
        body = transform_cloud(cloud, cfg.sensor_extrinsics, Frame.BODY)
        body = crop_box_remove(body, cfg.crop_min, cfg.crop_max)
        odom = transform_cloud(body, state_at_stamp, Frame.ODOMETRY)
        bottom = self.bottom if self.bottom is not None else cfg.wheel_radius
        ground_z = state_at_stamp.z - bottom
        odom = odom.subset(odom.points[:, 2] > ground_z + cfg.ground_margin)
        return odom, classify_cloud_status(raw_size, len(odom))

    def goal_vector(self, pose: Pose) -> np.ndarray:
        g = np.asarray(self.goal, dtype=float)
        if self.goal_frame is Frame.ODOMETRY:
            return g - pose.position
        return pose.rotation() @ g

    def on_point_cloud(self, cloud: PointCloud, state_at_stamp: Pose) -> Optional[Primitive]:
        processed, status = self.process_cloud(cloud, state_at_stamp)
        self.cloud_status = status
        if status is CloudStatus.NOISY:
            return self.selection
        self.last_cloud = processed
        pose = self.pose if self.pose is not None else state_at_stamp
        obstacles = processed.points
        if self.local_map is not None:
            # remembered voxels cover obstacles that have left the sensor's view
            if len(processed):
                self.local_map.insert_cloud(processed)
            self.local_map.prune_radius(pose.position)
            if self.local_map.occupied:
                centres = self.local_map.voxel_center(sorted(self.local_map.occupied))
                obstacles = np.vstack([obstacles, centres])
        index = KdIndex(obstacles)
        self.select(index, pose)
        return self.selection

    def select(self, index: KdIndex, pose: Pose) -> Optional[Primitive]:
        cfg = self.cfg
        rows = cfg.aerial_elevations if self.mobility is Mobility.AERIAL else (0.0,)
        endpoints = generate_endpoints(pose, cfg.horizon, cfg.azimuth_fov, cfg.n_azimuth, rows, cfg.yaw_escape)
        goal_vec = self.goal_vector(pose)
        start = pose.position
        prims = []
        for i, ep in enumerate(endpoints):
            prim = build_primitive(start, ep, cfg.duration, spacing=cfg.sample_spacing, index=i)
            prim.goal_angle = vector_angle(np.asarray(ep) - start, goal_vec)
            prim.min_obstacle_dist, prim.status = check_collision(prim, index, cfg.cost)
            prim.cost = primitive_cost(prim.goal_angle, prim.min_obstacle_dist, cfg.cost)
            prims.append(prim)
        main = prims[:-1] if cfg.yaw_escape else prims
        best = select_best(main)
        escape = False
        if best is None and cfg.yaw_escape:
            # the escape option only matters once every regular primitive is blocked
            best = select_best(prims[-1:])
            escape = best is not None
            if escape:
                best.tags["escape"] = True
        self.primitives = prims
        self.selection = best
        self.escape_selected = escape
        self.rounds += 1
        self.status = PlannerStatus.STUCK if best is None else PlannerStatus.RUNNING
        return best

    # -- publisher ------------------------------------------------------------------

    def _hold(self) -> PositionTarget:
        p = self.pose or Pose()
        return PositionTarget(mobility=self.mobility, x=p.x, y=p.y, z=p.z, yaw=p.yaw)

    def tick_publish(self, now: float):
        """Turn the current selection into a target; returns ``(target, status)``."""
        cfg = self.cfg
        if self.rounds == 0 or self.pose is None:
            target, status = self._hold(), PlannerStatus.WAITING
            self.tick_log.append(format_tick(now, status, None, target))
            return target, status
        pose = self.pose
        sel = self.selection
        status = self.status
        if self.mobility is Mobility.GROUND:
            if sel is None:
                target = PositionTarget(mobility=Mobility.GROUND, xy_mode=AxisMode.VELOCITY,
                                        z_mode=AxisMode.VELOCITY, yaw_mode=YawMode.RATE)
            else:
                d = np.asarray(sel.endpoint) - pose.position
                heading = math.atan2(d[1], d[0])
                rate = float(np.clip(cfg.yaw_gain * wrap_angle(heading - pose.yaw), -cfg.yaw_rate_max,
                                     cfg.yaw_rate_max))
                if self.escape_selected:
                    vx = vy = 0.0
                    rate = cfg.yaw_rate_max if wrap_angle(heading - pose.yaw) >= 0 else -cfg.yaw_rate_max
                else:
                    u = d[:2] / max(np.linalg.norm(d[:2]), 1e-12)
                    vx, vy = (cfg.speed * u).tolist()
                target = PositionTarget(mobility=Mobility.GROUND, xy_mode=AxisMode.VELOCITY,
                                        z_mode=AxisMode.VELOCITY, vx=vx, vy=vy, yaw_rate=rate,
                                        yaw_mode=YawMode.RATE)
        else:
            free = sel is not None and not self.escape_selected
            bottom = self.bottom if self.bottom is not None else 0.0
            top = self.top if self.top is not None else math.inf
            self.sm, vz_sm = vertical_sm_step(self.sm, free, max(bottom, 0.0), max(top, 0.0), pose.z)
            if free:
                d = np.asarray(sel.endpoint) - pose.position
                v = cfg.speed * d / np.linalg.norm(d)
                target = PositionTarget(mobility=Mobility.AERIAL, xy_mode=AxisMode.VELOCITY,
                                        z_mode=AxisMode.VELOCITY, vx=v[0], vy=v[1], vz=v[2],
                                        yaw=math.atan2(d[1], d[0]))
                status = PlannerStatus.RUNNING
            else:
                yaw = pose.yaw
                if self.escape_selected:
                    d = np.asarray(sel.endpoint) - pose.position
                    yaw = math.atan2(d[1], d[0])
                target = PositionTarget(mobility=Mobility.AERIAL, xy_mode=AxisMode.VELOCITY,
                                        z_mode=AxisMode.VELOCITY, vz=vz_sm, yaw=yaw)
                # the vertical search gets one full pass before the planner gives up
                status = PlannerStatus.STUCK if self.sm.sweeps >= 1 else PlannerStatus.RUNNING
        assert is_valid_combination(target) and target.sim_supported()
        self.tick_log.append(format_tick(now, status, sel, target))
        return target, status


# -- plane-fit wall following baseline --------------------------------------------------

def wall_follow_plane_baseline(cloud: PointCloud, standoff: float = 0.3, k_p: float = 1.0,
                               inlier_tol: float = 0.02) -> WallFollowCommand:
    """Fit one plane to the cloud and steer to keep ``standoff`` from it.

    The cloud is in a body-aligned frame (x forward, y left).  The lateral
    command points toward the wall when farther than the standoff and
    away from it when closer.
    """
    try:
        plane = fit_plane(cloud, inlier_tol=inlier_tol)
    except NoPlaneError:
        log.warning("wall follower: no plane in cloud")
        return WallFollowCommand(1.0, 0.0, False)
    n = plane.normal / np.linalg.norm(plane.normal)
    dist = abs(plane.d) / np.linalg.norm(plane.normal)
    toward = -math.copysign(1.0, plane.d) * n
    return WallFollowCommand(1.0, float(k_p * (dist - standoff) * toward[1]), True)
