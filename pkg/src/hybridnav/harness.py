"""Environment-suite configs, the simulation loop that wires planner, services and simulator, and the CLI."""

from __future__ import annotations

import argparse
import fnmatch
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import Frame, Point3, Pose
from .mapping import LocalMap
from .mobility import MobilityMode, MobilityService, ServiceParams
from .planner import LocalPlanner, PlannerConfig, PlannerStatus
from .primitives import CostConfig
from .sim import (ENV_KINDS, CollidedEvent, EnvironmentManager, EnvSpec, EnvStatus, Finished, ReachedEnd,
                  ReportLine, StuckReported, Tick, VehicleParams, clearances, collision_check,
                  generate_environment, sense_lidar, step_vehicle, teleport)
from .targets import Mobility

# -- configuration -----------------------------------------------------------------


class ConfigError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None, path: Optional[str] = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + msg)
        self.line = line


@dataclass(frozen=True)
class SimConfig:
    timeout: float = 60.0
    seed: int = 0
    base_rate: int = 150
    sim_rate: int = 50
    planner_rate: int = 30
    lidar_rate: int = 10
    max_range: float = 8.0
    lidar_noise: float = 0.005
    stuck_patience: float = 2.0


@dataclass(frozen=True)
class PlannerSection:
    horizon: float = 1.5
    speed: float = 0.75
    n_azimuth: int = 25
    fov_deg: float = 180.0
    goal_weight: float = 1.0
    collision_buffer: float = 0.4
    near_buffer: float = 0.8
    dust_filter: bool = True
    min_bottom_clearance: float = 0.5
    min_top_clearance: float = 0.5
    use_map: bool = True
    map_resolution: float = 0.1
    map_radius: float = 4.0

    def to_planner_config(self, vehicle: VehicleParams) -> PlannerConfig:
        base = PlannerConfig()
        return replace(
            base, horizon=self.horizon, speed=self.speed, n_azimuth=self.n_azimuth,
            azimuth_fov=math.radians(self.fov_deg),
            cost=CostConfig(self.goal_weight, self.collision_buffer, self.near_buffer),
            dust_filter=self.dust_filter, wheel_radius=vehicle.wheel_radius,
            sensor_extrinsics=Pose(0.0, 0.0, vehicle.sensor_height),
            vertical=replace(base.vertical, min_bottom_clearance=self.min_bottom_clearance,
                             min_top_clearance=self.min_top_clearance),
            use_map=self.use_map, map_resolution=self.map_resolution, map_radius=self.map_radius,
        )


ENV_PARAM_KEYS = {
    "Corridor": ("width", "length"),
    "HorizontalSine": ("width", "amplitude", "period", "length", "pillar", "pillar_x"),
    "VerticalSine": ("width", "length", "floor_height", "ceiling_low", "obstacle_spacing"),
    "TJunction": ("width", "stem", "arm"),
    "Doorway": ("door_width", "room_width", "wall_x", "length"),
}


@dataclass(frozen=True)
class EnvEntry:
    spec: EnvSpec
    mission: str = "ground"
    goal: Optional[tuple] = None
    takeoff_height: float = 1.0


@dataclass(frozen=True)
class SuiteConfig:
    envs: tuple
    sim: SimConfig = SimConfig()
    planner: PlannerSection = PlannerSection()

    def names(self) -> list:
        return [e.spec.name for e in self.envs]


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_floats(v: str, n: Optional[int] = None) -> tuple:
    parts = [p.strip() for p in v.split(",")]
    vals = tuple(float(p) for p in parts)
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers, got {len(vals)}")
    return vals


def _coerce(dc_type, key: str, value: str):
    for f in fields(dc_type):
        if f.name == key:
            if f.type in ("bool", bool):
                return _parse_bool(value)
            if f.type in ("int", int):
                return int(value)
            return float(value)
    raise KeyError(key)


def _range(v: str) -> tuple:
    lo, hi = _parse_floats(v, 2)
    if lo > hi:
        raise ValueError(f"range minimum {lo} exceeds maximum {hi}")
    return lo, hi


def parse_config_text(text: str, path: Optional[str] = None) -> SuiteConfig:
    """Parse the ``[section]`` / ``key = value`` suite format.

    Sections: ``[sim]``, ``[planner]`` and one ``[env <name>]`` per course.
    ``#`` starts a comment.  Every error names the offending line.
    """
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno, path)
            head = line[1:-1].split()
            if not head:
                raise ConfigError("empty section header", lineno, path)
            if head[0] in ("sim", "planner") and len(head) == 1:
                current = (head[0], None, lineno, {})
            elif head[0] == "env" and len(head) == 2:
                current = ("env", head[1], lineno, {})
            else:
                raise ConfigError(f"unknown section {line!r}", lineno, path)
            sections.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        if current is None:
            raise ConfigError("key outside of any section", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in current[3]:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        current[3][key] = (value, lineno)

    sim_kw, planner_kw, envs = {}, {}, []
    seen = {}
    for kind, name, head_line, items in sections:
        if kind in ("sim", "planner"):
            dc = SimConfig if kind == "sim" else PlannerSection
            target = sim_kw if kind == "sim" else planner_kw
            for key, (value, lineno) in items.items():
                try:
                    target[key] = _coerce(dc, key, value)
                except KeyError:
                    raise ConfigError(f"unknown key {key!r} in [{kind}]", lineno, path) from None
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}", lineno, path) from None
            continue
        if name in seen:
            raise ConfigError(f"duplicate environment name {name!r} (first at line {seen[name]})", head_line, path)
        seen[name] = head_line
        envs.append(_parse_env(name, head_line, items, path))
    if not envs:
        raise ConfigError("config defines no environments", None, path)
    try:
        sim = SimConfig(**sim_kw)
        planner = PlannerSection(**planner_kw)
        CostConfig(planner.goal_weight, planner.collision_buffer, planner.near_buffer)
    except ValueError as exc:
        raise ConfigError(str(exc), None, path) from None
    return SuiteConfig(tuple(envs), sim, planner)


def _parse_env(name, head_line, items, path) -> EnvEntry:
    if "kind" not in items:
        raise ConfigError(f"environment {name!r} has no kind", head_line, path)
    kind, kind_line = items["kind"]
    if kind not in ENV_KINDS:
        raise ConfigError(f"unknown environment kind {kind!r}", kind_line, path)
    params, kw = {}, {}
    entry_kw = {}
    for key, (value, lineno) in items.items():
        try:
            if key == "kind":
                continue
            if key in ENV_PARAM_KEYS[kind]:
                params[key] = float(value)
            elif key == "start":
                x, y, z, yaw = _parse_floats(value, 4)
                kw["start"] = Pose(x, y, z, 0.0, 0.0, yaw)
            elif key == "end_x":
                kw["end_x_range"] = _range(value)
            elif key == "end_y":
                kw["end_y_range"] = _range(value)
            elif key == "ceiling":
                kw["ceiling_height"] = float(value)
            elif key == "enabled":
                kw["enabled"] = _parse_bool(value)
            elif key == "mission":
                if value not in ("ground", "aerial"):
                    raise ValueError("mission must be 'ground' or 'aerial'")
                entry_kw["mission"] = value
            elif key == "goal":
                entry_kw["goal"] = _parse_floats(value, 3)
            elif key == "takeoff_height":
                entry_kw["takeoff_height"] = float(value)
            else:
                raise ConfigError(f"unknown key {key!r} for {kind} environment", lineno, path)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, path) from None
    return EnvEntry(EnvSpec(name, kind, params, **kw), **entry_kw)


def parse_config(path) -> SuiteConfig:
    p = Path(path)
    return parse_config_text(p.read_text(), str(p))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: SuiteConfig) -> str:
    """Canonical text for a config; parsing it returns an equal config."""
    out = ["[sim]"]
    out += [f"{f.name} = {_fmt(getattr(cfg.sim, f.name))}" for f in fields(SimConfig)]
    out += ["", "[planner]"]
    out += [f"{f.name} = {_fmt(getattr(cfg.planner, f.name))}" for f in fields(PlannerSection)]
    for e in cfg.envs:
        s = e.spec
        out += ["", f"[env {s.name}]", f"kind = {s.kind}"]
        out += [f"{k} = {_fmt(float(v))}" for k, v in sorted(s.params.items())]
        if s.start is not None:
            out.append("start = " + ", ".join(_fmt(float(v)) for v in (s.start.x, s.start.y, s.start.z, s.start.yaw)))
        if s.end_x_range is not None:
            out.append("end_x = " + ", ".join(_fmt(float(v)) for v in s.end_x_range))
        if s.end_y_range is not None:
            out.append("end_y = " + ", ".join(_fmt(float(v)) for v in s.end_y_range))
        out.append(f"ceiling = {_fmt(float(s.ceiling_height))}")
        out.append(f"enabled = {_fmt(s.enabled)}")
        out.append(f"mission = {e.mission}")
        if e.goal is not None:
            out.append("goal = " + ", ".join(_fmt(float(v)) for v in e.goal))
        out.append(f"takeoff_height = {_fmt(float(e.takeoff_height))}")
    return "\n".join(out) + "\n"


DEFAULT_SUITE = """\
[sim]
timeout = 60

[env corridor_1_2]
kind = Corridor
width = 1.2
length = 10

[env corridor_2_0]
kind = Corridor
width = 2.0
length = 10

[env horizontal_sine]
kind = HorizontalSine
width = 3.5
amplitude = 1.0
period = 8.0
length = 12.0
pillar = 0.3

[env vertical_sine]
kind = VerticalSine
mission = aerial

[env t_junction]
kind = TJunction
goal = 7.0, 4.5, 0.0

[env doorway]
kind = Doorway
goal = 8.0, 0.0, 0.0
"""


def default_suite() -> SuiteConfig:
    return parse_config_text(DEFAULT_SUITE, "<default suite>")


# -- running -----------------------------------------------------------------------


@dataclass
class EnvRun:
    line: ReportLine
    tick_log: list
    local_map: LocalMap
    trajectory: np.ndarray
    world_points: np.ndarray
    end_ranges: tuple
    collisions: int = 0


def _env_seed(seed: int, index: int) -> int:
    return (int(seed) * 1_000_003 + index) % (2**63)


def run_environment(entry: EnvEntry, cfg: SuiteConfig, index: int = 0, vehicle: VehicleParams = VehicleParams()) -> EnvRun:
    """Simulate one course from its start pose to a terminal status."""
    sc = cfg.sim
    world, env = generate_environment(entry.spec, vehicle)
    pcfg = cfg.planner.to_planner_config(vehicle)
    rng = np.random.default_rng(_env_seed(sc.seed, index))
    log_lines: list = []
    manager = EnvironmentManager([env], sc.timeout)
    manager.start(0.0)

    aerial = entry.mission == "aerial"
    state = teleport(env, Mobility.GROUND)
    planner = LocalPlanner(pcfg, Mobility.GROUND)
    planner.tick_log = log_lines
    lmap = planner.local_map if planner.local_map is not None else LocalMap(pcfg.map_resolution,
                                                                            retain_radius=pcfg.map_radius)

    if sc.base_rate % sc.sim_rate or sc.base_rate % sc.planner_rate or sc.base_rate % sc.lidar_rate:
        raise ValueError("tick rates must divide the base rate")
    sim_every = sc.base_rate // sc.sim_rate
    plan_every = sc.base_rate // sc.planner_rate
    lidar_every = sc.base_rate // sc.lidar_rate
    dt = 1.0 / sc.sim_rate

    services = []
    if aerial:
        services.append(MobilityService(MobilityMode.TAKE_OFF, state.pose,
                                        ServiceParams(desired_height=entry.takeoff_height,
                                                      wheel_radius=vehicle.wheel_radius), log_lines))
    if entry.goal is not None:
        mode = MobilityMode.FLY_TO if aerial else MobilityMode.DRIVE_TO
        goal_params = ServiceParams(goal=Point3(*entry.goal), wheel_radius=vehicle.wheel_radius)
    else:
        mode = MobilityMode.FLY_FORWARD if aerial else MobilityMode.DRIVE_FORWARD
        goal_params = ServiceParams(wheel_radius=vehicle.wheel_radius)
    pending_goal = (mode, goal_params)
    active = services.pop(0) if services else None
    if active is None:
        active = MobilityService(mode, state.pose, goal_params, log_lines)
        pending_goal = None

    target = None
    stuck_since = None
    traj = [state.pose.position]
    collisions = 0
    n = 0
    line = None
    while line is None:
        t = n / sc.base_rate
        if n % lidar_every == 0:
            cloud = sense_lidar(world, state.pose, sc.max_range, params=vehicle, stamp=t)
            if sc.lidar_noise > 0 and len(cloud):
                noisy = cloud.points + rng.normal(0.0, sc.lidar_noise, cloud.points.shape)
                cloud = replace(cloud, points=noisy)
            bottom, top = clearances(world, state.pose, vehicle)
            planner.on_clearance(bottom, top)
            planner.on_point_cloud(cloud, state.pose)
            if planner.local_map is None and planner.last_cloud is not None:
                lmap.insert_cloud(planner.last_cloud)
                lmap.prune_radius(state.pose.position)
        if n % plan_every == 0:
            bottom, top = clearances(world, state.pose, vehicle)
            planner.on_pose(state.pose, t)
            planner.on_clearance(bottom, top)
            svc_target = active.step(state.pose, bottom)
            if active.mode in (MobilityMode.TAKE_OFF, MobilityMode.LAND):
                target = svc_target
                if active.done and pending_goal is not None:
                    mode, params = pending_goal
                    planner.set_mobility(Mobility.AERIAL if active.mode is MobilityMode.TAKE_OFF else Mobility.GROUND)
                    active = MobilityService(mode, state.pose, params, log_lines)
                    pending_goal = None
            else:
                goal_frame = Frame.BODY if svc_target.xy_frame.value == "Body" else Frame.ODOMETRY
                planner.on_goal((svc_target.x, svc_target.y, svc_target.z if aerial else 0.0), goal_frame)
                target, status = planner.tick_publish(t)
                if status is PlannerStatus.STUCK:
                    stuck_since = t if stuck_since is None else stuck_since
                else:
                    stuck_since = None
                if stuck_since is not None and t - stuck_since >= sc.stuck_patience:
                    res = manager.step(StuckReported(t))
                    line = _terminal(res, env)
                    break
        if n % sim_every == 0 and n > 0 and target is not None:
            state = step_vehicle(state, target, dt, pcfg.duration, world, vehicle)
            traj.append(state.pose.position)
            if collision_check(world, state.pose, vehicle.vehicle_radius, env.ceiling_height):
                collisions += 1
                line = _terminal(manager.step(CollidedEvent(t)), env)
                break
            res = manager.step(ReachedEnd(t, state.pose.x, state.pose.y))
            if isinstance(res, Finished):
                line = _terminal(res, env)
                break
        res = manager.step(Tick(t))
        if isinstance(res, Finished):
            line = _terminal(res, env)
            break
        n += 1
    log_lines.append(line.format())
    return EnvRun(line, log_lines, lmap, np.array(traj), world.points, (env.end_x_range, env.end_y_range),
                  collisions)


def _terminal(result, env) -> ReportLine:
    assert isinstance(result, Finished), result
    return next(r for r in result.report if r.name == env.name)


def _worker(args):
    entry, cfg, index = args
    return run_environment(entry, cfg, index)


def apply_filter(cfg: SuiteConfig, pattern: Optional[str]) -> SuiteConfig:
    if pattern is None:
        return cfg
    envs = tuple(replace(e, spec=replace(e.spec, enabled=e.spec.enabled and fnmatch.fnmatchcase(e.spec.name, pattern)))
                 for e in cfg.envs)
    return replace(cfg, envs=envs)


def report_header(cfg: SuiteConfig) -> list:
    lines = ["# hybridnav suite report"]
    lines += [f"# sim.{f.name}={_fmt(getattr(cfg.sim, f.name))}" for f in fields(SimConfig)]
    lines += [f"# planner.{f.name}={_fmt(getattr(cfg.planner, f.name))}" for f in fields(PlannerSection)]
    return lines


def summary_table(report) -> list:
    width = max([len(r.name) for r in report] + [11])
    out = [f"{'environment':<{width}}  {'status':<12}  {'t (s)':>7}"]
    out += [f"{r.name:<{width}}  {r.status.value:<12}  {r.t:>7.2f}" for r in report]
    ok = sum(r.status is EnvStatus.SUCCESSFUL for r in report)
    enabled = sum(r.status is not EnvStatus.NOT_TESTING for r in report)
    out.append(f"{ok}/{enabled} enabled environments successful")
    return out


@dataclass
class SuiteResult:
    exit_code: int
    report: tuple
    text: str
    runs: dict = field(default_factory=dict)


def run_suite(cfg: SuiteConfig, out_dir, report_format: str = "text", jobs: int = 1,
              figures: bool = True) -> SuiteResult:
    """Run every enabled environment through the manager and write the artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {e.spec.name: (i, e) for i, e in enumerate(cfg.envs)}
    envs = [generate_environment(e.spec, VehicleParams(), spacing=1.0)[1] for e in cfg.envs]
    manager = EnvironmentManager(envs, cfg.sim.timeout)

    precomputed = {}
    if jobs > 1:
        todo = [(e, cfg, i) for i, e in enumerate(cfg.envs) if e.spec.enabled]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (e, _, _), run in zip(todo, pool.map(_worker, todo)):
                precomputed[e.spec.name] = run

    report_path = out / "report.txt"
    header = report_header(cfg)
    with report_path.open("w") as fh:
        fh.write("\n".join(header) + "\n")

    runs = {}
    clock = 0.0
    action = manager.start(clock)
    while not isinstance(action, Finished):
        env = action.env
        index, entry = entries[env.name]
        run = precomputed.get(env.name) or run_environment(entry, cfg, index)
        runs[env.name] = run
        _write_artifacts(out, env.name, run, figures)
        end = clock + run.line.t
        status = run.line.status
        if status is EnvStatus.SUCCESSFUL:
            action = manager.step(ReachedEnd(end, env.end_x_range[0], env.end_y_range[0]))
        elif status is EnvStatus.COLLIDED:
            action = manager.step(CollidedEvent(end))
        elif status is EnvStatus.STUCK:
            action = manager.step(StuckReported(end))
        else:
            action = manager.step(Tick(end))
        clock = end
        with report_path.open("a") as fh:
            fh.write(run.line.format() + "\n")
    report = action.report
    lines = [r.format() for r in report]
    if report_format == "lines":
        text = "\n".join(lines) + "\n"
    else:
        text = "\n".join(header + lines + [""] + summary_table(report)) + "\n"
    report_path.write_text(text)
    enabled = [r for r in report if r.status is not EnvStatus.NOT_TESTING]
    code = 0 if all(r.status is EnvStatus.SUCCESSFUL for r in enabled) else 1
    return SuiteResult(code, report, text, runs)


def _write_artifacts(out: Path, name: str, run: EnvRun, figures: bool) -> None:
    with (out / f"{name}.ticks.log").open("w") as fh:
        fh.write("\n".join(run.tick_log) + "\n")
        fh.flush()
    run.local_map.dump(out / f"{name}.map.txt")
    if figures:
        from .plotting import plot_run
        plot_run(run, out / f"{name}.png", title=name)


# -- CLI ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridnav", description="Run the hybrid-vehicle navigation test suite.")
    ap.add_argument("--config", help="suite config file (default: built-in six-environment suite)")
    ap.add_argument("--out", default="hybridnav-out", help="directory for logs, maps, figures and the report")
    ap.add_argument("--seed", type=int, help="override the sim seed (sensor noise)")
    ap.add_argument("--filter", help="only run environments whose name matches this glob")
    ap.add_argument("--list-envs", action="store_true", help="print environment names and exit")
    ap.add_argument("--report-format", choices=("text", "lines"), default="text")
    ap.add_argument("--jobs", type=int, default=1, help="run environments in N worker processes")
    ap.add_argument("--no-figures", action="store_true", help="skip the per-environment PNG figures")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else default_suite()
    except (OSError, ConfigError) as exc:
        print(f"hybridnav: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            print("hybridnav: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return 2
        cfg = replace(cfg, sim=replace(cfg.sim, seed=args.seed))
    if args.list_envs:
        for name in cfg.names():
            print(name)
        return 0
    cfg = apply_filter(cfg, args.filter)
    result = run_suite(cfg, args.out, args.report_format, max(1, args.jobs), not args.no_figures)
    sys.stdout.write(result.text)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
