"""Motion primitives: quintic boundary solves, sampling, collision checks and cost."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cloud import KdIndex, Point3, Pose


class CollisionStatus(enum.Enum):
    FREE = "Free"
    NEAR = "NearCollision"
    COLLIDING = "Colliding"


@dataclass(frozen=True)
class AxisPoly:
    """Quintic ``p(t) = c[0] + c[1] t + ... + c[5] t^5`` on ``[0, T]``."""

    coeffs: tuple
    T: float

    @property
    def initial_state(self):
        c = self.coeffs
        return c[0], c[1], 2.0 * c[2]


def solve_min_snap_axis(x0, v0, a0, xf, vf, af, T) -> AxisPoly:
    """Solve the per-axis quintic matching position, velocity and acceleration at both ends."""
    if not T > 0:
        raise ValueError(f"duration must be positive, got {T}")
    A = np.array([
        [T**3, T**4, T**5],
        [3 * T**2, 4 * T**3, 5 * T**4],
        [6 * T, 12 * T**2, 20 * T**3],
    ])
    B = np.array([
        xf - (x0 + v0 * T + 0.5 * a0 * T**2),
        vf - (v0 + a0 * T),
        af - a0,
    ])
    c456 = np.linalg.solve(A, B)
    return AxisPoly((float(x0), float(v0), 0.5 * float(a0), *map(float, c456)), float(T))


def eval_primitive(poly: AxisPoly, t: float):
    """Position, velocity and acceleration of one axis at time ``t``."""
    if t < -1e-12 or t > poly.T * (1 + 1e-12) + 1e-12:
        raise ValueError(f"t={t} outside [0, {poly.T}]")
    c = poly.coeffs
    p = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))))
    v = c[1] + t * (2 * c[2] + t * (3 * c[3] + t * (4 * c[4] + t * 5 * c[5])))
    a = 2 * c[2] + t * (6 * c[3] + t * (12 * c[4] + t * 20 * c[5]))
    return p, v, a


def _eval_many(poly: AxisPoly, ts: np.ndarray) -> np.ndarray:
    return np.polyval(poly.coeffs[::-1], ts)


@dataclass(frozen=True)
class CostConfig:
    c_gw: float = 1.0
    collision_buffer: float = 0.3
    near_buffer: float = 0.6

    def __post_init__(self):
        if not self.near_buffer > self.collision_buffer > 0:
            raise ValueError("need near_buffer > collision_buffer > 0")

    @property
    def c_ncol(self) -> float:
        return self.c_gw * 100.0

    @property
    def c_col(self) -> float:
        return self.c_ncol * 100.0


@dataclass
class Primitive:
    polys: tuple
    endpoint: Point3
    samples: np.ndarray
    times: np.ndarray
    index: int = 0
    goal_angle: float = 0.0
    min_obstacle_dist: float = math.inf
    status: CollisionStatus = CollisionStatus.FREE
    cost: float = 0.0
    tags: dict = field(default_factory=dict)

    @property
    def T(self) -> float:
        return self.polys[0].T

    def state(self, t: float):
        """Stacked (p, v, a) vectors at time t."""
        pva = np.array([eval_primitive(p, t) for p in self.polys])
        return pva[:, 0], pva[:, 1], pva[:, 2]


def generate_endpoints(state: Pose, horizon: float, azimuth_fov: float, n_azimuth: int,
                       elevation_rows: Sequence[float] = (0.0,), yaw_escape: bool = False) -> list:
    """Endpoints on the horizon sphere, one fan of azimuths per elevation row.

    The fan is centred on the current yaw.  A full-circle fov spaces the
    azimuths evenly without duplicating the seam.  The optional escape
    endpoint sits directly behind the vehicle at zero elevation.
    """
    if n_azimuth < 1 or horizon <= 0:
        raise ValueError("need n_azimuth >= 1 and horizon > 0")
    if azimuth_fov >= 2 * math.pi - 1e-12:
        az = state.yaw + 2 * math.pi * np.arange(n_azimuth) / n_azimuth
    elif n_azimuth == 1:
        az = np.array([state.yaw])
    else:
        az = state.yaw + np.linspace(-azimuth_fov / 2, azimuth_fov / 2, n_azimuth)
    origin = state.position
    out = []
    for elev in elevation_rows:
        for a in az:
            d = np.array([math.cos(elev) * math.cos(a), math.cos(elev) * math.sin(a), math.sin(elev)])
            out.append(Point3(*(origin + horizon * d)))
    if yaw_escape:
        a = state.yaw + math.pi
        out.append(Point3(*(origin + horizon * np.array([math.cos(a), math.sin(a), 0.0]))))
    return out


def build_primitive(start, endpoint, T: float, v0=(0, 0, 0), a0=(0, 0, 0), vf=(0, 0, 0), af=(0, 0, 0),
                    spacing: float = 0.1, index: int = 0) -> Primitive:
    """Solve the three axis polynomials and sample them at most ``spacing`` metres apart."""
    start = np.asarray(start, float)
    end = np.asarray(endpoint, float)
    polys = tuple(solve_min_snap_axis(start[i], v0[i], a0[i], end[i], vf[i], af[i], T) for i in range(3))
    # size the sample count from the arc length, then refine until no gap exceeds the spacing
    dense_t = np.linspace(0.0, T, 33)
    dense = np.stack([_eval_many(p, dense_t) for p in polys], axis=1)
    arc = float(np.linalg.norm(np.diff(dense, axis=0), axis=1).sum())
    n = max(1, math.ceil(arc / spacing))
    while True:
        times = np.linspace(0.0, T, n + 1)
        samples = np.stack([_eval_many(p, times) for p in polys], axis=1)
        if n >= 4096 or np.linalg.norm(np.diff(samples, axis=0), axis=1).max() <= spacing:
            break
        n = math.ceil(n * 1.25) + 1
    return Primitive(polys, Point3(*end), samples, times, index=index)


def check_collision(prim: Primitive, index: KdIndex, cfg: CostConfig):
    """Minimum sample-to-obstacle distance and the resulting collision band."""
    d = float(index.nearest_distance(prim.samples).min()) if len(prim.samples) else math.inf
    if d <= cfg.collision_buffer:
        status = CollisionStatus.COLLIDING
    elif d <= cfg.near_buffer:
        status = CollisionStatus.NEAR
    else:
        status = CollisionStatus.FREE
    return d, status


def primitive_cost(goal_angle: float, min_dist: float, cfg: CostConfig) -> float:
    if min_dist <= cfg.collision_buffer:
        collision_cost = cfg.c_col
    elif min_dist <= cfg.near_buffer:
        collision_cost = cfg.c_ncol - min_dist
    else:
        collision_cost = 0.0
    return collision_cost + goal_angle * cfg.c_gw


def vector_angle(u, v) -> float:
    """Unsigned angle between two vectors, 0 if either is zero."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(math.acos(max(-1.0, min(1.0, float(u @ v) / (nu * nv)))))


def select_best(primitives: Sequence[Primitive]) -> Optional[Primitive]:
    """Lowest-cost non-colliding primitive, or None when the vehicle is stuck."""
    usable = [p for p in primitives if p.status is not CollisionStatus.COLLIDING]
    if not usable:
        return None
    return min(usable, key=lambda p: (p.cost, abs(p.goal_angle), p.index))


# -- interior-point baseline ----------------------------------------------------

def barrier_descent(obstacles, start, goal, barrier_iters: int = 6, newton_iters: int = 20,
                    radius: float = 0.3, t0: float = 1.0, mu: float = 10.0) -> list:
    """Log-barrier Newton descent toward ``goal`` around spherical obstacles.

    Minimises ``t/2 |x - goal|^2 - sum log(|x - o|^2 - radius^2)`` for an
    increasing sequence of ``t`` and returns every accepted iterate,
    starting with ``start``.
    """
    obs = np.asarray(obstacles, float).reshape(-1, len(start)) if len(obstacles) else np.empty((0, len(start)))
    x = np.asarray(start, float).copy()
    g_pt = np.asarray(goal, float)
    dim = len(x)
    eye = np.eye(dim)

    def slack(p):
        return np.sum((p - obs) ** 2, axis=1) - radius**2

    if len(obs) and np.any(slack(x) <= 0):
        raise ValueError("start lies inside an obstacle barrier")

    def objective(p, t):
        s = slack(p)
        if np.any(s <= 0):
            return math.inf
        return 0.5 * t * float((p - g_pt) @ (p - g_pt)) - float(np.sum(np.log(s)))

    trace = [x.copy()]
    t = t0
    for _ in range(barrier_iters):
        for _ in range(newton_iters):
            diff = x - obs
            s = slack(x)
            grad = t * (x - g_pt) - np.sum(2 * diff / s[:, None], axis=0)
            hess = t * eye
            for di, si in zip(diff, s):
                hess = hess - 2 * eye / si + 4 * np.outer(di, di) / si**2
            eig_min = float(np.linalg.eigvalsh(hess).min())
            if eig_min <= 1e-9:
                step = -0.5 * np.linalg.solve(hess + (abs(eig_min) + 1e-6) * eye, grad)
            else:
                step = -np.linalg.solve(hess, grad)
            if np.linalg.norm(step) < 1e-12:
                break
            # backtracking keeps the iterate strictly feasible and non-increasing
            f0 = objective(x, t)
            alpha = 1.0
            while alpha > 1e-8:
                cand = x + alpha * step
                if objective(cand, t) <= f0 + 1e-4 * alpha * float(grad @ step):
                    break
                alpha *= 0.5
            else:
                break
            x = cand
            trace.append(x.copy())
        t *= mu
    return trace
