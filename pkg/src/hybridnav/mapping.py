"""Local voxel map and the two-mode (rolling/flying) A* mid-level planner."""

from __future__ import annotations

import enum
import heapq
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .cloud import Frame, Point3, PointCloud


class Mode(enum.Enum):
    GROUND = "ground"
    AIR = "air"


DEFAULT_MODE_COST = {Mode.GROUND: 1.0, Mode.AIR: 5.0}


class HybridNode(NamedTuple):
    i: int
    j: int
    k: int
    mode: Mode


@dataclass
class LocalMap:
    resolution: float = 0.2
    origin: tuple = (0.0, 0.0, 0.0)
    retain_radius: float = 6.0
    occupied: set = field(default_factory=set)

    def voxel_of(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.floor((pts - np.asarray(self.origin)) / self.resolution).astype(np.int64)

    def voxel_center(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def insert_cloud(self, cloud: PointCloud) -> "LocalMap":
        if cloud.frame is not Frame.ODOMETRY:
            raise ValueError("local map expects an odometry-frame cloud")
        pts = cloud.points[np.all(np.isfinite(cloud.points), axis=1)]
        if len(pts):
            self.occupied.update(map(tuple, np.unique(self.voxel_of(pts), axis=0).tolist()))
        return self

    def prune_radius(self, center, retain_radius: Optional[float] = None) -> "LocalMap":
        radius = self.retain_radius if retain_radius is None else retain_radius
        if not self.occupied:
            return self
        keys = list(self.occupied)
        centers = self.voxel_center(keys)
        d = np.linalg.norm(centers - np.asarray(center, dtype=float), axis=1)
        self.occupied = {k for k, dist in zip(keys, d) if dist <= radius}
        return self

    def reset(self) -> "LocalMap":
        self.occupied = set()
        return self

    def is_occupied(self, i, j, k) -> bool:
        return (i, j, k) in self.occupied

    def dumps(self) -> str:
        lines = [f"mapv1 {self.resolution!r}"]
        lines += [f"{i} {j} {k}" for i, j, k in sorted(self.occupied)]
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, **kwargs) -> "LocalMap":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if head[0] != "mapv1" or len(head) != 2:
            raise ValueError(f"bad map header {lines[0]!r}")
        occ = {tuple(int(v) for v in ln.split()) for ln in lines[1:]}
        return cls(resolution=float(head[1]), occupied=occ, **kwargs)


# -- graph search ---------------------------------------------------------------

@dataclass(frozen=True)
class PlanningGrid:
    """Bounded two-mode node set over an occupancy predicate.

    Ground nodes live at ``k == 0``; air nodes at ``1 <= k <= k_max``.
    ``ground_blocked`` marks (i, j) columns that are untraversable on the
    ground but may be flown over.
    """

    occupied: frozenset
    i_range: tuple
    j_range: tuple
    k_max: int = 1
    ground_blocked: frozenset = frozenset()

    @classmethod
    def from_map(cls, lmap: LocalMap, i_range, j_range, k_max=1, ground_blocked=()):
        return cls(frozenset(lmap.occupied), tuple(i_range), tuple(j_range), k_max, frozenset(ground_blocked))

    def free(self, node: HybridNode) -> bool:
        if not (self.i_range[0] <= node.i <= self.i_range[1] and self.j_range[0] <= node.j <= self.j_range[1]):
            return False
        if node.mode is Mode.GROUND:
            if node.k != 0 or (node.i, node.j) in self.ground_blocked:
                return False
        elif not 1 <= node.k <= self.k_max:
            return False
        return (node.i, node.j, node.k) not in self.occupied


_MOVES = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def neighbours(grid: PlanningGrid, node: HybridNode, resolution: float, mode_cost, mode_change_factor: float):
    """Yield ``(neighbour, edge_cost)`` pairs."""
    for di, dj, dk in _MOVES:
        nxt = HybridNode(node.i + di, node.j + dj, node.k + dk, node.mode)
        if grid.free(nxt):
            yield nxt, resolution * mode_cost[node.mode]
    if node.mode is Mode.GROUND:
        other = HybridNode(node.i, node.j, 1, Mode.AIR)
    elif node.k == 1:
        other = HybridNode(node.i, node.j, 0, Mode.GROUND)
    else:
        return
    if grid.free(other):
        yield other, mode_change_factor * resolution * mode_cost[other.mode]


def astar_plan(grid: PlanningGrid, start: HybridNode, goal: HybridNode, resolution: float = 0.2,
               mode_cost=None, mode_change_factor: float = 0.5):
    """Cheapest two-mode path from ``start`` to ``goal``.

    Returns ``(path, cost)`` or ``None`` when the goal is unreachable.  The
    heuristic is the horizontal straight-line distance scaled by the
    cheaper mode cost, which never overestimates because every horizontal
    step costs at least that much and vertical edges are non-negative.
    """
    mode_cost = DEFAULT_MODE_COST if mode_cost is None else mode_cost
    if not grid.free(start) or not grid.free(goal):
        return None
    cmin = min(mode_cost.values())

    def h(n):
        return cmin * resolution * math.hypot(n.i - goal.i, n.j - goal.j)

    counter = itertools.count()
    g_cost = {start: 0.0}
    pred = {start: None}
    heap = [(h(start), next(counter), start)]
    closed = set()
    while heap:
        _, _, node = heapq.heappop(heap)
        if node in closed:
            continue
        if node == goal:
            path = [node]
            while pred[path[-1]] is not None:
                path.append(pred[path[-1]])
            return path[::-1], g_cost[node]
        closed.add(node)
        for nxt, w in neighbours(grid, node, resolution, mode_cost, mode_change_factor):
            cand = g_cost[node] + w
            if cand < g_cost.get(nxt, math.inf) - 1e-12:
                g_cost[nxt] = cand
                pred[nxt] = node
                heapq.heappush(heap, (cand + h(nxt), next(counter), nxt))
    return None


def path_cost(path, resolution: float = 0.2, mode_cost=None, mode_change_factor: float = 0.5) -> float:
    """Cost of an explicit node sequence under the planner's edge model."""
    mode_cost = DEFAULT_MODE_COST if mode_cost is None else mode_cost
    total = 0.0
    for a, b in zip(path, path[1:]):
        if a.mode is b.mode:
            total += resolution * mode_cost[a.mode]
        else:
            total += mode_change_factor * resolution * mode_cost[b.mode]
    return total


# -- path post-processing -------------------------------------------------------

def extract_waypoint(path, distance: float) -> Point3:
    """Point at arc length ``distance`` along a polyline (its end if shorter)."""
    pts = np.asarray(path, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty path")
    if distance <= 0 or len(pts) == 1:
        return Point3(*pts[0])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    remaining = distance
    for p0, p1, length in zip(pts[:-1], pts[1:], seg):
        if remaining <= length and length > 0:
            return Point3(*(p0 + (p1 - p0) * (remaining / length)))
        remaining -= length
    return Point3(*pts[-1])


class AnnotatedPoint(NamedTuple):
    point: Point3
    mode: Mode
    transition: bool


def annotate_modes(path, lmap: Optional[LocalMap] = None) -> list:
    """Label each node of a planned path with its mode and flag mode switches.

    ``transition`` is True on the first node of every run after the first.
    Node positions are voxel centres of ``lmap`` (unit voxels at the
    origin when no map is given).
    """
    out = []
    prev = None
    for node in path:
        if lmap is not None:
            pt = Point3(*lmap.voxel_center((node.i, node.j, node.k)))
        else:
            pt = Point3(node.i + 0.5, node.j + 0.5, node.k + 0.5)
        out.append(AnnotatedPoint(pt, node.mode, prev is not None and node.mode is not prev))
        prev = node.mode
    return out


def mode_runs(annotated) -> list:
    """Collapse an annotated path into ``(mode, [points])`` runs."""
    runs = []
    for ap in annotated:
        if not runs or runs[-1][0] is not ap.mode:
            runs.append((ap.mode, []))
        runs[-1][1].append(ap.point)
    return runs
