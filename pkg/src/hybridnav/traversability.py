"""Elevation maps and per-cell roughness/slope traversability analysis."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import NoPlaneError, PointCloud, fit_plane

RANSAC_MIN_POINTS = 50
MIN_CELL_POINTS = 4


class TerrainClass(enum.Enum):
    EASY = "Easy"
    DIFFICULT = "Difficult"
    UNTRAVERSABLE = "Untraversable"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Thresholds:
    var_easy: float = 0.001
    var_max: float = 0.01
    slope_easy: float = 0.17
    slope_max: float = 0.52

    def __post_init__(self):
        if not (0 <= self.var_easy < self.var_max and 0 <= self.slope_easy < self.slope_max):
            raise ValueError("thresholds must satisfy easy < max")


@dataclass
class ElevationMap:
    """Ground points bucketed into square cells; cell (ix, iy) spans
    ``origin + [ix, ix+1) * resolution`` in x and likewise in y."""

    resolution: float
    origin: tuple
    width: int
    height: int
    cells: dict = field(default_factory=dict)

    def cell_means(self) -> np.ndarray:
        out = np.full((self.height, self.width), np.nan)
        for (ix, iy), pts in self.cells.items():
            out[iy, ix] = pts[:, 2].mean()
        return out


def build_elevation_map(cloud: PointCloud, vehicle_height: float, resolution: float) -> ElevationMap:
    """Bucket the points lower than ``vehicle_height`` into a square grid."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = cloud.points
    pts = pts[np.all(np.isfinite(pts), axis=1) & (pts[:, 2] < vehicle_height)]
    if len(pts) == 0:
        return ElevationMap(resolution, (0.0, 0.0), 0, 0)
    origin = np.floor(pts[:, :2].min(axis=0) / resolution) * resolution
    idx = np.floor((pts[:, :2] - origin) / resolution).astype(np.int64)
    width, height = (idx.max(axis=0) + 1).tolist()
    key = idx[:, 1] * width + idx[:, 0]
    order = np.argsort(key, kind="stable")
    key, pts = key[order], pts[order]
    uniq, starts = np.unique(key, return_index=True)
    cells = {}
    for k, chunk in zip(uniq.tolist(), np.split(pts, starts[1:])):
        cells[(k % width, k // width)] = chunk
    return ElevationMap(resolution, (float(origin[0]), float(origin[1])), width, height, cells)


def analyze_cell(points) -> Optional[tuple]:
    """``(variance, slope)`` of the best-fit plane through a cell, or None when sparse.

    Variance is the mean squared point-to-plane distance; slope is the tilt
    of the plane normal from vertical.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < MIN_CELL_POINTS:
        return None
    normal = None
    if len(pts) > RANSAC_MIN_POINTS:
        try:
            plane = fit_plane(pts, iterations=50)
            normal, offset = plane.normal, plane.d
        except NoPlaneError:
            normal = None
    if normal is None:
        centroid = pts.mean(axis=0)
        centred = pts - centroid
        w, v = np.linalg.eigh(centred.T @ centred)
        if w[-1] <= 1e-18 or w[1] <= 1e-12 * w[-1]:
            # collinear or coincident points do not pin down a plane
            if w[-1] <= 1e-18:
                return 0.0, 0.0
            axis = v[:, -1]
            return 0.0, math.pi / 2 if abs(axis[2]) > 1e-9 else 0.0
        normal = v[:, 0]
        offset = -float(normal @ centroid)
    dist = pts @ normal + offset
    variance = float(np.mean(dist**2))
    cos_tilt = abs(float(normal[2])) / float(np.linalg.norm(normal))
    slope = math.acos(min(1.0, cos_tilt))
    return variance, slope


@dataclass(frozen=True)
class TerrainCell:
    variance: float
    slope: float
    cls: TerrainClass
    n_points: int = 0


def classify(variance: Optional[float], slope: Optional[float], thresholds: Thresholds = Thresholds()) -> TerrainClass:
    if variance is None or slope is None:
        return TerrainClass.UNKNOWN
    if variance > thresholds.var_max or slope > thresholds.slope_max:
        return TerrainClass.UNTRAVERSABLE
    if variance < thresholds.var_easy and slope < thresholds.slope_easy:
        return TerrainClass.EASY
    return TerrainClass.DIFFICULT


def traversability_cost(cell, thresholds: Thresholds = Thresholds(), c_col: float = 10000.0) -> float:
    """Cost of crossing a cell (or a bare class).

    Difficult cells interpolate between the easy and max thresholds on
    whichever of variance or slope is worse, staying strictly inside
    ``(0, c_col)``.  A bare Difficult class gets the midpoint.
    """
    cls = cell.cls if isinstance(cell, TerrainCell) else cell
    if cls is TerrainClass.EASY:
        return 0.0
    if cls in (TerrainClass.UNTRAVERSABLE, TerrainClass.UNKNOWN):
        return c_col
    if not isinstance(cell, TerrainCell):
        return 0.5 * c_col
    u_var = (cell.variance - thresholds.var_easy) / (thresholds.var_max - thresholds.var_easy)
    u_slope = (cell.slope - thresholds.slope_easy) / (thresholds.slope_max - thresholds.slope_easy)
    u = min(1.0, max(0.0, u_var, u_slope))
    return c_col * (0.01 + 0.98 * u)


@dataclass
class TerrainMap:
    resolution: float
    origin: tuple
    variance: np.ndarray
    slope: np.ndarray
    classes: np.ndarray
    counts: np.ndarray

    @property
    def shape(self):
        return self.variance.shape

    def cell(self, ix: int, iy: int) -> TerrainCell:
        return TerrainCell(float(self.variance[iy, ix]), float(self.slope[iy, ix]),
                           self.classes[iy, ix], int(self.counts[iy, ix]))

    def cost_layer(self, thresholds: Thresholds = Thresholds(), c_col: float = 10000.0) -> dict:
        h, w = self.shape
        return {(ix, iy): traversability_cost(self.cell(ix, iy), thresholds, c_col)
                for iy in range(h) for ix in range(w)}

    def dumps(self) -> str:
        h, w = self.shape
        lines = [f"travv1 {self.resolution!r} {w} {h}"]
        for iy in range(h):
            for ix in range(w):
                lines.append(f"{float(self.variance[iy, ix])!r} {float(self.slope[iy, ix])!r} {self.classes[iy, ix].value}")
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, origin=(0.0, 0.0)) -> "TerrainMap":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if head[0] != "travv1" or len(head) != 4:
            raise ValueError(f"bad terrain header {lines[0]!r}")
        res, w, h = float(head[1]), int(head[2]), int(head[3])
        if len(lines) - 1 != w * h:
            raise ValueError(f"expected {w * h} cells, found {len(lines) - 1}")
        rows = [ln.split() for ln in lines[1:]]
        var = np.array([float(r[0]) for r in rows]).reshape(h, w)
        slope = np.array([float(r[1]) for r in rows]).reshape(h, w)
        classes = np.array([TerrainClass(r[2]) for r in rows], dtype=object).reshape(h, w)
        return cls(res, tuple(origin), var, slope, classes, np.zeros((h, w), dtype=int))


def build_terrain_maps(emap: ElevationMap, thresholds: Thresholds = Thresholds()) -> TerrainMap:
    """Run ``analyze_cell`` over every grid cell and classify the results."""
    shape = (emap.height, emap.width)
    var = np.full(shape, np.nan)
    slope = np.full(shape, np.nan)
    counts = np.zeros(shape, dtype=int)
    classes = np.full(shape, TerrainClass.UNKNOWN, dtype=object)
    for (ix, iy), pts in emap.cells.items():
        counts[iy, ix] = len(pts)
        result = analyze_cell(pts)
        if result is None:
            continue
        var[iy, ix], slope[iy, ix] = result
        classes[iy, ix] = classify(result[0], result[1], thresholds)
    return TerrainMap(emap.resolution, emap.origin, var, slope, classes, counts)
