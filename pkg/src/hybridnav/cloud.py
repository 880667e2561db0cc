"""Point-cloud containers, filters, spatial index and plane fitting.

Clouds are stored as ``(N, 3)`` float arrays with optional per-point
intensity and ring arrays.  Every filter returns a new cloud; nothing is
mutated in place.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


class Frame(enum.IntEnum):
    SENSOR = 0
    BODY = 1
    ODOMETRY = 2


class CloudStatus(enum.Enum):
    EMPTY_OK = "EmptyOk"
    NOISY = "Noisy"
    USABLE = "Usable"


class YSign(enum.Enum):
    POS = "pos"
    NEG = "neg"
    ANY = "any"


class Point3(NamedTuple):
    x: float
    y: float
    z: float


class FrameMismatchError(ValueError):
    pass


class NoPlaneError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame: Frame = Frame.SENSOR
    stamp: float = 0.0
    intensity: Optional[np.ndarray] = None
    ring: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        for name in ("intensity", "ring"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                if arr.shape != (len(pts),):
                    raise ValueError(f"{name} length {arr.shape} does not match {len(pts)} points")
                object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> "PointCloud":
        """Return the points selected by a boolean mask or index array."""
        return replace(
            self,
            points=self.points[mask],
            intensity=None if self.intensity is None else self.intensity[mask],
            ring=None if self.ring is None else self.ring[mask],
        )


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.roll, self.pitch, self.yaw)


@dataclass(frozen=True)
class Plane:
    a: float
    b: float
    c: float
    d: float
    inlier_count: int = 0
    inliers: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal + self.d


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w == -math.pi:
        w = math.pi
    return w


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Roll-pitch-yaw rotation, composed as R_roll @ R_pitch @ R_yaw."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    r_roll = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    r_pitch = np.array([[cp, 0.0, -sp], [0.0, 1.0, 0.0], [sp, 0.0, cp]])
    r_yaw = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    return r_roll @ r_pitch @ r_yaw


def affine_matrix(pose: Pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = pose.rotation()
    m[:3, 3] = pose.position
    return m


def transform_cloud(cloud: PointCloud, pose: Pose, target_frame: Frame) -> PointCloud:
    """Move a cloud one step along Sensor <-> Body <-> Odometry.

    ``pose`` is the pose of the source frame expressed in the next frame up
    (sensor extrinsics for Sensor->Body, the vehicle state for
    Body->Odometry).  Moving down the chain applies the inverse transform.
    """
    step = int(target_frame) - int(cloud.frame)
    if abs(step) != 1:
        raise FrameMismatchError(f"cannot transform {cloud.frame.name} -> {target_frame.name}")
    rot = pose.rotation()
    t = pose.position
    if step == 1:
        pts = cloud.points @ rot.T + t
    else:
        pts = (cloud.points - t) @ rot
    return replace(cloud, points=pts, frame=target_frame)


def voxel_downsample(cloud: PointCloud, voxel_size: float, min_points: int = 1) -> PointCloud:
    """Replace the members of each sufficiently occupied voxel by their centroid.

    Non-finite points and points exactly at the sensor origin are dropped
    first.  Intensity is averaged; ring ids cannot be merged and are dropped.
    """
    if voxel_size <= 0 or min_points < 1:
        raise ValueError("voxel_size must be > 0 and min_points >= 1")
    pts = cloud.points
    keep = np.all(np.isfinite(pts), axis=1) & np.any(pts != 0.0, axis=1)
    pts = pts[keep]
    inten = None if cloud.intensity is None else cloud.intensity[keep]
    if len(pts) == 0:
        return replace(cloud, points=pts, intensity=inten, ring=None)
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    occupied = counts >= min_points
    centroids = sums[occupied] / counts[occupied, None]
    out_inten = None
    if inten is not None:
        isum = np.zeros(len(counts))
        np.add.at(isum, inverse, inten)
        out_inten = isum[occupied] / counts[occupied]
    return replace(cloud, points=centroids, intensity=out_inten, ring=None)


def crop_box_remove(cloud: PointCloud, box_min, box_max) -> PointCloud:
    """Remove points inside the closed axis-aligned box; a degenerate box removes nothing."""
    lo = np.asarray(box_min, dtype=float)
    hi = np.asarray(box_max, dtype=float)
    if np.any(lo >= hi):
        return cloud
    inside = np.all((cloud.points >= lo) & (cloud.points <= hi), axis=1)
    return cloud.subset(~inside)


def classify_cloud_status(raw_size: int, processed_size: int) -> CloudStatus:
    if raw_size == 0:
        return CloudStatus.EMPTY_OK
    if processed_size == 0:
        return CloudStatus.NOISY
    return CloudStatus.USABLE


def radius_remove(cloud: PointCloud, center, radius: float) -> PointCloud:
    """Drop every point within ``radius`` of ``center`` (exact-center points always go)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    d = np.linalg.norm(cloud.points - np.asarray(center, dtype=float), axis=1)
    return cloud.subset(d > radius)


def passthrough_filter(cloud: PointCloud, z_min: float, z_max: float, y_sign: YSign = YSign.ANY) -> PointCloud:
    if z_min >= z_max:
        raise ValueError("z_min must be < z_max")
    z = cloud.points[:, 2]
    mask = (z >= z_min) & (z <= z_max)
    if y_sign is YSign.POS:
        mask &= cloud.points[:, 1] > 0
    elif y_sign is YSign.NEG:
        mask &= cloud.points[:, 1] < 0
    return cloud.subset(mask)


# -- dust ---------------------------------------------------------------------

def windowed_range_variance(cloud: PointCloud, window: int) -> np.ndarray:
    """Sample variance of range over a centred window of same-ring neighbours.

    Points in a ring are ordered by azimuth.  Windows are shifted inward at
    the ends of a ring; rings with fewer than ``window`` points use the
    whole ring.  Rings with fewer than two points get variance 0.
    """
    pts = cloud.points
    rng = np.linalg.norm(pts, axis=1)
    az = np.arctan2(pts[:, 1], pts[:, 0])
    out = np.zeros(len(pts))
    half = window // 2
    for ring_id in np.unique(cloud.ring):
        idx = np.flatnonzero(cloud.ring == ring_id)
        idx = idx[np.argsort(az[idx], kind="stable")]
        r = rng[idx]
        n = len(r)
        if n < 2:
            continue
        w = min(window, n)
        # variance of every length-w window, then map each point to its centred window
        csum = np.concatenate(([0.0], np.cumsum(r)))
        csq = np.concatenate(([0.0], np.cumsum(r * r)))
        s = csum[w:] - csum[:-w]
        sq = csq[w:] - csq[:-w]
        var = np.maximum((sq - s * s / w) / (w - 1), 0.0)
        start = np.clip(np.arange(n) - half, 0, n - w)
        out[idx] = var[start]
    return out


def dust_filter(cloud: PointCloud, window: int = 7, variance_threshold: float = 0.05):
    """Remove points whose along-ring range variance exceeds the threshold.

    Ranges are measured from the cloud origin, so the cloud should still be
    in the sensor frame.  Returns ``(cloud, ok)``; ``ok`` is False when ring
    ids are missing and the filter did nothing.
    """
    if window < 3:
        raise ValueError("window must be >= 3")
    if len(cloud) == 0:
        return cloud, True
    if cloud.ring is None:
        log.warning("dust filter skipped: cloud carries no ring ids")
        return cloud, False
    var = windowed_range_variance(cloud, window)
    return cloud.subset(var <= variance_threshold), True


# -- kd index -----------------------------------------------------------------

class KnnResult(list):
    """List of ``(Point3, distance)``; ``empty_index`` flags a query on an empty index."""

    def __init__(self, items=(), empty_index=False):
        super().__init__(items)
        self.empty_index = empty_index


class KdIndex:
    """Immutable k-d tree over a cloud snapshot."""

    def __init__(self, points):
        self.points = np.array(points, dtype=float).reshape(-1, 3)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return self._tree is None

    def nearest_distance(self, queries) -> np.ndarray:
        """Distance from each query to its nearest indexed point (inf when empty)."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        if self._tree is None:
            return np.full(len(q), np.inf)
        d, _ = self._tree.query(q, k=1)
        return d

    def within(self, query, radius: float) -> np.ndarray:
        if self._tree is None:
            return np.empty(0, dtype=int)
        return np.array(sorted(self._tree.query_ball_point(np.asarray(query, float), radius)), dtype=int)

    def any_within(self, query, radius: float) -> bool:
        if self._tree is None:
            return False
        d, _ = self._tree.query(np.asarray(query, float), k=1, distance_upper_bound=radius)
        return bool(np.isfinite(d) and d <= radius)


def knn_search(index: KdIndex, query, k: int) -> KnnResult:
    """The ``k`` nearest points, ascending by distance, ties by insertion order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.is_empty:
        return KnnResult(empty_index=True)
    q = np.asarray(query, dtype=float)
    k = min(k, len(index))
    d, _ = index._tree.query(q, k=k)
    kth = float(np.atleast_1d(d)[-1])
    # re-collect everything at the k-th distance so tie order is deterministic
    cand = np.asarray(index._tree.query_ball_point(q, kth * (1 + 1e-12) + 1e-300), dtype=int)
    dist = np.linalg.norm(index.points[cand] - q, axis=1)
    order = np.lexsort((cand, dist))[:k]
    return KnnResult((Point3(*index.points[cand[i]]), float(dist[i])) for i in order)


# -- plane fitting ------------------------------------------------------------

def _lsq_plane(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    n = vt[-1]
    return n, -float(n @ centroid)


def _canonical(n, d):
    # fix the sign so results are reproducible: first nonzero normal component positive
    for comp in n:
        if abs(comp) > 1e-12:
            if comp < 0:
                return -n, -d
            break
    return n, d


def fit_plane(cloud, inlier_tol: float = 0.05, iterations: int = 200, rng_seed: int = 0) -> Plane:
    """Seeded RANSAC plane fit followed by a least-squares refit on the inliers."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    n_pts = len(pts)
    if n_pts < 3:
        raise NoPlaneError("need at least 3 points")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise NoPlaneError("points are collinear")

    rng = np.random.default_rng(rng_seed)
    best_mask = None
    best_count = -1
    for _ in range(iterations):
        sample = pts[rng.choice(n_pts, 3, replace=False)]
        n = np.cross(sample[1] - sample[0], sample[2] - sample[0])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        dist = np.abs(pts @ n - n @ sample[0])
        mask = dist <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < 3:
        raise NoPlaneError("no consensus plane found")

    n, d = _lsq_plane(pts[best_mask])
    # refit once more against the refined model
    mask = np.abs(pts @ n + d) <= inlier_tol
    if mask.sum() >= 3:
        n, d = _lsq_plane(pts[mask])
    else:
        mask = best_mask
    n, d = _canonical(n, d)
    return Plane(float(n[0]), float(n[1]), float(n[2]), float(d), int(mask.sum()), inliers=mask)


# -- ascii format -------------------------------------------------------------

def write_cloud(cloud: PointCloud, path) -> None:
    lines = [f"cloudv1 {len(cloud)} {cloud.frame.name.lower()}"]
    for i, p in enumerate(cloud.points):
        parts = [repr(float(v)) for v in p]
        if cloud.intensity is not None:
            parts.append(repr(float(cloud.intensity[i])))
            if cloud.ring is not None:
                parts.append(str(int(cloud.ring[i])))
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty file")
    header = text[0].split()
    if len(header) != 3 or header[0] != "cloudv1":
        raise ValueError(f"{path}:1: bad header {text[0]!r}")
    n = int(header[1])
    frame = Frame[header[2].upper()]
    rows = [line.split() for line in text[1:] if line.strip()]
    if len(rows) != n:
        raise ValueError(f"{path}: header says {n} points, found {len(rows)}")
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError(f"{path}: inconsistent column count")
    width = widths.pop() if widths else 3
    if width not in (3, 4, 5):
        raise ValueError(f"{path}: expected 3-5 columns, got {width}")
    data = np.array([[float(v) for v in r[:4]] for r in rows]).reshape(-1, min(width, 4))
    inten = data[:, 3] if width >= 4 else None
    ring = np.array([int(r[4]) for r in rows]) if width == 5 else None
    return PointCloud(data[:, :3], frame=frame, intensity=inten, ring=ring)
