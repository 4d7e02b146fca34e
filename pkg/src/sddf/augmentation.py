"""Novel view synthesis from an observed point cloud.

A cloud point ``q`` observed from ``p`` is re-used as a measurement from a new
viewpoint ``p_hat`` whenever nothing else in the cloud blocks the line of
sight.  Blocking is decided on the unit sphere around ``q``: every other point
becomes a direction, rotated so that the direction back to ``p`` is ``e_n``.
In 3D the occluded region lies below a loop of great-circle arcs through the
outermost directions, found as planar hull vertices after stereographic
projection from ``e_3``; a faster variant keeps only the highest occluder per
azimuth bin.  In 2D the occluded region is the arc spanned by the occluder
angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import rotation_to_axis, stereographic_project, to_spherical
from .scans import ScanSet
from .shapes import SensorModel

COINCIDENT = 1e-12
POLE_ANGLE = 1e-4
HULL_TOL = 1e-9


@dataclass
class PointCloud:
    """Surface points with the sensor position each was observed from."""

    points: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.provenance = np.asarray(self.provenance, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points.reshape(0 if self.points.size == 0 else 1, -1)
        if self.provenance.shape != self.points.shape:
            raise ValueError("provenance must match points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud points must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], self.provenance[idx])

    @classmethod
    def from_scan(cls, scan: ScanSet) -> "PointCloud":
        f = scan.finite_mask
        return cls(scan.hit_points(), scan.origins[f])


def transform_about_point(points, q, origin) -> tuple[np.ndarray, int]:
    """Unit directions from ``q`` to ``points``, rotated so ``origin - q`` becomes ``e_n``.

    Points coinciding with ``q`` map to the zero vector; their count is returned.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64)
    eta = np.asarray(origin, dtype=np.float64) - q
    eta = eta / np.linalg.norm(eta)
    R = rotation_to_axis(eta)
    diff = points - q
    norm = np.linalg.norm(diff, axis=1)
    same = norm < COINCIDENT
    out = np.zeros_like(diff)
    out[~same] = (diff[~same] / norm[~same, None]) @ R.T
    return out, int(same.sum())


# ----------------------------------------------------------------- 2D hulls


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(pts) -> np.ndarray:
    """Indices of the strict convex hull vertices, counter-clockwise (monotone chain).

    Points on a hull edge are not vertices.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return np.arange(n)
    if n > 64:
        cand = _prefilter(pts)
        if len(cand) < n:
            return cand[convex_hull_2d(pts[cand])]
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    P = pts[order].tolist()

    def chain(seq):
        out = []
        for i in seq:
            while len(out) >= 2 and _cross(P[out[-2]], P[out[-1]], P[i]) <= 0:
                out.pop()
            out.append(i)
        return out

    lower = chain(range(n))
    upper = chain(range(n - 1, -1, -1))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        # all points collinear: keep the two extremes
        hull = [lower[0], lower[-1]] if P[lower[0]] != P[lower[-1]] else [lower[0]]
    return order[hull]


def _prefilter(pts: np.ndarray) -> np.ndarray:
    """Drop points strictly inside the polygon of the extreme points in 8 directions."""
    ang = np.arange(8) * (np.pi / 4.0)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    ext = np.argmax(pts @ dirs.T, axis=0)
    _, first = np.unique(ext, return_index=True)
    ext = ext[np.sort(first)]
    if len(ext) < 3:
        return np.arange(len(pts))
    poly = pts[ext]
    a, b = poly, np.roll(poly, -1, axis=0)
    e = b - a
    cross = e[None, :, 0] * (pts[:, None, 1] - a[None, :, 1]) - e[None, :, 1] * (pts[:, None, 0] - a[None, :, 0])
    scale = np.linalg.norm(e, axis=1)[None, :] * (1.0 + np.abs(pts).sum(axis=1))[:, None]
    strictly_inside = np.all(cross > 1e-9 * scale, axis=1)
    return np.flatnonzero(~strictly_inside)


def hull_boundary(units) -> np.ndarray:
    """Indices of unit vectors whose stereographic images are planar hull vertices."""
    return convex_hull_2d(stereographic_project(units))


# --------------------------------------------------------------- visibility


class VisibilityIndex:
    """Occlusion test for one cloud point ``q`` against candidate viewpoints."""

    def __init__(self, q, origin, occluders, method: str = "exact", bins: int = 128):
        if method not in ("exact", "discretized"):
            raise ValueError(f"unknown visibility method {method!r}")
        if method == "discretized" and bins < 4:
            raise ValueError("need at least 4 azimuth bins")
        self.q = np.asarray(q, dtype=np.float64)
        self.dim = len(self.q)
        eta = np.asarray(origin, dtype=np.float64) - self.q
        self.R = rotation_to_axis(eta / np.linalg.norm(eta))
        self.method = method if self.dim == 3 else "arc"
        self.bins = bins
        U, self.dropped = transform_about_point(occluders, self.q, origin) if len(occluders) else (
            np.zeros((0, self.dim)), 0)
        U = U[np.any(U != 0.0, axis=1)]
        # directions next to the known line of sight cannot be occluders
        U = U[U[:, -1] < math.cos(POLE_ANGLE)]
        self.occluders = U
        if self.method == "arc":
            a = _arc_angle(U)
            self.arc = (a.min(), a.max()) if len(a) else None
        elif self.method == "exact":
            self.hull = None
            if len(U) >= 3:
                m = stereographic_project(U)
                idx = convex_hull_2d(m)
                if len(idx) >= 3:
                    self._geodesic_edges(m[idx], U[idx])
        else:
            az, el = to_spherical(U)
            E = np.full(bins, -math.pi / 2.0)
            np.maximum.at(E, _bin(az, bins), el)
            self.elevation = E

    def _geodesic_edges(self, poly: np.ndarray, units: np.ndarray) -> None:
        # Consecutive boundary vertices joined by great-circle arcs.  Only the
        # chain facing e3 bounds the occluded region from above; those are the
        # planar hull edges that keep the projection origin on their left.
        a, b = poly, np.roll(poly, -1, axis=0)
        faces_up = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0] > 0.0
        self.hull = poly
        self.edge_m = (a[faces_up], b[faces_up])
        A, B = units, np.roll(units, -1, axis=0)
        n = np.cross(A[faces_up], B[faces_up])
        self.edge_normal = n / np.linalg.norm(n, axis=1, keepdims=True)

    def _below_boundary(self, v: np.ndarray) -> np.ndarray:
        m = stereographic_project(v)
        a, b = self.edge_m
        # wedge of directions between the two vertex azimuths
        in_wedge = ((a[None, :, 0] * m[:, None, 1] - a[None, :, 1] * m[:, None, 0] >= 0.0)
                    & (m[:, None, 0] * b[None, :, 1] - m[:, None, 1] * b[None, :, 0] >= 0.0))
        under = v @ self.edge_normal.T <= HULL_TOL
        return np.any(in_wedge & under, axis=1)

    def directions(self, p_hat) -> np.ndarray:
        p_hat = np.atleast_2d(np.asarray(p_hat, dtype=np.float64))
        d = p_hat - self.q
        n = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(n < COINCIDENT):
            raise ValueError("viewpoint coincides with the query point")
        return (d / n) @ self.R.T

    def visible(self, p_hat) -> np.ndarray:
        single = np.asarray(p_hat).ndim == 1
        v = self.directions(p_hat)
        near_pole = v[:, -1] >= math.cos(POLE_ANGLE)
        if self.method == "arc":
            out = np.ones(len(v), dtype=bool)
            if self.arc is not None:
                a = _arc_angle(v)
                out = (a < self.arc[0]) | (a > self.arc[1])
        elif self.method == "exact":
            out = np.ones(len(v), dtype=bool)
            if self.hull is not None:
                far = ~near_pole
                out[far] = ~self._below_boundary(v[far])
        else:
            az, el = to_spherical(v)
            out = el > self.elevation[_bin(az, self.bins)]
        out |= near_pole
        return bool(out[0]) if single else out


def _bin(az, bins):
    return np.minimum((az / (2.0 * math.pi) * bins).astype(int), bins - 1)


def _arc_angle(u):
    """Counter-clockwise angle from ``e_2`` in ``[0, 2pi)``."""
    a = np.arctan2(-u[:, 0], u[:, 1])
    return np.where(a < 0.0, a + 2.0 * math.pi, a)


def exact_visibility(cloud: PointCloud, index: int, p_hat) -> bool:
    q = cloud.points[index]
    others = np.delete(cloud.points, index, axis=0)
    return VisibilityIndex(q, cloud.provenance[index], others, "exact").visible(p_hat)


def discretized_visibility(cloud: PointCloud, index: int, p_hat, bins: int = 128) -> bool:
    q = cloud.points[index]
    others = np.delete(cloud.points, index, axis=0)
    return VisibilityIndex(q, cloud.provenance[index], others, "discretized", bins).visible(p_hat)


def build_indices(cloud: PointCloud, method: str = "exact", bins: int = 128) -> list[VisibilityIndex]:
    """One index per cloud point, every other point acting as occluder."""
    out = []
    for i in range(len(cloud)):
        mask = np.ones(len(cloud), dtype=bool)
        mask[i] = False
        out.append(VisibilityIndex(cloud.points[i], cloud.provenance[i], cloud.points[mask], method, bins))
    return out


# --------------------------------------------------------------- subsample


def subsample(cloud: PointCloud, target: int, strategy: str = "farthest-point", rng=None) -> PointCloud:
    n = len(cloud)
    if target > n:
        raise ValueError(f"cannot subsample {n} points to {target}")
    if target <= 0:
        return cloud.subset(np.zeros(0, dtype=int))
    if target == n:
        return cloud.subset(np.arange(n))
    rng = np.random.default_rng(0) if rng is None else rng
    if strategy == "uniform":
        return cloud.subset(np.sort(rng.choice(n, size=target, replace=False)))
    if strategy != "farthest-point":
        raise ValueError(f"unknown subsampling strategy {strategy!r}")
    pts = cloud.points
    chosen = [int(rng.integers(n))]
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for _ in range(target - 1):
        i = int(np.argmax(dist))
        chosen.append(i)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[i], axis=1))
    return cloud.subset(np.array(chosen))


# --------------------------------------------------------------- synthesis


def _check_outside(cloud: PointCloud, p_hat):
    if len(cloud) == 0:
        return
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    if np.all((p_hat >= lo) & (p_hat <= hi)):
        raise ValueError("viewpoint lies inside the cloud's bounding box")


def synth_finite(cloud: PointCloud, sensor: SensorModel, method: str = "exact", bins: int = 128,
                 indices: list[VisibilityIndex] | None = None, instance_id: str = "") -> ScanSet:
    """Finite rays from ``sensor.pose.position`` to every visible cloud point in view."""
    p_hat = sensor.pose.position
    _check_outside(cloud, p_hat)
    n = cloud.dim
    if len(cloud) == 0:
        return ScanSet(np.zeros((0, n)), np.zeros((0, n)), np.zeros(0), instance_id, sensor.d_min, sensor.d_max)
    if indices is None:
        indices = build_indices(cloud, method, bins)
    diff = cloud.points - p_hat
    d = np.linalg.norm(diff, axis=1)
    _, in_view = sensor.project(cloud.points)
    keep = in_view & (d > sensor.d_min) & (d < sensor.d_max)
    for i in np.flatnonzero(keep):
        keep[i] = indices[i].visible(p_hat)
    eta = diff[keep] / d[keep, None]
    return ScanSet(np.broadcast_to(p_hat, eta.shape).copy(), eta, d[keep], instance_id,
                   sensor.d_min, sensor.d_max)


def covered_pixels(points, sensor: SensorModel, radius: float = 1.0) -> np.ndarray:
    """Boolean ``(height, width)`` mask of pixels within ``radius`` px of a projected point."""
    H, W = sensor.shape
    mask = np.zeros((H, W), dtype=bool)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) == 0:
        return mask
    dist = np.linalg.norm(pts - sensor.pose.position, axis=1)
    pix, _ = sensor.project(pts)
    local = (pts - sensor.pose.position) @ sensor.pose.rotation
    if sensor.kind == "pinhole":
        ahead = local[:, 2] > 1e-12
    else:
        ahead = np.ones(len(pts), dtype=bool)
        if sensor.span < 2.0 * math.pi - 1e-12:
            half = sensor.span / 2.0 + (radius + 1.0) * sensor.span / max(sensor.rays - 1, 1)
            ahead = np.abs(np.arctan2(local[:, 1], local[:, 0])) <= half
    ok = ahead & (dist < sensor.d_max) & np.all(np.isfinite(pix), axis=1)
    pix = pix[ok]
    reach = int(math.ceil(radius)) + 1
    base = np.floor(pix).astype(np.int64)
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            r = base[:, 1] + dr
            c = base[:, 0] + dc
            if sensor.kind == "fan":
                if dr:
                    continue
                r = np.zeros_like(c)
                if sensor.span >= 2.0 * math.pi - 1e-12:
                    c = np.mod(c, W)
                dist_px = np.abs(c + 0.5 - pix[:, 0])
                dist_px = np.minimum(dist_px, W - dist_px) if sensor.span >= 2.0 * math.pi - 1e-12 else dist_px
            else:
                dist_px = np.hypot(c + 0.5 - pix[:, 0], r + 0.5 - pix[:, 1])
            hit = (dist_px <= radius) & (r >= 0) & (r < H) & (c >= 0) & (c < W)
            mask[r[hit], c[hit]] = True
    return mask


def synth_infinite(cloud: PointCloud, sensor: SensorModel, inflation: float = 1.0,
                   instance_id: str = "") -> ScanSet:
    """Miss rays for every pixel that no inflated cloud point projects onto."""
    if inflation < 0:
        raise ValueError("inflation radius must be nonnegative")
    free = ~covered_pixels(cloud.points, sensor, inflation).ravel()
    o, d = sensor.rays_world()
    return ScanSet(o[free], d[free], np.full(int(free.sum()), np.inf), instance_id,
                   sensor.d_min, sensor.d_max)


def augment(scan: ScanSet, sensors: list[SensorModel], method: str = "exact", bins: int = 128,
            max_points: int = 1250, inflation: float = 1.0, rng=None) -> ScanSet:
    """Synthesize finite and infinite rays for each sensor and merge them with ``scan``."""
    if not np.any(scan.finite_mask):
        raise ValueError("scan has no finite rays to build a cloud from")
    rng = np.random.default_rng(0) if rng is None else rng
    cloud = PointCloud.from_scan(scan)
    queries = subsample(cloud, min(max_points, len(cloud)), "farthest-point", rng)
    indices = build_indices(queries, method, bins) if sensors else []
    parts = [scan]
    for sensor in sensors:
        parts.append(synth_finite(queries, sensor, method, bins, indices, scan.instance_id))
        parts.append(synth_infinite(cloud, sensor, inflation, scan.instance_id))
    merged = ScanSet.concatenate(parts, scan.instance_id)
    merged.d_min, merged.d_max = scan.d_min, scan.d_max
    return merged
