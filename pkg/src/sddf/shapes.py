"""Analytic shapes with exact ray casting, simulated range sensors and scans.

``cast_ray`` follows the signed directional distance definition literally:
it returns the smallest real ``d`` (over the whole line, forwards and
backwards) with ``p + d * eta`` on the boundary, or ``inf`` if the line
misses.  Physical sensors instead report the first crossing in front of them,
see :func:`first_hit`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import unit_vector
from .scans import ScanSet

_CHUNK = 4096


def _as_batch(p, eta):
    p = np.asarray(p, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    single = p.ndim == 1 and eta.ndim == 1
    p, eta = np.atleast_2d(p), np.atleast_2d(eta)
    p, eta = np.broadcast_arrays(p, eta)
    return p, eta, single


def _finish(d, single):
    return float(d[0]) if single else d


def _pick(roots, forward: bool):
    """Smallest root (or smallest non-negative root); ``roots`` holds inf for misses."""
    if forward:
        roots = np.where(roots >= 0.0, roots, np.inf)
    return roots.min(axis=-1)


class Shape:
    dim: int

    def cast(self, p, eta, forward: bool = False) -> np.ndarray:
        raise NotImplementedError

    def analytic(self, p, eta):
        return None

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Ball(Shape):
    """Circle (2D) or sphere (3D)."""

    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if len(self.center) not in (2, 3):
            raise ValueError("center must be 2D or 3D")

    @property
    def dim(self):
        return len(self.center)

    def cast(self, p, eta, forward=False):
        # foot-of-perpendicular form
        w = np.asarray(self.center) - p
        tc = np.einsum("ij,ij->i", w, eta)
        perp2 = np.einsum("ij,ij->i", w, w) - tc * tc
        gap = self.radius ** 2 - perp2
        with np.errstate(invalid="ignore"):
            half = np.sqrt(gap)
        hit = gap >= 0.0
        roots = np.where(hit[:, None], np.stack([tc - half, tc + half], axis=1), np.inf)
        return _pick(roots, forward)

    def analytic(self, p, eta):
        # cancellation-free quadratic roots
        o = p - np.asarray(self.center)
        b = np.einsum("ij,ij->i", o, eta)
        c = np.einsum("ij,ij->i", o, o) - self.radius ** 2
        disc = b * b - c
        hit = disc >= 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.sqrt(disc)
            q = -(b + np.copysign(s, b))
            r1 = q
            r2 = np.where(q != 0.0, c / q, -b)
        return np.where(hit, np.minimum(r1, r2), np.inf)

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius

    def to_dict(self):
        return {"type": "circle" if self.dim == 2 else "sphere",
                "center": list(map(float, self.center)), "radius": float(self.radius)}


def Circle(center=(0.0, 0.0), radius=1.0) -> Ball:
    if len(center) != 2:
        raise ValueError("circle center must be 2D")
    return Ball(tuple(map(float, center)), float(radius))


def Sphere(center=(0.0, 0.0, 0.0), radius=1.0) -> Ball:
    if len(center) != 3:
        raise ValueError("sphere center must be 3D")
    return Ball(tuple(map(float, center)), float(radius))


@dataclass(frozen=True)
class Box(Shape):
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or len(self.lo) not in (2, 3):
            raise ValueError("box corners must both be 2D or 3D")
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError("box min must be below max componentwise")

    @property
    def dim(self):
        return len(self.lo)

    def cast(self, p, eta, forward=False):
        # intersect every face rectangle separately
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        n = self.dim
        tol = 1e-12 * max(1.0, float(np.max(np.abs(np.concatenate([lo, hi])))))
        roots = []
        for axis in range(n):
            for bound in (lo[axis], hi[axis]):
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (bound - p[:, axis]) / eta[:, axis]
                x = p + t[:, None] * eta
                inside = np.isfinite(t)
                for other in range(n):
                    if other != axis:
                        inside &= (x[:, other] >= lo[other] - tol) & (x[:, other] <= hi[other] + tol)
                roots.append(np.where(inside, t, np.inf))
        return _pick(np.stack(roots, axis=1), forward)

    def analytic(self, p, eta):
        # slab method
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - p) / eta
            t2 = (hi - p) / eta
        parallel = eta == 0.0
        outside = parallel & ((p < lo) | (p > hi))
        tmin = np.where(parallel, -np.inf, np.minimum(t1, t2))
        tmax = np.where(parallel, np.inf, np.maximum(t1, t2))
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        hit = (near <= far) & ~outside.any(axis=1)
        return np.where(hit, near, np.inf)

    def bounds(self):
        return np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)

    def to_dict(self):
        return {"type": "box", "min": list(map(float, self.lo)), "max": list(map(float, self.hi))}


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass(frozen=True)
class Polygon(Shape):
    """Simple closed polygon given by its vertex loop (2D)."""

    vertices: tuple

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs at least three 2D vertices")
        edges = np.roll(v, -1, axis=0) - v
        if np.any(np.linalg.norm(edges, axis=1) <= 0.0):
            raise ValueError("polygon has a degenerate edge")
        if _self_intersects(v):
            raise ValueError("polygon is not simple")

    dim = 2

    def cast(self, p, eta, forward=False):
        v = np.asarray(self.vertices, dtype=np.float64)
        a = v[None, :, :]
        e = (np.roll(v, -1, axis=0) - v)[None, :, :]
        w = a - p[:, None, :]
        et = eta[:, None, :]
        den = _cross2(et, e)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = _cross2(w, e) / den
            s = _cross2(w, et) / den
        ok = (den != 0.0) & (s >= 0.0) & (s <= 1.0)
        return _pick(np.where(ok, t, np.inf), forward)

    def bounds(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        return v.min(axis=0), v.max(axis=0)

    def to_dict(self):
        return {"type": "polygon", "vertices": [list(map(float, x)) for x in self.vertices]}


def _self_intersects(v: np.ndarray) -> bool:
    n = len(v)
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            c, d = v[j], v[(j + 1) % n]
            d1 = _cross2(b - a, c - a)
            d2 = _cross2(b - a, d - a)
            d3 = _cross2(d - c, a - c)
            d4 = _cross2(d - c, b - c)
            if d1 * d2 < 0 and d3 * d4 < 0:
                return True
    return False


@dataclass(frozen=True)
class TriangleSoup(Shape):
    """Unordered triangles; no watertightness assumed."""

    triangles: tuple

    def __post_init__(self):
        t = np.asarray(self.triangles, dtype=np.float64)
        if t.ndim != 3 or t.shape[1:] != (3, 3) or len(t) == 0:
            raise ValueError("triangles must have shape (M, 3, 3)")

    dim = 3

    def cast(self, p, eta, forward=False):
        # Moller-Trumbore, two-sided, any sign of t
        tri = np.asarray(self.triangles, dtype=np.float64)
        v0 = tri[None, :, 0]
        e1 = (tri[:, 1] - tri[:, 0])[None]
        e2 = (tri[:, 2] - tri[:, 0])[None]
        d = eta[:, None, :]
        P = np.cross(d, e2)
        det = np.einsum("nmk,nmk->nm", e1, P)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            T = p[:, None, :] - v0
            u = np.einsum("nmk,nmk->nm", T, P) * inv
            Q = np.cross(T, e1)
            v = np.einsum("nmk,nmk->nm", d, Q) * inv
            t = np.einsum("nmk,nmk->nm", e2, Q) * inv
        ok = (np.abs(det) > 1e-300) & (u >= 0) & (v >= 0) & (u + v <= 1)
        return _pick(np.where(ok, t, np.inf), forward)

    def bounds(self):
        t = np.asarray(self.triangles, dtype=np.float64).reshape(-1, 3)
        return t.min(axis=0), t.max(axis=0)

    def to_dict(self):
        return {"type": "triangles",
                "triangles": np.asarray(self.triangles, dtype=float).tolist()}


def _batched(fn, p, eta):
    out = np.empty(len(p))
    for s in range(0, len(p), _CHUNK):
        out[s:s + _CHUNK] = fn(p[s:s + _CHUNK], eta[s:s + _CHUNK])
    return out


def cast_ray(shape: Shape, p, eta):
    """Signed directional distance: min over all boundary crossings of the line."""
    p, eta, single = _as_batch(p, eta)
    return _finish(_batched(lambda a, b: shape.cast(a, b, forward=False), p, eta), single)


def first_hit(shape: Shape, p, eta):
    """Distance to the first boundary crossing at or ahead of ``p`` (what a sensor sees)."""
    p, eta, single = _as_batch(p, eta)
    return _finish(_batched(lambda a, b: shape.cast(a, b, forward=True), p, eta), single)


def analytic_sddf(shape: Shape, p, eta):
    """Closed-form signed directional distance for balls and boxes.

    Other shapes fall back to :func:`cast_ray`.
    """
    p, eta, single = _as_batch(p, eta)
    if type(shape).analytic is Shape.analytic:
        return _finish(_batched(lambda a, b: shape.cast(a, b), p, eta), single)
    return _finish(_batched(shape.analytic, p, eta), single)


def shape_from_dict(data: dict) -> Shape:
    kind = data.get("type")
    if kind == "circle":
        return Circle(data.get("center", (0.0, 0.0)), data.get("radius", 1.0))
    if kind == "sphere":
        return Sphere(data.get("center", (0.0, 0.0, 0.0)), data.get("radius", 1.0))
    if kind == "box":
        return Box(tuple(map(float, data["min"])), tuple(map(float, data["max"])))
    if kind == "polygon":
        return Polygon(tuple(tuple(map(float, v)) for v in data["vertices"]))
    if kind == "triangles":
        if "triangles" in data:
            tri = np.asarray(data["triangles"], dtype=np.float64)
        else:
            verts = np.asarray(data["vertices"], dtype=np.float64)
            tri = verts[np.asarray(data["faces"], dtype=int)]
        return TriangleSoup(tuple(tuple(tuple(v) for v in t) for t in tri.tolist()))
    raise ValueError(f"unknown shape type {kind!r}")


def load_shape(path) -> Shape:
    with open(path, encoding="utf-8") as fh:
        return shape_from_dict(yaml.safe_load(fh))


# --------------------------------------------------------------------- sensors


@dataclass(frozen=True)
class Pose:
    """Sensor position and orientation.

    ``rotation`` maps sensor-frame directions to world directions.  Pinhole
    frames are x right, y down, z forward; fan frames are x forward.
    """

    position: np.ndarray
    rotation: np.ndarray

    @property
    def forward(self) -> np.ndarray:
        if len(self.position) == 2:
            return self.rotation[:, 0]
        return self.rotation[:, 2]


def look_at(position, target=None, up=(0.0, 0.0, 1.0)) -> Pose:
    position = np.asarray(position, dtype=np.float64)
    target = np.zeros_like(position) if target is None else np.asarray(target, dtype=np.float64)
    f = unit_vector(target - position)
    if len(position) == 2:
        R = np.array([[f[0], -f[1]], [f[1], f[0]]])
        return Pose(position, R)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(f @ up)) > 1.0 - 1e-9:
        up = np.array([0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = unit_vector(np.cross(f, up))
    down = np.cross(f, right)
    return Pose(position, np.stack([right, down, f], axis=1))


@dataclass(frozen=True)
class SensorModel:
    """Pinhole camera (3D) or planar lidar fan (2D) with a valid range window."""

    kind: str
    pose: Pose
    d_min: float = 0.05
    d_max: float = 100.0
    width: int = 64
    height: int = 64
    focal: float = 64.0
    rays: int = 1081
    span: float = 1.5 * math.pi

    def __post_init__(self):
        if self.kind not in ("pinhole", "fan"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        if not 0.0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if self.kind == "pinhole" and (self.width < 1 or self.height < 1):
            raise ValueError("image size must be positive")
        if self.kind == "fan" and self.rays < 1:
            raise ValueError("ray count must be positive")
        expected = 3 if self.kind == "pinhole" else 2
        if len(self.pose.position) != expected:
            raise ValueError(f"{self.kind} sensor needs a {expected}D pose")

    @property
    def dim(self) -> int:
        return len(self.pose.position)

    @property
    def shape(self) -> tuple[int, int]:
        """Image ``(height, width)``; a fan is a single row."""
        if self.kind == "pinhole":
            return self.height, self.width
        return 1, self.rays

    def beam_angles(self) -> np.ndarray:
        full = self.span >= 2.0 * math.pi - 1e-12
        if self.rays == 1:
            return np.zeros(1)
        if full:
            return np.arange(self.rays) * (2.0 * math.pi / self.rays)
        return np.linspace(-self.span / 2.0, self.span / 2.0, self.rays)

    def local_directions(self) -> np.ndarray:
        if self.kind == "fan":
            a = self.beam_angles()
            return np.stack([np.cos(a), np.sin(a)], axis=1)
        v, u = np.mgrid[0:self.height, 0:self.width]
        x = (u + 0.5 - self.width / 2.0) / self.focal
        y = (v + 0.5 - self.height / 2.0) / self.focal
        d = np.stack([x.ravel(), y.ravel(), np.ones(x.size)], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def rays_world(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel ``(origins, directions)`` in row-major pixel order."""
        d = self.local_directions() @ self.pose.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.pose.position, d.shape).copy()
        return o, d

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates ``(col, row)`` of world points and a validity mask.

        Points behind a pinhole or outside the fan's angular span are invalid.
        """
        local = (np.asarray(points, dtype=np.float64) - self.pose.position) @ self.pose.rotation
        if self.kind == "pinhole":
            z = local[:, 2]
            ok = z > 1e-12
            with np.errstate(divide="ignore", invalid="ignore"):
                col = self.focal * local[:, 0] / z + self.width / 2.0
                row = self.focal * local[:, 1] / z + self.height / 2.0
            ok &= (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
            return np.stack([col, row], axis=1), ok
        ang = np.arctan2(local[:, 1], local[:, 0])
        if self.rays == 1:
            col = np.zeros_like(ang)
            ok = np.abs(ang) < 1e-12
        elif self.span >= 2.0 * math.pi - 1e-12:
            step = 2.0 * math.pi / self.rays
            col = np.mod(ang, 2.0 * math.pi) / step
            col = np.where(col >= self.rays - 0.5, col - self.rays, col)
            ok = np.ones(len(ang), dtype=bool)
        else:
            step = self.span / (self.rays - 1)
            col = (ang + self.span / 2.0) / step
            ok = (col >= -0.5) & (col < self.rays - 0.5)
        # fan pixel centres sit on integers; shift so pixel i spans [i, i+1)
        col = col + 0.5
        return np.stack([col, np.full_like(col, 0.5)], axis=1), ok


def simulate_scan(shape: Shape, sensor: SensorModel, instance_id: str = "") -> ScanSet:
    """One sample per pixel/beam; hits outside ``(d_min, d_max)`` count as misses."""
    if shape.dim != sensor.dim:
        raise ValueError("shape and sensor dimensions differ")
    o, d = sensor.rays_world()
    dist = first_hit(shape, o, d)
    valid = np.isfinite(dist) & (dist > sensor.d_min) & (dist < sensor.d_max)
    dist = np.where(valid, dist, np.inf)
    return ScanSet(o, d, dist, instance_id, sensor.d_min, sensor.d_max)


def standard_view_ring(k_max: int = 8, radius: float = 2.5) -> list[Pose]:
    """Poses at azimuth ``k*pi/4`` and elevation ``(-1)^k * pi/4`` looking at the origin."""
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    poses = []
    for k in range(k_max):
        az = k * math.pi / 4.0
        el = (-1) ** k * math.pi / 4.0
        pos = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        poses.append(look_at(pos))
    return poses


def circle_ring(count: int, radius: float = 2.0, phase: float = 0.0) -> list[Pose]:
    """Planar poses evenly spaced on a circle, heading towards the origin."""
    out = []
    for k in range(count):
        a = phase + 2.0 * math.pi * k / count
        out.append(look_at(radius * np.array([math.cos(a), math.sin(a)])))
    return out


def random_sphere_poses(count: int, radius: float, rng, dim: int = 3) -> list[Pose]:
    """Uniformly random viewpoints on a sphere (circle in 2D), looking at the origin."""
    v = rng.standard_normal((count, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return [look_at(radius * x) for x in v]


def fibonacci_sphere(n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Nearly uniform points on a sphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.asarray(center) + radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def novel_view_ring(count: int, radius: float, dim: int, train_views: int = 8) -> list[Pose]:
    """Poses interleaved with the training ring, for held-out evaluation.

    In 2D they sit halfway between the ``train_views`` ring poses; in 3D at
    azimuth ``k*pi/4 + pi/8`` and elevation ``-(-1)^k * pi/6``.
    """
    if dim == 2:
        ring = circle_ring(max(count, train_views), radius, phase=math.pi / max(train_views, 1))
        step = max(1, len(ring) // max(count, 1))
        return ring[::step][:count]
    poses = []
    for k in range(count):
        az = k * math.pi / 4.0 + math.pi / 8.0
        el = -((-1) ** k) * math.pi / 6.0
        pos = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        poses.append(look_at(pos))
    return poses


def heart_polygon(n: int = 48) -> Polygon:
    """Heart outline scaled into ``[-1, 1]^2``; non-convex at the top notch."""
    t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    x = 16.0 * np.sin(t) ** 3
    y = 13.0 * np.cos(t) - 5.0 * np.cos(2 * t) - 2.0 * np.cos(3 * t) - np.cos(4 * t)
    v = np.stack([x, y], axis=1)
    v -= (v.max(axis=0) + v.min(axis=0)) / 2.0
    v /= np.abs(v).max()
    return Polygon(tuple(map(tuple, v.tolist())))
