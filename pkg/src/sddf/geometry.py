"""Rotations onto the last coordinate axis, ray-input reduction and sphere maps.

Every function accepts either a single vector of shape ``(n,)`` or a batch of
shape ``(N, n)`` and returns a correspondingly shaped result.  Only ``n = 2``
and ``n = 3`` are supported.
"""

from __future__ import annotations

import numpy as np

# below this third component the 1/(1 + c) terms have no precision left
ANTIPODAL_THRESHOLD = -1.0 + 1e-9
_MIN_NORM = 1e-6
_STEREO_EPS = 1e-12


class UnsupportedDimensionError(ValueError):
    pass


class DegenerateProjectionError(ValueError):
    pass


def _check_dim(a: np.ndarray) -> int:
    n = a.shape[-1]
    if n not in (2, 3):
        raise UnsupportedDimensionError(f"expected dimension 2 or 3, got {n}")
    return n


def unit_vector(v) -> np.ndarray:
    """Normalize ``v`` (last axis).  Vectors shorter than 1e-6 are rejected."""
    v = np.asarray(v, dtype=np.float64)
    _check_dim(v)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(~np.isfinite(norm)) or np.any(norm < _MIN_NORM):
        raise ValueError("cannot normalize a zero-length or non-finite direction")
    return v / norm


def rotation_to_axis(eta) -> np.ndarray:
    """Rotation ``R`` with ``R @ eta = e_n``.

    In 2D this is ``[[b, -a], [a, b]]`` for ``eta = (a, b)``.  In 3D it is the
    geodesic rotation onto ``e_3``; directions with third component below
    ``-1 + 1e-9`` use the reflection-free branch ``diag(1, 1, -1)``.
    """
    eta = np.asarray(eta, dtype=np.float64)
    n = _check_dim(eta)
    single = eta.ndim == 1
    e = np.atleast_2d(eta)
    if n == 2:
        a, b = e[:, 0], e[:, 1]
        R = np.empty((e.shape[0], 2, 2))
        R[:, 0, 0] = b
        R[:, 0, 1] = -a
        R[:, 1, 0] = a
        R[:, 1, 1] = b
    else:
        R = _rotation3(e)
    return R[0] if single else R


def _inv_one_plus_c(a, b, c):
    # 1/(1+c) == (1-c)/(a^2+b^2) on the unit sphere; the second form keeps
    # full precision when c approaches -1
    ab2 = a * a + b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(c >= 0.0, 1.0 / (1.0 + c), (1.0 - c) / ab2)
    return k


def _rotation3(e: np.ndarray) -> np.ndarray:
    a, b, c = e[:, 0], e[:, 1], e[:, 2]
    k = _inv_one_plus_c(a, b, c)
    # the antipodal rows get nan here and are overwritten below
    k = np.where(np.isfinite(k), k, 0.0)
    R = np.empty((e.shape[0], 3, 3))
    R[:, 0, 0] = 1.0 - a * a * k
    R[:, 0, 1] = -a * b * k
    R[:, 0, 2] = -a
    R[:, 1, 0] = -a * b * k
    R[:, 1, 1] = 1.0 - b * b * k
    R[:, 1, 2] = -b
    R[:, 2, 0] = a
    R[:, 2, 1] = b
    R[:, 2, 2] = c
    anti = c < ANTIPODAL_THRESHOLD
    if np.any(anti):
        R[anti] = np.diag([1.0, 1.0, -1.0])
    return R


def rotation_to_axis_stable(theta, phi) -> np.ndarray:
    """Trigonometric form of the 3D rotation for ``eta`` given in polar angles.

    ``eta = (sin(theta) cos(phi), sin(theta) sin(phi), cos(theta))`` with
    ``theta`` the polar angle from ``e_3`` and ``phi`` the azimuth.  Uses
    ``sin(theta)^2 / (1 + cos(theta)) = 1 - cos(theta)`` so nothing blows up
    near the antipode.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    single = theta.ndim == 0 and phi.ndim == 0
    theta, phi = np.broadcast_arrays(np.atleast_1d(theta), np.atleast_1d(phi))
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    omc = 1.0 - ct
    R = np.empty(theta.shape + (3, 3))
    R[..., 0, 0] = 1.0 - omc * cp * cp
    R[..., 0, 1] = -omc * sp * cp
    R[..., 0, 2] = -st * cp
    R[..., 1, 0] = -omc * sp * cp
    R[..., 1, 1] = 1.0 - omc * sp * sp
    R[..., 1, 2] = -st * sp
    R[..., 2, 0] = st * cp
    R[..., 2, 1] = st * sp
    R[..., 2, 2] = ct
    return R[0] if single else R


def reduce_input(p, eta) -> np.ndarray:
    """First ``n - 1`` coordinates of ``R_eta @ p``.

    Moving ``p`` along ``eta`` changes only the dropped coordinate, so the
    result is invariant to translation along the ray.
    """
    p = np.asarray(p, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    R = rotation_to_axis(eta)
    return np.einsum("...ij,...j->...i", R[..., :-1, :], p)


def stereographic_project(u) -> np.ndarray:
    """Map unit vectors to the plane ``z = 0`` from the pole ``e_3``."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 3:
        raise UnsupportedDimensionError("stereographic projection needs 3D points")
    if np.any(u[..., 2] >= 1.0 - _STEREO_EPS):
        raise DegenerateProjectionError("point coincides with the projection pole e3")
    denom = 1.0 - u[..., 2]
    return np.stack([u[..., 0] / denom, u[..., 1] / denom], axis=-1)


def stereographic_unproject(m) -> np.ndarray:
    """Inverse of :func:`stereographic_project`."""
    m = np.asarray(m, dtype=np.float64)
    r2 = np.sum(m * m, axis=-1)
    s = 1.0 / (r2 + 1.0)
    return np.stack([2.0 * m[..., 0] * s, 2.0 * m[..., 1] * s, (r2 - 1.0) * s], axis=-1)


def to_spherical(u) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(azimuth, elevation)``; azimuth in [0, 2pi), 0 at the poles.

    For 2D vectors the elevation is identically zero.
    """
    u = np.asarray(u, dtype=np.float64)
    _check_dim(u)
    x, y = u[..., 0], u[..., 1]
    rho = np.hypot(x, y)
    az = np.where(rho > 0.0, np.arctan2(y, x), 0.0)
    az = np.where(az < 0.0, az + 2.0 * np.pi, az)
    # arctan2 can return exactly 2pi after the shift for tiny negative angles
    az = np.where(az >= 2.0 * np.pi, 0.0, az)
    if u.shape[-1] == 2:
        el = np.zeros_like(az)
    else:
        el = np.arctan2(u[..., 2], rho)
    return az, el


def from_spherical(azimuth, elevation=0.0, dim: int = 3) -> np.ndarray:
    azimuth = np.asarray(azimuth, dtype=np.float64)
    if dim == 2:
        return np.stack([np.cos(azimuth), np.sin(azimuth)], axis=-1)
    elevation = np.asarray(elevation, dtype=np.float64)
    ce = np.cos(elevation)
    return np.stack(
        np.broadcast_arrays(ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)),
        axis=-1,
    )


def polar_angles(u) -> tuple[np.ndarray, np.ndarray]:
    """``(theta, phi)`` with theta the polar angle from e3, phi the azimuth."""
    az, el = to_spherical(u)
    return np.pi / 2.0 - el, az
