"""Rigid-body poses and plane parametrizations.

Conventions used throughout the package:

* ``Pose3`` is always *map-from-body*: ``p_map = R @ p_body + t``.
* Quaternions are stored scalar-last ``(qx, qy, qz, qw)``, matching TUM files
  and ``scipy.spatial.transform.Rotation``.
* A ``Plane`` is the set ``{p : n . p + d = 0}`` with ``|n| = 1``.
* The tangent vector of a pose is ``[rotation(3), translation(3)]`` and the
  retraction is ``x <- x o Exp(delta)`` (right perturbation, decoupled
  SO(3) x R^3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial.transform import Rotation

_EPS = 1e-12


# --------------------------------------------------------------------------- #
# SO(3) helpers (batched where the solver needs them)
# --------------------------------------------------------------------------- #


def hat(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix (or stack of them) from rotation vector(s)."""
    return Rotation.from_rotvec(w).as_matrix()


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector(s) from rotation matrix (or stack of them)."""
    return Rotation.from_matrix(R).as_rotvec()


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


# --------------------------------------------------------------------------- #
# Pose3
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform, map-from-body."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < _EPS:
            raise ValueError("quaternion must be finite and nonzero")
        q = q / n
        # canonical hemisphere keeps serialization stable
        if q[3] < 0.0:
            q = -q
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3).copy())

    @classmethod
    def identity(cls) -> "Pose3":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t=(0.0, 0.0, 0.0)) -> "Pose3":
        return cls(Rotation.from_matrix(R).as_quat(), np.asarray(t, dtype=float))

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose3":
        return cls.from_matrix(R, t)

    @classmethod
    def from_xy_yaw(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "Pose3":
        return cls(Rotation.from_euler("z", yaw).as_quat(), np.array([x, y, z]))

    @classmethod
    def from_homogeneous(cls, T: np.ndarray) -> "Pose3":
        return cls.from_matrix(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Pose3":
        """Decoupled exponential: ``xi = [rotvec, translation]``."""
        xi = np.asarray(xi, dtype=float)
        return cls(Rotation.from_rotvec(xi[:3]).as_quat(), xi[3:6])

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def log(self) -> np.ndarray:
        return np.concatenate([Rotation.from_quat(self.quat).as_rotvec(), self.translation])

    def homogeneous(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose3":
        R = self.rotation
        return Pose3.from_matrix(R.T, -R.T @ self.translation)

    def compose(self, other: "Pose3") -> "Pose3":
        R = self.rotation
        return Pose3.from_matrix(R @ other.rotation, R @ other.translation + self.translation)

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return self.compose(other)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.translation

    def retract(self, delta: np.ndarray) -> "Pose3":
        return self.compose(Pose3.exp(delta))

    @property
    def yaw(self) -> float:
        R = self.rotation
        return math.atan2(R[1, 0], R[0, 0])

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(Rotation.from_quat(self.quat).as_rotvec()))

    def is_close(self, other: "Pose3", tol: float = 1e-9) -> bool:
        d = self.inverse().compose(other)
        return d.rotation_angle() <= tol and np.linalg.norm(d.translation) <= tol

    def __repr__(self):
        return f"Pose3(quat={np.round(self.quat, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: Pose3, b: Pose3) -> Pose3:
    return a.compose(b)


def inverse(p: Pose3) -> Pose3:
    return p.inverse()


# --------------------------------------------------------------------------- #
# Planes
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane ``n . p + d = 0`` with unit normal."""

    normal: np.ndarray
    distance: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm < _EPS:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "distance", float(self.distance) / norm)

    def as_array(self) -> np.ndarray:
        return np.append(self.normal, self.distance)

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.normal + self.distance

    def closest_point(self) -> np.ndarray:
        """Point of the plane nearest the origin; invariant to the sign of (n, d)."""
        return -self.distance * self.normal

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.distance)

    def same_surface(self, other: "Plane", tol: float = 1e-9) -> bool:
        a, b = self.as_array(), other.as_array()
        return bool(np.allclose(a, b, atol=tol) or np.allclose(a, -b, atol=tol))

    def __repr__(self):
        return f"Plane(n={np.round(self.normal, 6).tolist()}, d={self.distance:.6f})"


@dataclass(frozen=True)
class PlaneMinimal:
    """Azimuth/elevation/distance parametrization of a plane."""

    azimuth: float
    elevation: float
    distance: float

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.distance])

    @classmethod
    def from_array(cls, a) -> "PlaneMinimal":
        return cls(float(a[0]), float(a[1]), float(a[2]))


def plane_to_minimal(plane: Plane) -> PlaneMinimal:
    n = plane.normal
    nz = float(np.clip(n[2], -1.0, 1.0))
    if abs(abs(nz) - 1.0) < 1e-15 or (abs(n[0]) < _EPS and abs(n[1]) < _EPS):
        phi = 0.0  # gimbal: azimuth undefined
    else:
        phi = math.atan2(n[1], n[0])
    return PlaneMinimal(wrap_angle(phi), math.asin(nz), float(plane.distance))


def minimal_to_plane(m: PlaneMinimal) -> Plane:
    return Plane(minimal_to_normal(np.array([m.azimuth, m.elevation])), m.distance)


def minimal_to_normal(phi_theta: np.ndarray) -> np.ndarray:
    """Unit normal(s) from ``[..., (phi, theta)]``."""
    a = np.asarray(phi_theta, dtype=float)
    phi, theta = a[..., 0], a[..., 1]
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


def normal_to_minimal(n: np.ndarray) -> np.ndarray:
    """``[..., (phi, theta)]`` from unit normal(s); batched twin of plane_to_minimal."""
    n = np.asarray(n, dtype=float)
    phi = np.arctan2(n[..., 1], n[..., 0])
    theta = np.arcsin(np.clip(n[..., 2], -1.0, 1.0))
    return np.stack([phi, theta], axis=-1)


def normalize_minimal(a: np.ndarray) -> np.ndarray:
    """Bring ``(phi, theta, d)`` rows back into canonical ranges."""
    a = np.array(a, dtype=float)
    n = minimal_to_normal(a[..., :2])
    out = np.empty_like(a)
    out[..., :2] = normal_to_minimal(n)
    out[..., 2] = a[..., 2]
    return out


def transform_plane_to_body(pose: Pose3, plane_map: Plane) -> Plane:
    R, t = pose.rotation, pose.translation
    n = plane_map.normal
    return Plane(R.T @ n, plane_map.distance + float(n @ t))


def transform_plane_to_map(pose: Pose3, plane_body: Plane) -> Plane:
    R, t = pose.rotation, pose.translation
    n = R @ plane_body.normal
    return Plane(n, plane_body.distance - float(n @ t))


def canonicalize_away_from_origin(plane: Plane) -> Plane:
    """Flip (n, d) jointly so that d <= 0 (normal points from origin to plane)."""
    if plane.distance > 0.0:
        return plane.flipped()
    return plane


def orient_toward(plane: Plane, point) -> Plane:
    """Flip the plane so ``point`` lies on its positive side."""
    if float(plane.signed_distance(np.asarray(point, dtype=float))) < 0.0:
        return plane.flipped()
    return plane


class PlaneTag(str, Enum):
    X = "XPlane"
    Y = "YPlane"
    HORIZONTAL = "Horizontal"


class PlaneSign(str, Enum):
    A = "A"
    B = "B"


@dataclass(frozen=True)
class PlaneClass:
    tag: PlaneTag
    sign: PlaneSign

    @property
    def is_wall(self) -> bool:
        return self.tag is not PlaneTag.HORIZONTAL

    @property
    def slot(self) -> str:
        """Short slot name such as ``'xa'`` or ``'yb'``."""
        axis = {PlaneTag.X: "x", PlaneTag.Y: "y", PlaneTag.HORIZONTAL: "z"}[self.tag]
        return axis + self.sign.value.lower()


def classify_plane(plane: Plane) -> PlaneClass:
    """Horizontal if |n_z| dominates, else X/Y by the larger of |n_x|, |n_y| (ties -> X)."""
    nx, ny, nz = plane.normal
    ax, ay, az = abs(nx), abs(ny), abs(nz)
    if az >= max(ax, ay):
        return PlaneClass(PlaneTag.HORIZONTAL, PlaneSign.A if nz > 0 else PlaneSign.B)
    if ax >= ay:
        return PlaneClass(PlaneTag.X, PlaneSign.A if nx > 0 else PlaneSign.B)
    return PlaneClass(PlaneTag.Y, PlaneSign.A if ny > 0 else PlaneSign.B)
