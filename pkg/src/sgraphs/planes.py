"""Wall extraction: sequential RANSAC, map-frame conversion and landmark association."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Plane,
    PlaneClass,
    PlaneMinimal,
    Pose3,
    classify_plane,
    minimal_to_plane,
    plane_to_minimal,
    transform_plane_to_map,
    wrap_angle,
)

#: Fallback association covariance over (phi, theta, d).
DEFAULT_ASSOC_COV = np.diag([0.01, 0.01, 0.0225])


@dataclass
class RansacParams:
    inlier_threshold: float = 0.05
    min_inliers: int = 100
    max_planes: int = 8
    iterations: int = 300
    seed: int = 0
    min_cov_eigenvalue: float = 1e-6


@dataclass
class KeyframeCloud:
    keyframe_id: int
    points: np.ndarray  # (N, 3), body frame

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud contains non-finite coordinates")


@dataclass
class PlaneObservation:
    keyframe_id: int
    plane_body: Plane
    inliers: np.ndarray
    covariance: np.ndarray
    points: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 3)))


@dataclass
class PlaneLandmark:
    landmark_id: int
    plane_map: PlaneMinimal
    plane_class: PlaneClass
    points_map: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 3)))
    observing_keyframes: set = field(default_factory=set)

    @property
    def plane(self) -> Plane:
        return minimal_to_plane(self.plane_map)


def _fit_plane_lsq(pts: np.ndarray) -> Plane:
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    n = vt[-1]
    return Plane(n, -float(n @ c))


def plane_covariance(plane: Plane, pts: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """First-order covariance of (phi, theta, d) from point-to-plane residual scatter."""
    m = plane_to_minimal(plane)
    phi, theta = m.azimuth, m.elevation
    dn_dphi = np.array([-np.cos(theta) * np.sin(phi), np.cos(theta) * np.cos(phi), 0.0])
    dn_dtheta = np.array([-np.sin(theta) * np.cos(phi), -np.sin(theta) * np.sin(phi), np.cos(theta)])
    J = np.column_stack([pts @ dn_dphi, pts @ dn_dtheta, np.ones(len(pts))])
    r = plane.signed_distance(pts)
    dof = max(len(pts) - 3, 1)
    sigma2 = float(r @ r) / dof
    JtJ = J.T @ J
    cov = sigma2 * np.linalg.pinv(JtJ)
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    return (V * w) @ V.T


def _refine(pts: np.ndarray, idx: np.ndarray, plane: Plane, rounds: int = 3) -> tuple[Plane, np.ndarray]:
    """Least-squares refit with a MAD-based trim so off-plane points near corners drop out."""
    keep = idx
    for _ in range(rounds):
        plane = _fit_plane_lsq(pts[keep])
        r = np.abs(plane.signed_distance(pts[idx]))
        mad = 1.4826 * np.median(r)
        band = max(3.0 * mad, 1e-7)
        new_keep = idx[r <= band]
        if len(new_keep) < 3 or np.array_equal(new_keep, keep):
            break
        keep = new_keep
    return _fit_plane_lsq(pts[keep]), keep


def extract_planes(cloud: KeyframeCloud, params: RansacParams | None = None) -> list[PlaneObservation]:
    """Sequential RANSAC. Returned planes face the sensor (body origin on the positive side)."""
    params = params or RansacParams()
    pts_all = cloud.points
    if len(pts_all) == 0:
        return []
    rng = np.random.default_rng(params.seed)
    remaining = np.arange(len(pts_all))
    out: list[PlaneObservation] = []
    while len(out) < params.max_planes and len(remaining) >= max(params.min_inliers, 3):
        pts = pts_all[remaining]
        tri = rng.integers(0, len(pts), size=(params.iterations, 3))
        p0, p1, p2 = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
        n = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(n, axis=1)
        ok = norm > 1e-9
        if not np.any(ok):
            break
        n = n[ok] / norm[ok, None]
        d = -np.einsum("ij,ij->i", n, p0[ok])
        dist = np.abs(pts @ n.T + d)
        support = (dist < params.inlier_threshold).sum(axis=0)
        best = int(np.argmax(support))
        if support[best] < params.min_inliers:
            break
        band_idx = np.flatnonzero(dist[:, best] < params.inlier_threshold)
        plane, keep = _refine(pts, band_idx, Plane(n[best], d[best]))
        # re-gather against the refined plane so the removal band is centred
        band_idx = np.flatnonzero(np.abs(plane.signed_distance(pts)) < params.inlier_threshold)
        if len(keep) < params.min_inliers:
            remaining = np.delete(remaining, band_idx)
            continue
        if plane.distance < 0.0:
            plane = plane.flipped()
        inl = pts[keep]
        cov = plane_covariance(plane, inl, params.min_cov_eigenvalue)
        out.append(PlaneObservation(cloud.keyframe_id, plane, remaining[keep], cov, inl))
        remaining = np.delete(remaining, band_idx)
    return out


def observation_to_map(obs: PlaneObservation, keyframe_pose: Pose3) -> Plane:
    """Express a body-frame observation in the map frame (orientation preserved)."""
    return transform_plane_to_map(keyframe_pose, obs.plane_body)


def normal_angle(a: Plane, b: Plane) -> float:
    return float(np.arccos(np.clip(a.normal @ b.normal, -1.0, 1.0)))


def mahalanobis_sq(a: PlaneMinimal, b: PlaneMinimal, cov: np.ndarray) -> float:
    delta = a.as_array() - b.as_array()
    delta[0] = wrap_angle(delta[0])
    delta[1] = wrap_angle(delta[1])
    return float(delta @ np.linalg.solve(cov, delta))


def association_cutoff(gate: float, cov: np.ndarray) -> float:
    """Squared-Mahalanobis cutoff equivalent to a metric gate on the distance axis."""
    return (gate / float(np.sqrt(cov[2, 2]))) ** 2


def associate_plane(
    candidate: Plane,
    landmarks: list[PlaneLandmark],
    covariance: np.ndarray | None = None,
    gate: float = 0.35,
    max_angle_deg: float = 15.0,
) -> int | None:
    """Id of the best same-tag landmark inside the gate, or ``None``."""
    cov = DEFAULT_ASSOC_COV if covariance is None else np.asarray(covariance, dtype=float)
    cutoff = association_cutoff(gate, cov)
    cls = classify_plane(candidate)
    cm = plane_to_minimal(candidate)
    max_angle = np.deg2rad(max_angle_deg)
    best_id, best_d = None, np.inf
    for lm in landmarks:
        if lm.plane_class.tag is not cls.tag:
            continue
        if normal_angle(candidate, lm.plane) > max_angle:
            continue
        d2 = mahalanobis_sq(cm, lm.plane_map, cov)
        if d2 <= cutoff and (d2 < best_d or (d2 == best_d and lm.landmark_id < best_id)):
            best_id, best_d = lm.landmark_id, d2
    return best_id
