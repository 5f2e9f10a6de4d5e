"""Room and floor segmentation from free-space clusters and mapped walls."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .free_space import FreeSpaceCluster
from .geometry import Plane, PlaneTag, canonicalize_away_from_origin, classify_plane
from .planes import DEFAULT_ASSOC_COV, PlaneLandmark, association_cutoff, mahalanobis_sq, normal_angle

SLOTS = ("xa", "xb", "ya", "yb")


class NotARoom(ValueError):
    pass


class RoomKind(str, Enum):
    FOUR_WALL = "FourWall"
    TWO_WALL_X = "TwoWallX"
    TWO_WALL_Y = "TwoWallY"

    @property
    def is_two_wall(self) -> bool:
        return self is not RoomKind.FOUR_WALL

    @property
    def wall_axis(self) -> int | None:
        """Index of the coordinate fixed by the walls (two-wall kinds only)."""
        return {RoomKind.TWO_WALL_X: 0, RoomKind.TWO_WALL_Y: 1}.get(self)


@dataclass
class RoomCandidate:
    kind: RoomKind
    center: np.ndarray
    wall_ids: tuple[int, ...]
    cluster_center: np.ndarray | None = None
    source_cluster: int = 0


@dataclass
class MappedRoom:
    room_id: int
    kind: RoomKind
    center: np.ndarray
    wall_ids: tuple[int, ...]


@dataclass
class FloorCandidate:
    floor_id: int
    center: np.ndarray
    bounding_wall_ids: tuple[int, int, int, int]


@dataclass(frozen=True)
class DuplicatePlanePair:
    keep_id: int
    merge_id: int


class MatchStatus(str, Enum):
    MATCHED = "Matched"
    MATCHED_WITH_DUPLICATES = "MatchedWithDuplicates"
    NEW = "New"


@dataclass
class RoomMatch:
    status: MatchStatus
    room_id: int | None = None
    duplicates: list[DuplicatePlanePair] = field(default_factory=list)


# --------------------------------------------------------------------------- #
# Closed-form geometry
# --------------------------------------------------------------------------- #


def _same_axis(a: Plane, b: Plane) -> None:
    ta, tb = classify_plane(a).tag, classify_plane(b).tag
    if ta is not tb or ta is PlaneTag.HORIZONTAL:
        raise ValueError(f"planes lie on different axes ({ta.value} vs {tb.value})")


def _ordered_canonical(a: Plane, b: Plane) -> tuple[Plane, Plane]:
    a, b = canonicalize_away_from_origin(a), canonicalize_away_from_origin(b)
    if abs(a.distance) < abs(b.distance):
        a, b = b, a
    return a, b


def room_width(plane_a: Plane, plane_b: Plane) -> np.ndarray:
    """Width vector between two parallel walls; its norm is the gap."""
    _same_axis(plane_a, plane_b)
    a, b = _ordered_canonical(plane_a, plane_b)
    return abs(a.distance) * a.normal - abs(b.distance) * b.normal


def axis_midpoint(plane_a: Plane, plane_b: Plane) -> np.ndarray:
    """Half-width vector plus the nearer wall: midpoint between the two walls (3-vector)."""
    a, b = _ordered_canonical(plane_a, plane_b)
    return 0.5 * (abs(a.distance) * a.normal - abs(b.distance) * b.normal) + abs(b.distance) * b.normal


def four_wall_room_center(x_a: Plane, x_b: Plane, y_a: Plane, y_b: Plane, t_w: float | None = None) -> np.ndarray:
    if t_w is not None:
        wx = np.linalg.norm(room_width(x_a, x_b))
        wy = np.linalg.norm(room_width(y_a, y_b))
        if wx < t_w or wy < t_w:
            raise NotARoom(f"widths {wx:.3f}, {wy:.3f} below {t_w}")
    r = axis_midpoint(x_a, x_b) + axis_midpoint(y_a, y_b)
    return r[:2].copy()


def two_wall_room_center(plane_a: Plane, plane_b: Plane, cluster_center) -> np.ndarray:
    """Wall-axis coordinate from the walls, the orthogonal one from the cluster centre."""
    c = np.zeros(3)
    c[:2] = np.asarray(cluster_center, dtype=float)[:2]
    r = axis_midpoint(plane_a, plane_b)
    nr = np.linalg.norm(r)
    if nr < 1e-12:
        return c[:2].copy()
    rh = r / nr
    return (r + (c - (c @ rh) * rh))[:2].copy()


# --------------------------------------------------------------------------- #
# Room extraction
# --------------------------------------------------------------------------- #


def _interval_overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


@dataclass
class _WallView:
    lm: PlaneLandmark
    plane: Plane
    pts: np.ndarray  # (n, 2)


def _extent(pts: np.ndarray, axis: int) -> tuple[float, float]:
    return float(pts[:, axis].min()), float(pts[:, axis].max())


def _enclosed(pair_pts: list[np.ndarray], other_lo: float, other_hi: float, axis: int, ratio: float) -> bool:
    span = other_hi - other_lo
    if span <= 0:
        return False
    return all(_interval_overlap(_extent(p, axis), (other_lo, other_hi)) >= ratio * span for p in pair_pts)


def extract_rooms(
    clusters: list[FreeSpaceCluster],
    landmarks: list[PlaneLandmark],
    proximity: float = 1.0,
    t_w: float = 0.5,
    enclosure_ratio: float = 0.8,
) -> list[RoomCandidate]:
    walls = []
    for lm in landmarks:
        if not lm.plane_class.is_wall or len(lm.points_map) == 0:
            continue
        walls.append(_WallView(lm, lm.plane, np.asarray(lm.points_map)[:, :2]))
    out = []
    for cl in clusters:
        cand = _room_from_cluster(cl, walls, proximity, t_w, enclosure_ratio)
        if cand is not None:
            out.append(cand)
    return out


def _room_from_cluster(cl: FreeSpaceCluster, walls: list[_WallView], proximity, t_w, ratio) -> RoomCandidate | None:
    if len(cl.positions) == 0:
        return None
    tree = cKDTree(cl.positions)
    cc = cl.center
    cl_ext = [_extent(cl.positions, 0), _extent(cl.positions, 1)]
    best: dict[str, tuple[float, int, _WallView]] = {}
    for w in walls:
        # the wall has to face the cluster
        if float(w.plane.normal[:2] @ cc + w.plane.distance) <= 0.0:
            continue
        along = 1 if w.lm.plane_class.tag is PlaneTag.X else 0
        if _interval_overlap(_extent(w.pts, along), cl_ext[along]) <= 0.0:
            continue
        dist, _ = tree.query(w.pts, k=1, distance_upper_bound=proximity + 1e-9)
        dmin = float(np.min(dist))
        if not math.isfinite(dmin) or dmin > proximity:
            continue
        slot = w.lm.plane_class.slot
        key = (dmin, w.lm.landmark_id)
        if slot not in best or key < best[slot][:2]:
            best[slot] = (dmin, w.lm.landmark_id, w)

    def pair_ok(sa, sb):
        if sa not in best or sb not in best:
            return False
        return np.linalg.norm(room_width(best[sa][2].plane, best[sb][2].plane)) >= t_w

    x_ok, y_ok = pair_ok("xa", "xb"), pair_ok("ya", "yb")
    if x_ok and y_ok:
        xa, xb, ya, yb = (best[s][2] for s in SLOTS)
        x_lo, x_hi = sorted([xa.plane.closest_point()[0], xb.plane.closest_point()[0]])
        y_lo, y_hi = sorted([ya.plane.closest_point()[1], yb.plane.closest_point()[1]])
        if _enclosed([xa.pts, xb.pts], y_lo, y_hi, 1, ratio) and _enclosed([ya.pts, yb.pts], x_lo, x_hi, 0, ratio):
            center = four_wall_room_center(xa.plane, xb.plane, ya.plane, yb.plane)
            ids = tuple(best[s][1] for s in SLOTS)
            return RoomCandidate(RoomKind.FOUR_WALL, center, ids, None, cl.cluster_id)
        return None
    if x_ok != y_ok:
        sa, sb, kind = ("xa", "xb", RoomKind.TWO_WALL_X) if x_ok else ("ya", "yb", RoomKind.TWO_WALL_Y)
        a, b = best[sa][2], best[sb][2]
        center = two_wall_room_center(a.plane, b.plane, cc)
        return RoomCandidate(kind, center, (best[sa][1], best[sb][1]), cc.copy(), cl.cluster_id)
    return None


# --------------------------------------------------------------------------- #
# Room data association
# --------------------------------------------------------------------------- #


def _planes_close(a: PlaneLandmark, b: PlaneLandmark, gate: float, max_angle_deg: float) -> bool:
    if a.plane_class.tag is not b.plane_class.tag:
        return False
    if normal_angle(a.plane, b.plane) > math.radians(max_angle_deg):
        return False
    cov = DEFAULT_ASSOC_COV
    return mahalanobis_sq(a.plane_map, b.plane_map, cov) <= association_cutoff(gate, cov)


def _points_close(a: PlaneLandmark, b: PlaneLandmark, gate: float) -> bool:
    if a.plane_class.tag is not b.plane_class.tag or len(a.points_map) == 0 or len(b.points_map) == 0:
        return False
    d, _ = cKDTree(np.asarray(b.points_map)[:, :2]).query(np.asarray(a.points_map)[:, :2], k=1)
    return float(np.median(d)) <= gate


def associate_room(
    candidate: RoomCandidate,
    rooms: list[MappedRoom],
    landmarks: dict[int, PlaneLandmark],
    room_gate: float = 1.0,
    wall_gate: float = 1.0,
    max_angle_deg: float = 15.0,
) -> RoomMatch:
    """Center gate, then per-slot id check; mismatching slots must pass a plane-similarity check."""
    axis = candidate.kind.wall_axis
    shortlist = []
    for room in rooms:
        if room.kind is not candidate.kind:
            continue
        diff = np.asarray(candidate.center) - np.asarray(room.center)
        dist = abs(diff[axis]) if axis is not None else float(np.linalg.norm(diff))
        if dist <= room_gate:
            shortlist.append((dist, room.room_id, room))
    shortlist.sort(key=lambda x: (x[0], x[1]))
    for _, _, room in shortlist:
        pairs = []
        ok = True
        for cid, mid in zip(candidate.wall_ids, room.wall_ids):
            if cid == mid:
                continue
            lc, lmapped = landmarks.get(cid), landmarks.get(mid)
            if lc is None or lmapped is None:
                ok = False
                break
            if axis is None:
                close = _planes_close(lc, lmapped, wall_gate, max_angle_deg)
            else:
                close = _points_close(lc, lmapped, wall_gate) and normal_angle(lc.plane, lmapped.plane) <= math.radians(
                    max_angle_deg
                )
            if not close:
                ok = False
                break
            pairs.append(DuplicatePlanePair(keep_id=mid, merge_id=cid))
        if ok:
            status = MatchStatus.MATCHED_WITH_DUPLICATES if pairs else MatchStatus.MATCHED
            return RoomMatch(status, room.room_id, pairs)
    return RoomMatch(MatchStatus.NEW)


# --------------------------------------------------------------------------- #
# Floors
# --------------------------------------------------------------------------- #


def parallel_gate(n_a: np.ndarray, n_b: np.ndarray, t_n: float, mode: str = "antiparallel") -> bool:
    """Dot-product check between sensor-facing normals of an opposing wall pair."""
    dot = float(np.dot(n_a, n_b))
    if mode == "antiparallel":
        return dot <= -t_n
    if mode == "literal":
        return abs(dot) < t_n
    raise ValueError(f"unknown dot-product gate mode {mode!r}")


def _widest_pair(a_walls: list[PlaneLandmark], b_walls: list[PlaneLandmark], t_n: float, mode: str):
    best = None
    for a in a_walls:
        for b in b_walls:
            pa, pb = a.plane, b.plane
            if not parallel_gate(pa.normal, pb.normal, t_n, mode):
                continue
            w = float(np.linalg.norm(room_width(pa, pb)))
            key = (-w, a.landmark_id, b.landmark_id)
            if best is None or key < best[0]:
                best = (key, a, b)
    return None if best is None else (best[1], best[2])


def segment_floor(
    landmarks: list[PlaneLandmark], t_n: float = 0.9, mode: str = "antiparallel", floor_id: int = 0
) -> FloorCandidate | None:
    """Center between the widest opposing x-pair and y-pair of walls on this level."""
    groups: dict[str, list[PlaneLandmark]] = {s: [] for s in SLOTS}
    for lm in landmarks:
        if lm.plane_class.is_wall:
            groups[lm.plane_class.slot].append(lm)
    px = _widest_pair(groups["xa"], groups["xb"], t_n, mode)
    py = _widest_pair(groups["ya"], groups["yb"], t_n, mode)
    if px is None or py is None:
        return None
    center = four_wall_room_center(px[0].plane, px[1].plane, py[0].plane, py[1].plane)
    ids = (px[0].landmark_id, px[1].landmark_id, py[0].landmark_id, py[1].landmark_id)
    return FloorCandidate(floor_id, center, ids)


def floor_update_needed(old_center, new_center, t_f: float = 0.5) -> bool:
    return float(np.linalg.norm(np.asarray(new_center, float) - np.asarray(old_center, float))) > t_f


def floor_level(z: float, band: float = 3.0) -> int:
    return int(math.floor(z / band))
