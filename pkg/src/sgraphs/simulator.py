"""Synthetic 2.5-D indoor scenes: floorplans, trajectories, drifting odometry, wall clouds, grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .free_space import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from .geometry import Plane, Pose3

SIDES = ("x_min", "x_max", "y_min", "y_max")


class SceneError(ValueError):
    """Invalid scene description; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class Room:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    kind: str = "room"  # or "corridor"

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)])

    def contains(self, xy, margin: float = 0.0) -> bool:
        x, y = xy
        return self.x_min + margin < x < self.x_max - margin and self.y_min + margin < y < self.y_max - margin


@dataclass
class Doorway:
    room: int
    side: str
    start: float
    end: float


@dataclass
class FloorplanSpec:
    rooms: list[Room]
    doorways: list[Doorway] = field(default_factory=list)
    wall_height: float = 3.0
    floor_z: float = 0.0


@dataclass
class TrajectorySpec:
    waypoints: list
    speed: float = 1.0
    rate: float = 2.0
    sensor_height: float = 1.0


@dataclass
class NoiseSpec:
    odom_translation: float = 0.0
    odom_rotation: float = 0.0
    point: float = 0.0
    seed: int = 0


@dataclass
class SensorSpec:
    range: float = 15.0
    point_spacing: float = 0.15
    vertical_spacing: float = 0.3


@dataclass
class WallSegment:
    p0: np.ndarray
    p1: np.ndarray
    normal: np.ndarray  # inward, 2-D
    room: int
    side: str


@dataclass
class SyntheticScene:
    floorplan: FloorplanSpec
    trajectory: TrajectorySpec
    noise: NoiseSpec
    sensor: SensorSpec
    timestamps: np.ndarray
    truth: list[Pose3]
    odometry: list[Pose3]
    clouds: list[np.ndarray]
    grid: OccupancyGrid
    walls: list[WallSegment]

    @property
    def truth_rooms(self) -> list[dict]:
        return truth_rooms(self.floorplan)

    @property
    def truth_planes(self) -> list[Plane]:
        return truth_planes(self.floorplan)

    @property
    def floor_center(self) -> np.ndarray:
        lo, hi = floorplan_bounds(self.floorplan)
        return 0.5 * (lo + hi)

    @property
    def path_length(self) -> float:
        p = np.array([q.translation[:2] for q in self.truth])
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0


# --------------------------------------------------------------------------- #
# Parsing
# --------------------------------------------------------------------------- #


def _num(d: dict, key: str, path: str, default=None, positive=False, nonneg=False) -> float:
    if key not in d:
        if default is None:
            raise SceneError(f"{path}.{key}", "missing required field")
        return float(default)
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SceneError(f"{path}.{key}", f"expected a finite number, got {v!r}")
    if positive and v <= 0:
        raise SceneError(f"{path}.{key}", f"must be > 0, got {v}")
    if nonneg and v < 0:
        raise SceneError(f"{path}.{key}", f"must be >= 0, got {v}")
    return float(v)


def scene_specs_from_dict(data: dict):
    """Validate a scene description; raises SceneError with a field path."""
    if not isinstance(data, dict):
        raise SceneError("$", "scene must be a JSON object")
    fp = data.get("floorplan")
    if not isinstance(fp, dict):
        raise SceneError("floorplan", "missing or not an object")
    rooms_raw = fp.get("rooms")
    if not isinstance(rooms_raw, list) or not rooms_raw:
        raise SceneError("floorplan.rooms", "expected a non-empty list")
    rooms = []
    for i, r in enumerate(rooms_raw):
        path = f"floorplan.rooms[{i}]"
        if not isinstance(r, dict):
            raise SceneError(path, "expected an object")
        vals = {k: _num(r, k, path) for k in ("x_min", "x_max", "y_min", "y_max")}
        if vals["x_max"] <= vals["x_min"]:
            raise SceneError(f"{path}.x_max", "room has non-positive x extent")
        if vals["y_max"] <= vals["y_min"]:
            raise SceneError(f"{path}.y_max", "room has non-positive y extent")
        kind = r.get("kind", "room")
        if kind not in ("room", "corridor"):
            raise SceneError(f"{path}.kind", f"expected 'room' or 'corridor', got {kind!r}")
        rooms.append(Room(**vals, kind=kind))
    doors = []
    for i, d in enumerate(fp.get("doorways", [])):
        path = f"floorplan.doorways[{i}]"
        if not isinstance(d, dict):
            raise SceneError(path, "expected an object")
        ri = d.get("room")
        if not isinstance(ri, int) or not 0 <= ri < len(rooms):
            raise SceneError(f"{path}.room", f"expected a room index in [0, {len(rooms)})")
        side = d.get("side")
        if side not in SIDES:
            raise SceneError(f"{path}.side", f"expected one of {SIDES}")
        s, e = _num(d, "start", path), _num(d, "end", path)
        if e <= s:
            raise SceneError(f"{path}.end", "doorway interval is empty")
        room = rooms[ri]
        lo, hi = (room.y_min, room.y_max) if side.startswith("x") else (room.x_min, room.x_max)
        if s < lo - 1e-9 or e > hi + 1e-9:
            raise SceneError(f"{path}.start", "doorway does not lie on the room boundary")
        doors.append(Doorway(ri, side, s, e))
    floorplan = FloorplanSpec(
        rooms,
        doors,
        _num(fp, "wall_height", "floorplan", 3.0, positive=True),
        _num(fp, "floor_z", "floorplan", 0.0),
    )
    tr = data.get("trajectory")
    if not isinstance(tr, dict):
        raise SceneError("trajectory", "missing or not an object")
    wps = tr.get("waypoints")
    if not isinstance(wps, list) or len(wps) < 2:
        raise SceneError("trajectory.waypoints", "expected at least two [x, y] waypoints")
    for i, w in enumerate(wps):
        if not (isinstance(w, list) and len(w) == 2 and all(isinstance(v, (int, float)) for v in w)):
            raise SceneError(f"trajectory.waypoints[{i}]", "expected [x, y]")
    traj = TrajectorySpec(
        [list(map(float, w)) for w in wps],
        _num(tr, "speed", "trajectory", 1.0, positive=True),
        _num(tr, "rate", "trajectory", 2.0, positive=True),
        _num(tr, "sensor_height", "trajectory", 1.0),
    )
    nz = data.get("noise", {})
    if not isinstance(nz, dict):
        raise SceneError("noise", "expected an object")
    seed = nz.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise SceneError("noise.seed", "expected an integer")
    noise = NoiseSpec(
        _num(nz, "odom_translation", "noise", 0.0, nonneg=True),
        _num(nz, "odom_rotation", "noise", 0.0, nonneg=True),
        _num(nz, "point", "noise", 0.0, nonneg=True),
        seed,
    )
    se = data.get("sensor", {})
    if not isinstance(se, dict):
        raise SceneError("sensor", "expected an object")
    sensor = SensorSpec(
        _num(se, "range", "sensor", 15.0, positive=True),
        _num(se, "point_spacing", "sensor", 0.15, positive=True),
        _num(se, "vertical_spacing", "sensor", 0.3, positive=True),
    )
    return floorplan, traj, noise, sensor


def scene_specs_to_dict(fp: FloorplanSpec, traj: TrajectorySpec, noise: NoiseSpec, sensor: SensorSpec) -> dict:
    return {
        "floorplan": {
            "rooms": [
                {"x_min": r.x_min, "x_max": r.x_max, "y_min": r.y_min, "y_max": r.y_max, "kind": r.kind} for r in fp.rooms
            ],
            "doorways": [{"room": d.room, "side": d.side, "start": d.start, "end": d.end} for d in fp.doorways],
            "wall_height": fp.wall_height,
            "floor_z": fp.floor_z,
        },
        "trajectory": {
            "waypoints": [list(w) for w in traj.waypoints],
            "speed": traj.speed,
            "rate": traj.rate,
            "sensor_height": traj.sensor_height,
        },
        "noise": {
            "odom_translation": noise.odom_translation,
            "odom_rotation": noise.odom_rotation,
            "point": noise.point,
            "seed": noise.seed,
        },
        "sensor": {"range": sensor.range, "point_spacing": sensor.point_spacing, "vertical_spacing": sensor.vertical_spacing},
    }


# --------------------------------------------------------------------------- #
# Geometry of the floorplan
# --------------------------------------------------------------------------- #


def _side_line(room: Room, side: str):
    """(fixed axis, coordinate, lo, hi, inward 2-D normal)."""
    if side == "x_min":
        return 0, room.x_min, room.y_min, room.y_max, np.array([1.0, 0.0])
    if side == "x_max":
        return 0, room.x_max, room.y_min, room.y_max, np.array([-1.0, 0.0])
    if side == "y_min":
        return 1, room.y_min, room.x_min, room.x_max, np.array([0.0, 1.0])
    return 1, room.y_max, room.x_min, room.x_max, np.array([0.0, -1.0])


def wall_segments(fp: FloorplanSpec) -> list[WallSegment]:
    """Room sides minus doorway gaps; a doorway opens every collinear side it overlaps."""
    gaps = []
    for d in fp.doorways:
        axis, coord, _, _, _ = _side_line(fp.rooms[d.room], d.side)
        gaps.append((axis, coord, d.start, d.end))
    segs = []
    for ri, room in enumerate(fp.rooms):
        for side in SIDES:
            axis, coord, lo, hi, n = _side_line(room, side)
            pieces = [(lo, hi)]
            for g_axis, g_coord, s, e in gaps:
                if g_axis != axis or abs(g_coord - coord) > 1e-9:
                    continue
                nxt = []
                for a, b in pieces:
                    if e <= a or s >= b:
                        nxt.append((a, b))
                        continue
                    if s > a:
                        nxt.append((a, s))
                    if e < b:
                        nxt.append((e, b))
                pieces = nxt
            for a, b in pieces:
                if b - a < 1e-9:
                    continue
                if axis == 0:
                    p0, p1 = np.array([coord, a]), np.array([coord, b])
                else:
                    p0, p1 = np.array([a, coord]), np.array([b, coord])
                segs.append(WallSegment(p0, p1, n.copy(), ri, side))
    return segs


def truth_planes(fp: FloorplanSpec) -> list[Plane]:
    """One inward-facing plane per rectangle side (shared walls appear once per face)."""
    out = []
    for room in fp.rooms:
        for side in SIDES:
            axis, coord, _, _, n = _side_line(room, side)
            n3 = np.array([n[0], n[1], 0.0])
            p = np.zeros(3)
            p[axis] = coord
            out.append(Plane(n3, -float(n3 @ p)))
    return out


def truth_rooms(fp: FloorplanSpec) -> list[dict]:
    out = []
    for i, r in enumerate(fp.rooms):
        out.append(
            {
                "index": i,
                "kind": r.kind,
                "center": r.center.tolist(),
                "bounds": [r.x_min, r.x_max, r.y_min, r.y_max],
            }
        )
    return out


def floorplan_bounds(fp: FloorplanSpec):
    lo = np.array([min(r.x_min for r in fp.rooms), min(r.y_min for r in fp.rooms)])
    hi = np.array([max(r.x_max for r in fp.rooms), max(r.y_max for r in fp.rooms)])
    return lo, hi


def segments_blocked(origins: np.ndarray, targets: np.ndarray, walls: list[WallSegment], t_max: float = 1.0 - 1e-6):
    """Per (origin, target) row: does the open segment cross any wall?"""
    origins = np.atleast_2d(origins)
    targets = np.atleast_2d(targets)
    if not walls:
        return np.zeros(len(targets), dtype=bool)
    a = np.array([w.p0 for w in walls])
    b = np.array([w.p1 for w in walls])
    r = origins[:, None, :]
    d = (targets - origins)[:, None, :]
    e = (b - a)[None, :, :]
    ar = a[None, :, :] - r
    den = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ar[..., 0] * e[..., 1] - ar[..., 1] * e[..., 0]) / den
        u = (ar[..., 0] * d[..., 1] - ar[..., 1] * d[..., 0]) / den
    hit = (np.abs(den) > 1e-12) & (t > 1e-9) & (t < t_max) & (u >= -1e-12) & (u <= 1 + 1e-12)
    return hit.any(axis=1)


def sensor_range_filter(points: np.ndarray, pose: Pose3, range_: float, walls: list[WallSegment]) -> np.ndarray:
    """Keep map-frame points within range of the pose and with 2-D line of sight."""
    if range_ <= 0:
        raise ValueError("range must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    c = pose.translation
    near = np.linalg.norm(pts - c, axis=1) <= range_
    pts = pts[near]
    if len(pts) == 0:
        return pts
    blocked = segments_blocked(np.broadcast_to(c[:2], (len(pts), 2)), pts[:, :2], walls)
    return pts[~blocked]


def rasterize_grid(fp: FloorplanSpec, resolution: float = 0.1, margin: float = 1.0) -> OccupancyGrid:
    lo, hi = floorplan_bounds(fp)
    grid = OccupancyGrid.filled(lo - margin, hi + margin, resolution, UNKNOWN)
    h, w = grid.shape
    centers = grid.index_to_world(np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), axis=-1))
    for r in fp.rooms:
        inside = (
            (centers[..., 0] > r.x_min) & (centers[..., 0] < r.x_max) & (centers[..., 1] > r.y_min) & (centers[..., 1] < r.y_max)
        )
        grid.cells[inside] = FREE
    for s in wall_segments(fp):
        length = float(np.linalg.norm(s.p1 - s.p0))
        n = max(int(math.ceil(length / (0.25 * resolution))), 1) + 1
        pts = s.p0[None] + np.linspace(0.0, 1.0, n)[:, None] * (s.p1 - s.p0)[None]
        rc = grid.world_to_index(pts)
        ok = grid.in_bounds(rc)
        grid.cells[rc[ok, 0], rc[ok, 1]] = OCCUPIED
    return grid


# --------------------------------------------------------------------------- #
# Trajectory and sensing
# --------------------------------------------------------------------------- #


def _check_trajectory(fp: FloorplanSpec, traj: TrajectorySpec, walls: list[WallSegment]) -> None:
    wps = np.asarray(traj.waypoints, dtype=float)
    for i, w in enumerate(wps):
        if not any(r.contains(w) for r in fp.rooms):
            raise SceneError(f"trajectory.waypoints[{i}]", f"waypoint {w.tolist()} is outside free space")
        if any(np.hypot(*(w - _closest_on_segment(w, s))) < 1e-6 for s in walls):
            raise SceneError(f"trajectory.waypoints[{i}]", "waypoint lies on a wall")
    blocked = segments_blocked(wps[:-1], wps[1:], walls, t_max=1.0 + 1e-9)
    for i in np.flatnonzero(blocked):
        raise SceneError(f"trajectory.waypoints[{i + 1}]", f"path from waypoint {i} to {i + 1} crosses a wall")


def _closest_on_segment(p, s: WallSegment):
    d = s.p1 - s.p0
    t = np.clip(float((p - s.p0) @ d / (d @ d)), 0.0, 1.0)
    return s.p0 + t * d


def sample_trajectory(traj: TrajectorySpec, floor_z: float = 0.0):
    """Timestamps and ground-truth poses along the waypoint polyline, heading tangent to it."""
    wps = np.asarray(traj.waypoints, dtype=float)
    seg = np.diff(wps, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 1e-9
    wps = np.vstack([wps[:1], wps[1:][keep]])
    seg, seg_len = seg[keep], seg_len[keep]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    step = traj.speed / traj.rate
    n = int(math.floor(cum[-1] / step + 1e-9)) + 1
    s = np.arange(n) * step
    poses = []
    z = floor_z + traj.sensor_height
    for sk in s:
        k = min(int(np.searchsorted(cum, sk, side="right")) - 1, len(seg) - 1)
        u = (sk - cum[k]) / seg_len[k]
        xy = wps[k] + u * seg[k]
        yaw = math.atan2(seg[k, 1], seg[k, 0])
        poses.append(Pose3.from_xy_yaw(xy[0], xy[1], yaw, z))
    return s / traj.speed, poses


def _wall_columns(walls: list[WallSegment], spacing: float):
    cols, normals = [], []
    for w in walls:
        length = float(np.linalg.norm(w.p1 - w.p0))
        n = max(int(math.floor(length / spacing)), 1)
        off = (np.arange(n) + 0.5) * (length / n)
        d = (w.p1 - w.p0) / length
        cols.append(w.p0[None] + off[:, None] * d[None])
        normals.append(np.broadcast_to(w.normal, (n, 2)))
    return np.vstack(cols), np.vstack(normals)


def generate_scene(fp: FloorplanSpec, traj: TrajectorySpec, noise: NoiseSpec, sensor: SensorSpec | None = None) -> SyntheticScene:
    sensor = sensor or SensorSpec()
    walls = wall_segments(fp)
    _check_trajectory(fp, traj, walls)
    rng = np.random.default_rng(noise.seed)
    times, truth = sample_trajectory(traj, fp.floor_z)

    # odometry: per-step planar increments perturbed, accumulated as a random walk
    if noise.odom_translation == 0.0 and noise.odom_rotation == 0.0:
        odom = list(truth)
    else:
        odom = [truth[0]]
        for k in range(1, len(truth)):
            inc = truth[k - 1].inverse().compose(truth[k])
            e = rng.normal(0.0, 1.0, 3) * np.array([noise.odom_translation, noise.odom_translation, noise.odom_rotation])
            err = Pose3.from_xy_yaw(e[0], e[1], e[2])
            odom.append(odom[-1].compose(inc.compose(err)))

    cols, col_n = _wall_columns(walls, sensor.point_spacing)
    n_rows = max(int(math.floor(fp.wall_height / sensor.vertical_spacing)), 1)
    heights = fp.floor_z + (np.arange(n_rows) + 0.5) * (fp.wall_height / n_rows)
    clouds = []
    for pose in truth:
        c = pose.translation
        facing = np.einsum("ij,ij->i", col_n, c[:2][None] - cols) > 0
        near = np.hypot(*(cols - c[:2]).T) <= sensor.range
        cand = np.flatnonzero(facing & near)
        vis = cand[~segments_blocked(np.broadcast_to(c[:2], (len(cand), 2)), cols[cand], walls)]
        xy = np.repeat(cols[vis], n_rows, axis=0)
        z = np.tile(heights, len(vis))
        pts = np.column_stack([xy, z])
        pts = pts[np.linalg.norm(pts - c, axis=1) <= sensor.range]
        if noise.point > 0:
            pts = pts + rng.normal(0.0, noise.point, pts.shape)
        clouds.append(pose.inverse().transform_points(pts))
    grid = rasterize_grid(fp)
    return SyntheticScene(fp, traj, noise, sensor, np.asarray(times), truth, odom, clouds, grid, walls)


def generate_scene_from_dict(data: dict, seed: int | None = None) -> SyntheticScene:
    fp, traj, noise, sensor = scene_specs_from_dict(data)
    if seed is not None:
        noise.seed = int(seed)
    return generate_scene(fp, traj, noise, sensor)


def wall_point_cloud(fp: FloorplanSpec, spacing: float = 0.05) -> np.ndarray:
    """Dense noiseless samples of every wall face (doorways excluded), for map metrics."""
    cols, _ = _wall_columns(wall_segments(fp), spacing)
    n_rows = max(int(math.floor(fp.wall_height / spacing)), 1)
    z = fp.floor_z + (np.arange(n_rows) + 0.5) * (fp.wall_height / n_rows)
    return np.column_stack([np.repeat(cols, n_rows, axis=0), np.tile(z, len(cols))])
