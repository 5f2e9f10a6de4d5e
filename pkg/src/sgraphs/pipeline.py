"""Keyframe-by-keyframe replay: planes, free space, rooms, floor and back-end optimization."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from importlib import resources

import jsonschema
import numpy as np

from .evaluation import MODULES
from .free_space import (
    UNKNOWN,
    OccupancyGrid,
    apply_drift_correction,
    build_distance_field,
    build_free_space_graph,
    cluster_free_space,
)
from .geometry import Pose3, classify_plane, minimal_to_plane
from .graph import (
    FactorKind,
    NodeKind,
    SituationalGraph,
    SolverOptions,
    add_keyframe_if_due,
    plane_state,
    update_drift,
)
from .planes import KeyframeCloud, PlaneLandmark, RansacParams, associate_plane, extract_planes, observation_to_map
from .rooms import (
    MappedRoom,
    MatchStatus,
    RoomKind,
    associate_room,
    extract_rooms,
    floor_update_needed,
    segment_floor,
)

EXPORT_SCHEMA = "sgraph-export/1"


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #


@dataclass
class PipelineConfig:
    # free space / rooms / floor
    t_r: float = 10.0
    t_lambda: float = 0.8
    t_w: float = 0.5
    t_n: float = 0.9
    t_f: float = 0.5
    floor_gate_mode: str = "antiparallel"
    room_proximity: float = 1.0
    enclosure_ratio: float = 0.8
    grid_resolution: float = 0.1
    vertex_spacing: float = 0.2
    scan_range: float = 15.0
    # data association
    plane_gate: float = 0.35
    plane_max_angle_deg: float = 15.0
    room_gate: float = 1.0
    wall_gate: float = 1.0
    # plane extraction
    ransac_threshold: float = 0.05
    ransac_min_inliers: int = 100
    ransac_max_planes: int = 8
    ransac_iterations: int = 300
    max_cloud_points: int = 1500
    landmark_points_per_obs: int = 60
    seed: int = 0
    # keyframes
    keyframe_translation: float = 1.0
    keyframe_rotation_deg: float = 15.0
    # noise models (standard deviations)
    odom_sigma_translation: float = 0.02
    odom_sigma_rotation: float = 0.0035
    odom_sigma_floor: float = 1e-3
    room_sigma: float = 0.1
    floor_room_sigma: float = 0.1
    duplicate_sigma: float = 0.01
    # back-end
    optimize_every: int = 1
    max_iter: int = 50
    cost_tol: float = 1e-10
    grad_tol: float = 1e-10
    lambda_init: float = 1e-5
    huber: float | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        validate_config(data)
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def ransac(self, seed_offset: int = 0) -> RansacParams:
        return RansacParams(
            self.ransac_threshold,
            self.ransac_min_inliers,
            self.ransac_max_planes,
            self.ransac_iterations,
            self.seed + seed_offset,
        )

    def solver(self) -> SolverOptions:
        return SolverOptions(
            max_iter=self.max_iter,
            cost_tol=self.cost_tol,
            grad_tol=self.grad_tol,
            lambda_init=self.lambda_init,
            huber=self.huber,
        )


def config_schema() -> dict:
    return json.loads(resources.files("sgraphs").joinpath("config_schema.json").read_text())


def validate_config(data: dict) -> None:
    """Raises ``jsonschema.ValidationError``; unknown keys are rejected."""
    jsonschema.validate(data, config_schema())


# --------------------------------------------------------------------------- #
# Results
# --------------------------------------------------------------------------- #


@dataclass
class KeyframeRecord:
    node_id: int
    index: int  # index into the input sequence
    timestamp: float
    odom: Pose3


@dataclass
class PipelineResult:
    graph: SituationalGraph
    keyframes: list[KeyframeRecord]
    landmarks: dict[int, PlaneLandmark]
    rooms: dict[int, MappedRoom]
    floor_id: int | None
    timings: dict[str, list[float]]
    backend_sizes: list[int]
    solver_reports: list
    last_clusters: list
    config: PipelineConfig

    @property
    def keyframe_times(self) -> np.ndarray:
        return np.array([k.timestamp for k in self.keyframes])

    @property
    def keyframe_poses(self) -> list[Pose3]:
        return [self.graph.pose(k.node_id) for k in self.keyframes]

    @property
    def odometry_poses(self) -> list[Pose3]:
        return [k.odom for k in self.keyframes]

    def room_list(self) -> list[dict]:
        out = []
        for rid in sorted(self.rooms):
            r = self.rooms[rid]
            out.append({"id": rid, "kind": r.kind.value, "center": self.graph.vec(rid).tolist(), "wall_ids": list(r.wall_ids)})
        return out

    def map_points(self) -> np.ndarray:
        pts = [lm.points_map for _, lm in sorted(self.landmarks.items()) if len(lm.points_map)]
        return np.vstack(pts) if pts else np.zeros((0, 3))


# --------------------------------------------------------------------------- #
# Pipeline
# --------------------------------------------------------------------------- #


def _subsample(pts: np.ndarray, n: int) -> np.ndarray:
    if len(pts) <= n:
        return pts
    idx = np.linspace(0, len(pts) - 1, n).round().astype(int)
    return pts[idx]


class Pipeline:
    def __init__(self, config: PipelineConfig | None = None):
        self.cfg = config or PipelineConfig()
        self.graph = SituationalGraph()
        self.keyframes: list[KeyframeRecord] = []
        self.landmarks: dict[int, PlaneLandmark] = {}
        self.obs_points: dict[int, list[tuple[int, np.ndarray]]] = {}  # landmark -> (kf node, body pts)
        self.rooms: dict[int, MappedRoom] = {}
        self.cluster_centers: dict[int, np.ndarray] = {}
        self.floor_id: int | None = None
        self.duplicates: set[tuple[int, int]] = set()
        self.grid: OccupancyGrid | None = None
        self.timings: dict[str, list[float]] = {m: [] for m in MODULES}
        self.backend_sizes: list[int] = []
        self.solver_reports = []
        self.last_clusters = []
        self._since_opt = 0

    # ------------------------------------------------------------ helpers
    def _odom_information(self, steps: int) -> np.ndarray:
        c = self.cfg
        s_r = max(c.odom_sigma_rotation * math.sqrt(steps), c.odom_sigma_floor)
        s_t = max(c.odom_sigma_translation * math.sqrt(steps), c.odom_sigma_floor)
        f = c.odom_sigma_floor
        sig = np.array([f, f, s_r, s_t, s_t, f])  # tangent order [rot, trans], planar motion
        return np.diag(1.0 / sig**2)

    def _landmark_list(self) -> list[PlaneLandmark]:
        return [self.landmarks[i] for i in sorted(self.landmarks)]

    def _refresh_landmark(self, lid: int) -> None:
        lm = self.landmarks[lid]
        lm.plane_map = self.graph.plane(lid)
        chunks = [self.graph.pose(kf).transform_points(p) for kf, p in self.obs_points[lid]]
        lm.points_map = np.vstack(chunks) if chunks else np.zeros((0, 3))

    def _ensure_grid(self, center_xy: np.ndarray) -> None:
        res = self.cfg.grid_resolution
        margin = self.cfg.scan_range + 2.0
        lo, hi = center_xy - margin, center_xy + margin
        if self.grid is None:
            self.grid = OccupancyGrid.filled(np.floor(lo / res) * res, np.ceil(hi / res) * res, res, UNKNOWN)
            return
        g = self.grid
        g_lo = g.origin
        g_hi = g.origin + np.array(g.shape[::-1]) * res
        if np.all(lo >= g_lo) and np.all(hi <= g_hi):
            return
        # grow by whole cells so existing content keeps its index alignment
        new_lo = np.minimum(g_lo, np.floor(lo / res) * res - margin)
        new_hi = np.maximum(g_hi, np.ceil(hi / res) * res + margin)
        big = OccupancyGrid.filled(new_lo, new_hi, res, UNKNOWN)
        off = np.round((g_lo - new_lo) / res).astype(int)
        big.cells[off[1] : off[1] + g.shape[0], off[0] : off[0] + g.shape[1]] = g.cells
        self.grid = big

    # ------------------------------------------------------------ stages
    def _add_keyframe(self, index: int, t: float, odom: Pose3) -> int:
        g = self.graph
        est = g.drift.compose(odom)
        first = not self.keyframes
        nid = g.add_node(NodeKind.KEYFRAME, est, fixed=first)
        if not first:
            prev = self.keyframes[-1]
            meas = prev.odom.inverse().compose(odom)
            g.add_factor(FactorKind.ODOMETRY, (prev.node_id, nid), meas, self._odom_information(index - prev.index))
        self.keyframes.append(KeyframeRecord(nid, index, float(t), odom))
        return nid

    def _planes(self, kf_id: int, cloud: np.ndarray) -> None:
        c = self.cfg
        g = self.graph
        t0 = time.perf_counter()
        pts = _subsample(cloud, c.max_cloud_points)
        obs_list = extract_planes(KeyframeCloud(kf_id, pts), c.ransac(len(self.keyframes)))
        self.timings["plane_segmentation"].append(time.perf_counter() - t0)
        pose = g.pose(kf_id)
        for obs in obs_list:
            plane_map = observation_to_map(obs, pose)
            cls = classify_plane(plane_map)
            if not cls.is_wall:
                continue  # horizontal structure does not enter the room layer
            lid = associate_plane(plane_map, self._landmark_list(), gate=c.plane_gate, max_angle_deg=c.plane_max_angle_deg)
            if lid is None:
                lid = g.add_node(NodeKind.WALL, plane_state(plane_map))
                self.landmarks[lid] = PlaneLandmark(lid, g.plane(lid), cls)
                self.obs_points[lid] = []
            info = np.linalg.inv(obs.covariance)
            info = 0.5 * (info + info.T)
            g.add_factor(FactorKind.POSE_PLANE, (kf_id, lid), plane_state(obs.plane_body), info)
            lm = self.landmarks[lid]
            lm.observing_keyframes.add(kf_id)
            body = _subsample(obs.points, c.landmark_points_per_obs)
            self.obs_points[lid].append((kf_id, body))
            new_pts = pose.transform_points(body)
            lm.points_map = np.vstack([lm.points_map, new_pts]) if len(lm.points_map) else new_pts

    def _free_space(self, odom: Pose3, cloud: np.ndarray):
        c = self.cfg
        self._ensure_grid(odom.translation[:2])
        pts = odom.transform_points(cloud)[:, :2]
        self.grid.integrate_scan(odom.translation[:2], pts, c.scan_range)
        local = self.grid.crop(odom.translation[:2], c.t_r + 1.0)
        field_ = build_distance_field(local)
        fsg = build_free_space_graph(field_, odom.translation[:2], c.t_r, c.vertex_spacing)
        fsg = apply_drift_correction(fsg, self.graph.drift)
        return cluster_free_space(fsg, c.t_lambda)

    def _rooms(self, clusters) -> None:
        c = self.cfg
        g = self.graph
        cands = extract_rooms(clusters, self._landmark_list(), c.room_proximity, c.t_w, c.enclosure_ratio)
        room_info = np.eye(2) / c.room_sigma**2
        for cand in cands:
            # a four-wall detection supersedes a two-wall room built from two of its walls
            if cand.kind is RoomKind.FOUR_WALL:
                for rid in sorted(self.rooms):
                    r = self.rooms[rid]
                    if r.kind.is_two_wall and set(r.wall_ids) <= set(cand.wall_ids):
                        g.remove_node(rid)
                        del self.rooms[rid]
            elif any(r.kind is RoomKind.FOUR_WALL and set(cand.wall_ids) <= set(r.wall_ids) for r in self.rooms.values()):
                continue  # partial view of a room already mapped with all four walls
            mapped = [self.rooms[i] for i in sorted(self.rooms)]
            m = associate_room(cand, mapped, self.landmarks, c.room_gate, c.wall_gate, c.plane_max_angle_deg)
            if m.status is MatchStatus.NEW:
                kind = NodeKind.ROOM if cand.kind is RoomKind.FOUR_WALL else NodeKind.TWO_WALL_ROOM
                rid = g.add_node(kind, cand.center)
                self.rooms[rid] = MappedRoom(rid, cand.kind, np.asarray(cand.center).copy(), tuple(cand.wall_ids))
                if self.floor_id is not None:
                    delta = np.asarray(cand.center) - g.vec(self.floor_id)
                    g.add_factor(FactorKind.FLOOR_ROOM, (self.floor_id, rid), delta, np.eye(2) / c.floor_room_sigma**2)
            else:
                rid = m.room_id
                for pair in m.duplicates:
                    key = (pair.keep_id, pair.merge_id)
                    if key in self.duplicates or pair.keep_id == pair.merge_id:
                        continue
                    self.duplicates.add(key)
                    g.add_factor(FactorKind.DUPLICATE_PLANE, key, (), np.eye(3) / c.duplicate_sigma**2)
            walls = tuple(cand.wall_ids)
            if cand.kind is RoomKind.FOUR_WALL:
                g.add_factor(FactorKind.FOUR_WALL_ROOM, (rid, *walls), (), room_info)
            else:
                # re-detections keep the first cluster centre: it only fixes the free axis, and a moving
                # constant would make the stacked factors contradict each other
                c0 = self.cluster_centers.setdefault(rid, np.asarray(cand.cluster_center, float).copy())
                g.add_factor(FactorKind.TWO_WALL_ROOM, (rid, *walls), c0, room_info)

    def _floor(self) -> None:
        c = self.cfg
        g = self.graph
        if not self.rooms:
            return
        t0 = time.perf_counter()
        fc = segment_floor(self._landmark_list(), c.t_n, c.floor_gate_mode)
        self.timings["floor_segmentation"].append(time.perf_counter() - t0)
        if fc is None:
            return
        info = np.eye(2) / c.floor_room_sigma**2
        if self.floor_id is None:
            self.floor_id = g.add_node(NodeKind.FLOOR, fc.center)
        elif floor_update_needed(g.vec(self.floor_id), fc.center, c.t_f):
            g.nodes[self.floor_id].state = np.asarray(fc.center, float).copy()
            g.factors = [f for f in g.factors if f.kind is not FactorKind.FLOOR_ROOM]
        else:
            return
        # (re)measure every room relative to the floor
        have = {f.nodes[1] for f in g.factors_of(FactorKind.FLOOR_ROOM)}
        for rid in sorted(self.rooms):
            if rid not in have:
                delta = g.vec(rid) - g.vec(self.floor_id)
                g.add_factor(FactorKind.FLOOR_ROOM, (self.floor_id, rid), delta, info)

    def _optimize(self, odom: Pose3) -> None:
        g = self.graph
        t0 = time.perf_counter()
        rep = g.optimize(self.cfg.solver())
        self.timings["back_end"].append(time.perf_counter() - t0)
        self.backend_sizes.append(len(g.factors))
        self.solver_reports.append(rep)
        update_drift(g, odom, self.keyframes[-1].node_id)
        for lid in self.landmarks:
            self._refresh_landmark(lid)
        for rid, r in self.rooms.items():
            r.center = g.vec(rid)

    # ------------------------------------------------------------ driver
    def step(self, index: int, t: float, odom: Pose3, cloud: np.ndarray) -> bool:
        """Process one input sample; returns True if it became a keyframe."""
        c = self.cfg
        if self.keyframes and not add_keyframe_if_due(
            self.keyframes[-1].odom, odom, c.keyframe_translation, math.radians(c.keyframe_rotation_deg)
        ):
            return False
        kf = self._add_keyframe(index, t, odom)
        cloud = np.asarray(cloud, float).reshape(-1, 3)
        self._planes(kf, cloud)
        t0 = time.perf_counter()
        clusters = self._free_space(odom, cloud)
        self._rooms(clusters)
        self.timings["room_segmentation"].append(time.perf_counter() - t0)
        self.last_clusters = clusters
        self._floor()
        self._since_opt += 1
        if len(self.keyframes) > 1 and self._since_opt >= c.optimize_every:
            self._optimize(odom)
            self._since_opt = 0
        return True

    def finish(self) -> PipelineResult:
        if self._since_opt and len(self.keyframes) > 1:
            self._optimize(self.keyframes[-1].odom)
            self._since_opt = 0
        return PipelineResult(
            self.graph,
            self.keyframes,
            self.landmarks,
            self.rooms,
            self.floor_id,
            self.timings,
            self.backend_sizes,
            self.solver_reports,
            self.last_clusters,
            self.cfg,
        )


def run_pipeline(timestamps, odometry: list[Pose3], clouds: list[np.ndarray], config: PipelineConfig | None = None):
    if not (len(timestamps) == len(odometry) == len(clouds)):
        raise ValueError("timestamps, odometry and clouds must have equal length")
    p = Pipeline(config)
    for i, (t, o, c) in enumerate(zip(timestamps, odometry, clouds)):
        p.step(i, t, o, c)
    return p.finish()


# --------------------------------------------------------------------------- #
# Export
# --------------------------------------------------------------------------- #


def _pose_dict(p: Pose3) -> dict:
    return {"translation": p.translation.tolist(), "quat_xyzw": p.quat.tolist()}


def scene_graph_export(res: PipelineResult) -> dict:
    g = res.graph
    kf_time = {k.node_id: k.timestamp for k in res.keyframes}
    walls = []
    for lid in sorted(res.landmarks):
        lm = res.landmarks[lid]
        pl = minimal_to_plane(g.plane(lid))
        walls.append(
            {
                "id": lid,
                "plane": {"normal": pl.normal.tolist(), "distance": pl.distance},
                "minimal": g.vec(lid).tolist(),
                "class": {"tag": lm.plane_class.tag.value, "sign": lm.plane_class.sign.value},
                "observations": len(lm.observing_keyframes),
            }
        )
    floors = []
    if res.floor_id is not None:
        room_ids = sorted(f.nodes[1] for f in g.factors_of(FactorKind.FLOOR_ROOM) if f.nodes[0] == res.floor_id)
        floors.append({"id": res.floor_id, "center": g.vec(res.floor_id).tolist(), "room_ids": room_ids})
    edges = [{"kind": f.kind.value, "nodes": list(f.nodes)} for f in g.factors]
    summary = {k: len(v) for k, v in g.layers.items()}
    summary["factors"] = len(g.factors)
    return {
        "schema": EXPORT_SCHEMA,
        "keyframes": [{"id": k, "timestamp": kf_time[k], "pose": _pose_dict(g.pose(k))} for k in g.layer(NodeKind.KEYFRAME)],
        "walls": walls,
        "rooms": res.room_list(),
        "floors": floors,
        "edges": edges,
        "summary": summary,
        "drift": _pose_dict(g.drift),
    }


def check_export(exp: dict) -> None:
    """Referential integrity across layers; raises ValueError."""
    ids = {
        "keyframes": {k["id"] for k in exp["keyframes"]},
        "walls": {w["id"] for w in exp["walls"]},
        "rooms": {r["id"] for r in exp["rooms"]},
        "floors": {f["id"] for f in exp["floors"]},
    }
    every = set().union(*ids.values())
    for r in exp["rooms"]:
        missing = set(r["wall_ids"]) - ids["walls"]
        if missing:
            raise ValueError(f"room {r['id']} references unknown walls {sorted(missing)}")
    for f in exp["floors"]:
        missing = set(f["room_ids"]) - ids["rooms"]
        if missing:
            raise ValueError(f"floor {f['id']} references unknown rooms {sorted(missing)}")
    for e in exp["edges"]:
        if not set(e["nodes"]) <= every:
            raise ValueError(f"edge {e['kind']} references unknown nodes {e['nodes']}")
