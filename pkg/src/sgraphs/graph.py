"""Four-layer situational graph: variable nodes, factor types and their residuals.

Node state arrays
-----------------
========== ==========================================
Keyframe   ``[tx, ty, tz, qx, qy, qz, qw]`` (map-from-body)
Wall       ``[phi, theta, d]``
Room       ``[x, y]`` (also two-wall rooms and floors)
========== ==========================================

Factor node order and measurement payloads
------------------------------------------
========== ========================== ======================
Odometry   (kf_i, kf_j)               relative pose, 7-array
PosePlane  (kf, wall)                 body-frame plane, 3
FourWall   (room, xa, xb, ya, yb)     none
TwoWall    (room, a, b)               cluster centre, 2
FloorRoom  (floor, room)              room - floor offset, 2
Duplicate  (keep, merge)              none
========== ========================== ======================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import (
    Plane,
    PlaneMinimal,
    Pose3,
    minimal_to_plane,
    plane_to_minimal,
    transform_plane_to_body,
    wrap_angle,
)
from .rooms import four_wall_room_center, two_wall_room_center

SCHEMA = "sgraph/1"


class GaugeError(RuntimeError):
    """A connected component of the graph has no fixed node."""


class InformationError(ValueError):
    """An information matrix is not symmetric positive definite."""


class NodeKind(str, Enum):
    KEYFRAME = "Keyframe"
    WALL = "Wall"
    ROOM = "Room"
    TWO_WALL_ROOM = "TwoWallRoom"
    FLOOR = "Floor"

    @property
    def tangent_dim(self) -> int:
        return {NodeKind.KEYFRAME: 6, NodeKind.WALL: 3}.get(self, 2)

    @property
    def state_dim(self) -> int:
        return {NodeKind.KEYFRAME: 7, NodeKind.WALL: 3}.get(self, 2)


class FactorKind(str, Enum):
    ODOMETRY = "Odometry"
    POSE_PLANE = "PosePlane"
    FOUR_WALL_ROOM = "FourWallRoom"
    TWO_WALL_ROOM = "TwoWallRoom"
    FLOOR_ROOM = "FloorRoom"
    DUPLICATE_PLANE = "DuplicatePlane"

    @property
    def dim(self) -> int:
        return _FACTOR_DIMS[self]

    @property
    def node_kinds(self) -> tuple:
        return _FACTOR_NODES[self]


_FACTOR_DIMS = {
    FactorKind.ODOMETRY: 6,
    FactorKind.POSE_PLANE: 3,
    FactorKind.FOUR_WALL_ROOM: 2,
    FactorKind.TWO_WALL_ROOM: 2,
    FactorKind.FLOOR_ROOM: 2,
    FactorKind.DUPLICATE_PLANE: 3,
}

_W, _K, _R2 = NodeKind.WALL, NodeKind.KEYFRAME, (NodeKind.ROOM, NodeKind.TWO_WALL_ROOM)
_FACTOR_NODES = {
    FactorKind.ODOMETRY: ((_K,), (_K,)),
    FactorKind.POSE_PLANE: ((_K,), (_W,)),
    FactorKind.FOUR_WALL_ROOM: ((NodeKind.ROOM,), (_W,), (_W,), (_W,), (_W,)),
    FactorKind.TWO_WALL_ROOM: ((NodeKind.TWO_WALL_ROOM,), (_W,), (_W,)),
    FactorKind.FLOOR_ROOM: ((NodeKind.FLOOR,), _R2),
    FactorKind.DUPLICATE_PLANE: ((_W,), (_W,)),
}


def pose_to_state(p: Pose3) -> np.ndarray:
    return np.concatenate([p.translation, p.quat])


def state_to_pose(s: np.ndarray) -> Pose3:
    return Pose3(s[3:7], s[:3])


# --------------------------------------------------------------------------- #
# Residuals (single-factor reference forms; the solver uses batched twins)
# --------------------------------------------------------------------------- #


def residual_odometry(x_i: Pose3, x_j: Pose3, meas: Pose3) -> np.ndarray:
    """``Log(meas^-1 o x_i^-1 o x_j)`` as [rotation, translation]."""
    return meas.inverse().compose(x_i.inverse().compose(x_j)).log()


def residual_pose_plane(x: Pose3, plane_map: PlaneMinimal, meas_body: PlaneMinimal) -> np.ndarray:
    pred = plane_to_minimal(transform_plane_to_body(x, minimal_to_plane(plane_map)))
    r = pred.as_array() - meas_body.as_array()
    r[0] = wrap_angle(r[0])
    r[1] = wrap_angle(r[1])
    return r


def residual_four_wall_room(room, x_a: PlaneMinimal, x_b: PlaneMinimal, y_a: PlaneMinimal, y_b: PlaneMinimal) -> np.ndarray:
    f = four_wall_room_center(*(minimal_to_plane(p) for p in (x_a, x_b, y_a, y_b)))
    return np.asarray(room, dtype=float) - f


def residual_two_wall_room(room, a: PlaneMinimal, b: PlaneMinimal, cluster_center) -> np.ndarray:
    f = two_wall_room_center(minimal_to_plane(a), minimal_to_plane(b), cluster_center)
    return np.asarray(room, dtype=float) - f


def residual_floor_room(floor, room, meas_delta) -> np.ndarray:
    return np.asarray(meas_delta, float) - (np.asarray(room, float) - np.asarray(floor, float))


def residual_duplicate_plane(p: PlaneMinimal, q: PlaneMinimal) -> np.ndarray:
    r = p.as_array() - q.as_array()
    r[0] = wrap_angle(r[0])
    r[1] = wrap_angle(r[1])
    return r


# --------------------------------------------------------------------------- #
# Graph containers
# --------------------------------------------------------------------------- #


@dataclass
class VariableNode:
    id: int
    kind: NodeKind
    state: np.ndarray
    fixed: bool = False

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float).reshape(self.kind.state_dim)


@dataclass
class Factor:
    kind: FactorKind
    nodes: tuple[int, ...]
    measurement: np.ndarray
    information: np.ndarray

    def __post_init__(self):
        self.nodes = tuple(int(n) for n in self.nodes)
        self.measurement = np.asarray(self.measurement, dtype=float).reshape(-1)
        info = np.asarray(self.information, dtype=float)
        k = self.kind.dim
        if info.shape != (k, k):
            raise InformationError(f"{self.kind.value} information must be {k}x{k}, got {info.shape}")
        if not np.allclose(info, info.T, rtol=0, atol=1e-9 * max(1.0, float(np.abs(info).max()))):
            raise InformationError("information matrix is not symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise InformationError("information matrix is not positive definite") from None
        self.information = 0.5 * (info + info.T)
        if len(self.nodes) != len(self.kind.node_kinds):
            raise ValueError(f"{self.kind.value} connects {len(self.kind.node_kinds)} nodes, got {len(self.nodes)}")


@dataclass
class SolverReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    termination: str
    cost_history: list[float] = field(default_factory=list)


@dataclass
class SolverOptions:
    max_iter: int = 50
    cost_tol: float = 1e-10
    grad_tol: float = 1e-10
    abs_cost_tol: float = 1e-18  # below this the problem is solved to machine precision
    lambda_init: float = 1e-5
    lambda_factor: float = 10.0
    lambda_max: float = 1e12
    huber: float | None = None
    fd_step: float = 1e-6


class SituationalGraph:
    """Nodes, factors, per-layer index and the odometry-to-map drift."""

    def __init__(self):
        self.nodes: dict[int, VariableNode] = {}
        self.factors: list[Factor] = []
        self.drift = Pose3.identity()
        self._next_id = 0

    # ---------------------------------------------------------------- nodes
    def new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def add_node(self, kind: NodeKind, state, fixed: bool = False, node_id: int | None = None) -> int:
        nid = self.new_id() if node_id is None else int(node_id)
        if nid in self.nodes:
            raise ValueError(f"duplicate node id {nid}")
        self._next_id = max(self._next_id, nid + 1)
        if kind is NodeKind.KEYFRAME and isinstance(state, Pose3):
            state = pose_to_state(state)
        self.nodes[nid] = VariableNode(nid, kind, state, fixed)
        return nid

    def remove_node(self, nid: int) -> None:
        self.factors = [f for f in self.factors if nid not in f.nodes]
        del self.nodes[nid]

    def layer(self, kind: NodeKind) -> list[int]:
        return sorted(n.id for n in self.nodes.values() if n.kind is kind)

    @property
    def layers(self) -> dict[str, list[int]]:
        return {
            "keyframes": self.layer(NodeKind.KEYFRAME),
            "walls": self.layer(NodeKind.WALL),
            "rooms": self.layer(NodeKind.ROOM) + self.layer(NodeKind.TWO_WALL_ROOM),
            "floors": self.layer(NodeKind.FLOOR),
        }

    def pose(self, nid: int) -> Pose3:
        return state_to_pose(self.nodes[nid].state)

    def set_pose(self, nid: int, p: Pose3) -> None:
        self.nodes[nid].state = pose_to_state(p)

    def plane(self, nid: int) -> PlaneMinimal:
        return PlaneMinimal.from_array(self.nodes[nid].state)

    def vec(self, nid: int) -> np.ndarray:
        return self.nodes[nid].state.copy()

    # -------------------------------------------------------------- factors
    def add_factor(self, kind: FactorKind, nodes, measurement=(), information=None) -> Factor:
        if information is None:
            information = np.eye(kind.dim)
        if isinstance(measurement, Pose3):
            measurement = pose_to_state(measurement)
        f = Factor(kind, tuple(nodes), measurement, information)
        for nid, allowed in zip(f.nodes, kind.node_kinds):
            if nid not in self.nodes:
                raise KeyError(f"factor references unknown node {nid}")
            if self.nodes[nid].kind not in allowed:
                raise ValueError(f"{kind.value} cannot attach to {self.nodes[nid].kind.value} node {nid}")
        self.factors.append(f)
        return f

    def factors_of(self, kind: FactorKind) -> list[Factor]:
        return [f for f in self.factors if f.kind is kind]

    def factor_residual(self, f: Factor) -> np.ndarray:
        n = self.nodes
        k = f.kind
        if k is FactorKind.ODOMETRY:
            return residual_odometry(self.pose(f.nodes[0]), self.pose(f.nodes[1]), state_to_pose(f.measurement))
        if k is FactorKind.POSE_PLANE:
            return residual_pose_plane(self.pose(f.nodes[0]), self.plane(f.nodes[1]), PlaneMinimal.from_array(f.measurement))
        if k is FactorKind.FOUR_WALL_ROOM:
            return residual_four_wall_room(n[f.nodes[0]].state, *(self.plane(i) for i in f.nodes[1:]))
        if k is FactorKind.TWO_WALL_ROOM:
            return residual_two_wall_room(n[f.nodes[0]].state, self.plane(f.nodes[1]), self.plane(f.nodes[2]), f.measurement)
        if k is FactorKind.FLOOR_ROOM:
            return residual_floor_room(n[f.nodes[0]].state, n[f.nodes[1]].state, f.measurement)
        return residual_duplicate_plane(self.plane(f.nodes[0]), self.plane(f.nodes[1]))

    def total_cost(self) -> float:
        """Sum of r^T Lambda r over all factors (reference, unbatched)."""
        c = 0.0
        for f in self.factors:
            r = self.factor_residual(f)
            c += float(r @ f.information @ r)
        return c

    # ---------------------------------------------------------------- gauge
    def components(self) -> list[set[int]]:
        """Connected components induced by factors (isolated nodes excluded)."""
        parent: dict[int, int] = {}

        def find(a):
            while parent.setdefault(a, a) != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in self.factors:
            r0 = find(f.nodes[0])
            for nid in f.nodes[1:]:
                r1 = find(nid)
                if r1 != r0:
                    parent[r1] = r0
        comps: dict[int, set[int]] = {}
        for nid in parent:
            comps.setdefault(find(nid), set()).add(nid)
        return sorted(comps.values(), key=min)

    def check_gauge(self) -> None:
        for comp in self.components():
            if not any(self.nodes[i].fixed for i in comp):
                raise GaugeError(f"component containing node {min(comp)} has no fixed node")

    def optimize(self, opts: SolverOptions | None = None) -> SolverReport:
        from .solver import optimize

        return optimize(self, opts or SolverOptions())

    # -------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        nodes = [
            {"id": n.id, "kind": n.kind.value, "state": n.state.tolist(), "fixed": n.fixed}
            for n in sorted(self.nodes.values(), key=lambda n: n.id)
        ]
        factors = []
        for f in self.factors:
            iu = np.triu_indices(f.kind.dim)
            factors.append(
                {
                    "kind": f.kind.value,
                    "nodes": list(f.nodes),
                    "measurement": f.measurement.tolist(),
                    "information": f.information[iu].tolist(),
                }
            )
        return {"schema": SCHEMA, "drift": pose_to_state(self.drift).tolist(), "nodes": nodes, "factors": factors}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SituationalGraph":
        if data.get("schema") != SCHEMA:
            raise ValueError(f"unsupported graph schema {data.get('schema')!r}")
        g = cls()
        for nd in data["nodes"]:
            kind = NodeKind(nd["kind"])
            g.nodes[int(nd["id"])] = VariableNode(int(nd["id"]), kind, np.array(nd["state"], float), bool(nd["fixed"]))
            g._next_id = max(g._next_id, int(nd["id"]) + 1)
        for fd in data["factors"]:
            kind = FactorKind(fd["kind"])
            k = kind.dim
            info = np.zeros((k, k))
            iu = np.triu_indices(k)
            info[iu] = fd["information"]
            info = info + np.triu(info, 1).T
            g.factors.append(Factor(kind, tuple(fd["nodes"]), np.array(fd["measurement"], float), info))
        if "drift" in data:
            g.drift = state_to_pose(np.array(data["drift"], float))
        return g

    @classmethod
    def from_json(cls, text: str) -> "SituationalGraph":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------- #
# Keyframe / drift helpers
# --------------------------------------------------------------------------- #


def update_drift(graph: SituationalGraph, latest_odom_pose: Pose3, keyframe_id: int | None = None) -> Pose3:
    """Map-from-odometry transform implied by the latest optimized keyframe."""
    kfs = graph.layer(NodeKind.KEYFRAME)
    if not kfs:
        raise ValueError("graph has no keyframe")
    kid = kfs[-1] if keyframe_id is None else keyframe_id
    graph.drift = graph.pose(kid).compose(latest_odom_pose.inverse())
    return graph.drift


def add_keyframe_if_due(
    last_kf: Pose3, current_odom: Pose3, translation_gate: float = 1.0, rotation_gate: float = math.radians(15.0)
) -> bool:
    rel = last_kf.inverse().compose(current_odom)
    return bool(np.linalg.norm(rel.translation) > translation_gate or rel.rotation_angle() > rotation_gate)


def plane_state(plane: Plane) -> np.ndarray:
    return plane_to_minimal(plane).as_array()
