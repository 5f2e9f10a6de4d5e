"""Occupancy grid, distance field, sparse free-space graph and free-space clustering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Pose3

FREE = 0
OCCUPIED = 1
UNKNOWN = -1

#: Distance reported when the grid holds no obstacle at all.
INF_DISTANCE = float(np.finfo(float).max)


@dataclass
class OccupancyGrid:
    """2-D lattice; ``cells[row, col]`` with row along y and col along x.

    ``origin`` is the world position of the lower-left corner of cell (0, 0).
    """

    origin: np.ndarray
    resolution: float
    cells: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.cells.ndim != 2:
            raise ValueError("cells must be a 2-D array")

    @classmethod
    def filled(cls, lo, hi, resolution: float, value: int = UNKNOWN) -> "OccupancyGrid":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        shape = np.ceil((hi - lo) / resolution - 1e-9).astype(int)
        return cls(lo, resolution, np.full((shape[1], shape[0]), value, dtype=np.int8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def world_to_index(self, xy) -> np.ndarray:
        """(row, col) indices; may fall outside the grid."""
        xy = np.asarray(xy, dtype=float)
        ij = np.floor((xy - self.origin) / self.resolution + 1e-9).astype(int)
        return ij[..., ::-1]

    def index_to_world(self, rc) -> np.ndarray:
        rc = np.asarray(rc, dtype=float)
        return self.origin + (rc[..., ::-1] + 0.5) * self.resolution

    def in_bounds(self, rc) -> np.ndarray:
        rc = np.asarray(rc)
        return (rc[..., 0] >= 0) & (rc[..., 0] < self.shape[0]) & (rc[..., 1] >= 0) & (rc[..., 1] < self.shape[1])

    def crop(self, center, radius: float) -> "OccupancyGrid":
        """Window of the grid covering ``center +- radius`` (clipped to bounds)."""
        lo = self.world_to_index(np.asarray(center) - radius)
        hi = self.world_to_index(np.asarray(center) + radius)
        r0, c0 = np.maximum(lo, 0)
        r1, c1 = np.minimum(hi + 1, self.shape)
        r1, c1 = max(r1, r0), max(c1, c0)
        origin = self.origin + np.array([c0, r0]) * self.resolution
        return OccupancyGrid(origin, self.resolution, self.cells[r0:r1, c0:c1].copy())

    def integrate_scan(self, sensor_xy, points_xy: np.ndarray, max_range: float, bearing_bins: int = 720):
        """Mark hit cells occupied and cells along per-bearing rays free (occupied wins)."""
        sensor_xy = np.asarray(sensor_xy, dtype=float)
        pts = np.asarray(points_xy, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            return
        rel = pts - sensor_xy
        rng = np.hypot(rel[:, 0], rel[:, 1])
        ok = (rng <= max_range) & (rng > 1e-6)
        pts, rel, rng = pts[ok], rel[ok], rng[ok]
        hit = self.world_to_index(pts)
        inb = self.in_bounds(hit)
        self.cells[hit[inb, 0], hit[inb, 1]] = OCCUPIED
        # nearest return per bearing bin bounds the free ray
        bearing = np.arctan2(rel[:, 1], rel[:, 0])
        b = np.floor((bearing + np.pi) / (2 * np.pi) * bearing_bins).astype(int) % bearing_bins
        nearest = np.full(bearing_bins, np.inf)
        np.minimum.at(nearest, b, rng)
        sel = np.isfinite(nearest)
        if not np.any(sel):
            return
        ang = (np.flatnonzero(sel) + 0.5) / bearing_bins * 2 * np.pi - np.pi
        reach = nearest[sel] - self.resolution
        step = 0.5 * self.resolution
        n_s = int(np.ceil(max(reach.max(), 0.0) / step)) + 1
        s = np.arange(n_s) * step
        mask = s[None, :] <= reach[:, None]
        xs = sensor_xy[0] + np.cos(ang)[:, None] * s[None, :]
        ys = sensor_xy[1] + np.sin(ang)[:, None] * s[None, :]
        rc = self.world_to_index(np.stack([xs[mask], ys[mask]], axis=-1))
        inb = self.in_bounds(rc)
        rc = rc[inb]
        cur = self.cells[rc[:, 0], rc[:, 1]]
        rc = rc[cur != OCCUPIED]
        self.cells[rc[:, 0], rc[:, 1]] = FREE


@dataclass
class DistanceField:
    origin: np.ndarray
    resolution: float
    distance: np.ndarray  # meters, same shape as the grid
    free: np.ndarray  # bool mask of Free cells

    def index_to_world(self, rc) -> np.ndarray:
        rc = np.asarray(rc, dtype=float)
        return self.origin + (rc[..., ::-1] + 0.5) * self.resolution

    def sample(self, xy) -> np.ndarray:
        """Bilinear interpolation between cell centres (clamped at the border)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        f = (xy - self.origin) / self.resolution - 0.5
        h, w = self.distance.shape
        c = np.clip(f[:, 0], 0, w - 1)
        r = np.clip(f[:, 1], 0, h - 1)
        c0 = np.minimum(np.floor(c).astype(int), max(w - 2, 0))
        r0 = np.minimum(np.floor(r).astype(int), max(h - 2, 0))
        c1 = np.minimum(c0 + 1, w - 1)
        r1 = np.minimum(r0 + 1, h - 1)
        tc, tr = c - c0, r - r0
        D = self.distance
        return (
            D[r0, c0] * (1 - tr) * (1 - tc)
            + D[r0, c1] * (1 - tr) * tc
            + D[r1, c0] * tr * (1 - tc)
            + D[r1, c1] * tr * tc
        )


def build_distance_field(grid: OccupancyGrid, unknown_as_occupied: bool = True) -> DistanceField:
    """Exact Euclidean distance (cell centre to nearest obstacle cell centre), meters."""
    obstacle = grid.cells == OCCUPIED
    if unknown_as_occupied:
        obstacle = obstacle | (grid.cells == UNKNOWN)
    if not np.any(obstacle):
        dist = np.full(grid.shape, INF_DISTANCE)
    else:
        dist = ndimage.distance_transform_edt(~obstacle) * grid.resolution
    return DistanceField(grid.origin.copy(), grid.resolution, dist, grid.cells == FREE)


@dataclass
class FreeSpaceGraph:
    positions: np.ndarray  # (n, 2)
    distance: np.ndarray  # (n,)
    adjacency: list[list[int]]
    visited: np.ndarray = None
    cluster: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.distance = np.asarray(self.distance, dtype=float).reshape(-1)
        n = len(self.positions)
        if self.visited is None:
            self.visited = np.zeros(n, dtype=bool)
        if self.cluster is None:
            self.cluster = np.zeros(n, dtype=int)

    def __len__(self):
        return len(self.positions)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nb in enumerate(self.adjacency) for j in nb if i < j]

    @classmethod
    def from_edges(cls, positions, distance, edges) -> "FreeSpaceGraph":
        n = len(positions)
        adj: list[set] = [set() for _ in range(n)]
        for i, j in edges:
            if i != j:
                adj[i].add(int(j))
                adj[j].add(int(i))
        return cls(positions, distance, [sorted(a) for a in adj])


@dataclass
class FreeSpaceCluster:
    cluster_id: int
    vertex_ids: list[int]
    positions: np.ndarray = field(repr=False)

    @property
    def endpoints(self) -> dict[str, float]:
        """Coordinate-wise extremes: x1 = max x, x2 = min x, likewise for y."""
        p = self.positions
        return {
            "x1": float(p[:, 0].max()),
            "x2": float(p[:, 0].min()),
            "y1": float(p[:, 1].max()),
            "y2": float(p[:, 1].min()),
        }

    @property
    def center(self) -> np.ndarray:
        """Midpoint of the cluster endpoints per axis."""
        e = self.endpoints
        cx = 0.5 * (e["x1"] - e["x2"]) + e["x2"]
        cy = 0.5 * (e["y1"] - e["y2"]) + e["y2"]
        return np.array([cx, cy])


def build_free_space_graph(
    field_: DistanceField,
    robot_position,
    t_r: float = 10.0,
    vertex_spacing: float | None = None,
) -> FreeSpaceGraph:
    """Lattice-sampled free space within ``t_r`` of the robot, 8-connected."""
    if t_r <= 0:
        raise ValueError("t_r must be positive")
    res = field_.resolution
    spacing = 2 * res if vertex_spacing is None else vertex_spacing
    step = max(int(round(spacing / res)), 1)
    h, w = field_.distance.shape
    # lattice aligned to absolute cell index so successive graphs share vertices
    off = np.round(field_.origin / res).astype(int)
    rows = np.arange((-off[1]) % step, h, step)
    cols = np.arange((-off[0]) % step, w, step)
    if len(rows) == 0 or len(cols) == 0:
        return FreeSpaceGraph(np.zeros((0, 2)), np.zeros(0), [])
    R, C = np.meshgrid(rows, cols, indexing="ij")
    xy = field_.index_to_world(np.stack([R, C], axis=-1))
    robot = np.asarray(robot_position, dtype=float)
    inside = np.hypot(xy[..., 0] - robot[0], xy[..., 1] - robot[1]) <= t_r
    valid = inside & field_.free[R, C]
    vid = np.full(valid.shape, -1, dtype=int)
    vid[valid] = np.arange(int(valid.sum()))
    positions = xy[valid]
    distance = field_.sample(positions) if len(positions) else np.zeros(0)

    edges = []
    nr, nc = vid.shape
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        sa = (slice(0, nr - dr), slice(max(0, -dc), nc - max(0, dc)))
        sb = (slice(dr, nr), slice(max(0, dc), nc - max(0, -dc)))
        a, b = vid[sa], vid[sb]
        pair = (a >= 0) & (b >= 0)
        if not np.any(pair):
            continue
        ia, ib = a[pair], b[pair]
        r0, c0 = R[sa][pair], C[sa][pair]
        ok = np.ones(len(ia), dtype=bool)
        # every cell the connecting segment touches must be free
        for k in range(1, step + 1):
            ok &= field_.free[r0 + k * dr, c0 + k * dc]
            if dr and dc:
                ok &= field_.free[r0 + k * dr, c0 + (k - 1) * dc]
                ok &= field_.free[r0 + (k - 1) * dr, c0 + k * dc]
        edges.extend(zip(ia[ok].tolist(), ib[ok].tolist()))
    return FreeSpaceGraph.from_edges(positions, distance, edges)


def cluster_free_space(graph: FreeSpaceGraph, t_lambda: float = 0.8) -> list[FreeSpaceCluster]:
    """Three-phase clustering: filter low-clearance vertices, label components, re-attach.

    Mutates ``graph.visited`` / ``graph.cluster`` (0 = unassigned).
    """
    if t_lambda < 0:
        raise ValueError("t_lambda must be non-negative")
    n = len(graph)
    graph.visited = np.zeros(n, dtype=bool)
    graph.cluster = np.zeros(n, dtype=int)
    if n == 0:
        return []

    # 1: filter
    kept = graph.distance >= t_lambda
    kept_list = kept.tolist()
    adjacency = graph.adjacency

    # 2: connected components over kept vertices (explicit stack)
    visited = graph.visited
    cluster = graph.cluster
    c = 0
    for v in range(n):
        if not kept_list[v] or visited[v]:
            continue
        c += 1
        cluster[v] = c
        stack = [v]
        visited[v] = True
        while stack:
            u = stack.pop()
            for w in adjacency[u]:
                if kept_list[w] and not visited[w]:
                    visited[w] = True
                    cluster[w] = c
                    stack.append(w)

    # 3: re-attach deleted vertices to the first kept neighbour's cluster
    for v in np.flatnonzero(~kept).tolist():
        for w in adjacency[v]:
            if kept_list[w]:
                cluster[v] = cluster[w]
                break

    out = []
    for cid in range(1, c + 1):
        ids = np.flatnonzero(cluster == cid)
        out.append(FreeSpaceCluster(cid, ids.tolist(), graph.positions[ids].copy()))
    return out


def apply_drift_correction(graph: FreeSpaceGraph, drift: Pose3, field_: DistanceField | None = None) -> FreeSpaceGraph:
    """Move vertices by the planar part of ``drift``; resample clearance if a corrected field is given."""
    yaw = drift.yaw
    c, s = np.cos(yaw), np.sin(yaw)
    R2 = np.array([[c, -s], [s, c]])
    pos = graph.positions @ R2.T + drift.translation[:2]
    dist = field_.sample(pos) if (field_ is not None and len(pos)) else graph.distance.copy()
    return FreeSpaceGraph(pos, dist, [list(a) for a in graph.adjacency], graph.visited.copy(), graph.cluster.copy())
