"""Reading and writing of trajectories (TUM), clouds (PLY ascii), grids (PGM + JSON) and scenes."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .free_space import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from .geometry import Pose3

# PGM grey levels, ROS map_server convention
_PGM_FREE, _PGM_OCC, _PGM_UNKNOWN = 254, 0, 205


def _fmt(v: float) -> str:
    s = f"{v:.9g}"
    return "0" if s == "-0" else s


def write_tum(path, timestamps, poses: list[Pose3]) -> None:
    """``t tx ty tz qx qy qz qw`` per line, 9 significant digits."""
    lines = []
    for t, p in zip(timestamps, poses):
        vals = [float(t), *p.translation, *p.quat]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> tuple[np.ndarray, list[Pose3]]:
    data = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{ln}: expected 8 columns, got {len(parts)}")
        data.append([float(v) for v in parts])
    if not data:
        return np.zeros(0), []
    arr = np.asarray(data)
    return arr[:, 0], [Pose3(r[4:8], r[1:4]) for r in arr]


def write_ply(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}", "property float x", "property float y", "property float z", "end_header"]
    body = [" ".join(_fmt(v) for v in p) for p in pts]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, i = 0, 1
    while i < len(lines) and lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:1] == ["format"] and parts[1] != "ascii":
            raise ValueError(f"{path}: only ascii PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        i += 1
    rows = lines[i + 1 : i + 1 + n]
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} vertices, found {len(rows)}")
    if n == 0:
        return np.zeros((0, 3))
    return np.array([[float(v) for v in r.split()[:3]] for r in rows])


def write_grid(path_pgm, grid: OccupancyGrid) -> None:
    """Binary PGM (row 0 at the top = max y) plus a ``.json`` sidecar with origin/resolution."""
    path_pgm = Path(path_pgm)
    img = np.full(grid.cells.shape, _PGM_UNKNOWN, dtype=np.uint8)
    img[grid.cells == FREE] = _PGM_FREE
    img[grid.cells == OCCUPIED] = _PGM_OCC
    img = img[::-1]
    h, w = img.shape
    path_pgm.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    meta = {"origin": [float(v) for v in grid.origin], "resolution": float(grid.resolution), "width": w, "height": h}
    path_pgm.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_grid(path_pgm) -> OccupancyGrid:
    path_pgm = Path(path_pgm)
    meta = json.loads(path_pgm.with_suffix(".json").read_text())
    raw = path_pgm.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode())
        pos = end
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    if magic == "P5":
        img = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    elif magic == "P2":
        img = np.array(raw[pos:].split(), dtype=np.int64)[: w * h].reshape(h, w)
    else:
        raise ValueError(f"{path_pgm}: unsupported PGM magic {magic!r}")
    img = img[::-1]
    cells = np.full((h, w), UNKNOWN, dtype=np.int8)
    cells[img >= 250] = FREE
    cells[img <= 50] = OCCUPIED
    return OccupancyGrid(np.asarray(meta["origin"], float), float(meta["resolution"]), cells)


def write_csv(path, header: list[str], rows) -> None:
    out = [",".join(header)]
    for r in rows:
        out.append(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in r))
    Path(path).write_text("\n".join(out) + "\n")


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def read_points_csv(path) -> np.ndarray:
    """``x,y,z`` per line; a non-numeric first line is taken as a header."""
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        try:
            vals = [float(v) for v in parts[:3]]
        except ValueError:
            if ln == 1:
                continue
            raise ValueError(f"{path}:{ln}: expected x,y,z") from None
        if len(vals) != 3:
            raise ValueError(f"{path}:{ln}: expected x,y,z")
        rows.append(vals)
    return np.asarray(rows, dtype=float).reshape(-1, 3)


def write_points_csv(path, points) -> None:
    write_csv(path, ["x", "y", "z"], [tuple(float(v) for v in p) for p in np.asarray(points, float).reshape(-1, 3)])


def grid_to_json(grid: OccupancyGrid) -> dict:
    """``rows[i][j]`` is the cell at row i (y) and column j (x); -1 unknown, 0 free, 1 occupied."""
    return {"origin": [float(v) for v in grid.origin], "resolution": float(grid.resolution), "rows": grid.cells.tolist()}


def grid_from_json(data: dict) -> OccupancyGrid:
    cells = np.asarray(data["rows"], dtype=int)
    if cells.ndim != 2 or not np.isin(cells, (UNKNOWN, FREE, OCCUPIED)).all():
        raise ValueError("grid rows must be a rectangular array of -1/0/1")
    return OccupancyGrid(np.asarray(data["origin"], float), float(data["resolution"]), cells)
