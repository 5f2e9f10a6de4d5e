"""Trajectory, map and room-detection metrics plus per-module timing summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose3

MODULES = ("plane_segmentation", "room_segmentation", "floor_segmentation", "back_end")


@dataclass
class AteReport:
    rmse: float
    errors: np.ndarray
    alignment: Pose3
    pairs: int

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "pairs": self.pairs,
            "mean": float(np.mean(self.errors)),
            "max": float(np.max(self.errors)),
            "alignment": {"translation": self.alignment.translation.tolist(), "quat_xyzw": self.alignment.quat.tolist()},
        }


@dataclass
class MapRmseReport:
    rmse: float  # nan when nothing matched
    matched_fraction: float
    cap: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.rmse)

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse if self.defined else None,
            "matched_fraction": self.matched_fraction,
            "cap": self.cap,
            "defined": self.defined,
        }


@dataclass
class PrReport:
    precision: dict[str, float]
    recall: dict[str, float]
    matches: list[dict] = field(default_factory=list)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "counts": self.counts, "matches": self.matches}


def associate_timestamps(t_est, t_ref, max_dt: float = 0.05) -> list[tuple[int, int]]:
    """Nearest reference stamp per estimated stamp, one-to-one, within ``max_dt``."""
    t_est = np.asarray(t_est, float)
    t_ref = np.asarray(t_ref, float)
    if len(t_est) == 0 or len(t_ref) == 0:
        return []
    order = np.argsort(t_ref)
    ref_sorted = t_ref[order]
    cand = []
    for i, t in enumerate(t_est):
        k = int(np.searchsorted(ref_sorted, t))
        for j in (k - 1, k):
            if 0 <= j < len(ref_sorted) and abs(ref_sorted[j] - t) <= max_dt:
                cand.append((abs(ref_sorted[j] - t), i, int(order[j])))
    pairs, used_e, used_r = [], set(), set()
    for _, i, j in sorted(cand):
        if i in used_e or j in used_r:
            continue
        used_e.add(i)
        used_r.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def align_rigid(src: np.ndarray, dst: np.ndarray) -> Pose3:
    """Rotation + translation (no scale) minimising sum |T src - dst|^2."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose3.from_rt(R, mu_d - R @ mu_s)


def ate(est_times, est_poses: list[Pose3], truth_times, truth_poses: list[Pose3], max_dt: float = 0.05) -> AteReport:
    pairs = associate_timestamps(est_times, truth_times, max_dt)
    if len(pairs) < 3:
        raise ValueError(f"ATE needs at least 3 associated poses, got {len(pairs)}")
    src = np.array([est_poses[i].translation for i, _ in pairs])
    dst = np.array([truth_poses[j].translation for _, j in pairs])
    T = align_rigid(src, dst)
    err = np.linalg.norm(T.transform_points(src) - dst, axis=1)
    return AteReport(float(np.sqrt(np.mean(err**2))), err, T, len(pairs))


def map_rmse(estimated_points, truth_points, cap: float = 0.5) -> MapRmseReport:
    est = np.asarray(estimated_points, float).reshape(-1, 3)
    ref = np.asarray(truth_points, float).reshape(-1, 3)
    if len(est) == 0 or len(ref) == 0:
        raise ValueError("map_rmse needs nonempty clouds")
    d, _ = cKDTree(ref).query(est, k=1)
    keep = d <= cap
    if not np.any(keep):
        return MapRmseReport(float("nan"), 0.0, cap)
    return MapRmseReport(float(np.sqrt(np.mean(d[keep] ** 2))), float(keep.mean()), cap)


def _kind_family(kind: str) -> str:
    k = str(kind)
    if k in ("room", "FourWall"):
        return "four_wall"
    if k in ("corridor", "TwoWallX", "TwoWallY"):
        return "two_wall"
    raise ValueError(f"unknown room kind {kind!r}")


def _room_distance(det: dict, truth: dict) -> float:
    c = np.asarray(det["center"], float)
    t = np.asarray(truth["center"], float)
    kind = str(det["kind"])
    if kind in ("TwoWallX", "TwoWallY"):
        # the free-axis coordinate comes from the visible part of the corridor only
        axis = 0 if kind == "TwoWallX" else 1
        free = 1 - axis
        lo, hi = truth["bounds"][2 * free], truth["bounds"][2 * free + 1]
        if not lo <= c[free] <= hi:
            return math.inf
        return abs(c[axis] - t[axis])
    return float(np.linalg.norm(c - t))


def room_pr(detected: list[dict], truth_rooms: list[dict], center_gate: float = 1.5) -> PrReport:
    """Greedy one-to-one, kind-aware matching by center distance.

    ``detected`` items carry ``kind`` (FourWall/TwoWallX/TwoWallY) and ``center``; ``truth_rooms``
    items carry ``kind`` (room/corridor), ``center`` and ``bounds``.
    """
    cand = []
    for i, d in enumerate(detected):
        for j, t in enumerate(truth_rooms):
            if _kind_family(d["kind"]) != _kind_family(t["kind"]):
                continue
            dist = _room_distance(d, t)
            if dist <= center_gate:
                cand.append((dist, i, j))
    used_d, used_t, matches = set(), set(), []
    for dist, i, j in sorted(cand):
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        matches.append({"detected": i, "truth": j, "distance": float(dist)})
    precision, recall, counts = {}, {}, {}
    for fam in ("four_wall", "two_wall", "overall"):
        di = [i for i, d in enumerate(detected) if fam == "overall" or _kind_family(d["kind"]) == fam]
        ti = [j for j, t in enumerate(truth_rooms) if fam == "overall" or _kind_family(t["kind"]) == fam]
        tp = sum(1 for m in matches if m["detected"] in di)
        fp, fn = len(di) - tp, len(ti) - tp
        counts[fam] = {"tp": tp, "fp": fp, "fn": fn}
        # empty denominators count as perfect: nothing claimed / nothing to find
        precision[fam] = tp / (tp + fp) if tp + fp else 1.0
        recall[fam] = tp / (tp + fn) if tp + fn else 1.0
    return PrReport(precision, recall, matches, counts)


def timing_report(samples: dict[str, list[float]]) -> dict[str, float | str]:
    """Mean milliseconds per module; modules without samples report ``"n/a"``."""
    out: dict[str, float | str] = {}
    for m in MODULES:
        s = samples.get(m, [])
        out[m] = float(np.mean(s)) * 1e3 if len(s) else "n/a"
    return out


def windowed_means(values, windows: int = 4) -> list[float]:
    """Means over consecutive equal-count windows (the last absorbs the remainder)."""
    v = np.asarray(values, float)
    if len(v) < windows:
        return [float(v.mean())] if len(v) else []
    edges = np.linspace(0, len(v), windows + 1).astype(int)
    return [float(v[a:b].mean()) for a, b in zip(edges[:-1], edges[1:])]


def improvement_pct(baseline: float, new: float) -> float:
    """Relative reduction of an error metric, in percent."""
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    return 100.0 * (baseline - new) / baseline
