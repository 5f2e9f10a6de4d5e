"""Command-line driver: ``generate``, ``run``, ``eval`` and ``export-plot``.

Exit codes: 0 ok, 2 input error, 3 solver error. Failures print one ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import io
from .evaluation import MODULES, ate, improvement_pct, map_rmse, room_pr, timing_report
from .graph import GaugeError, InformationError
from .pipeline import PipelineConfig, check_export, run_pipeline, scene_graph_export
from .simulator import SceneError, generate_scene_from_dict, scene_specs_from_dict, wall_point_cloud

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3


class InputError(Exception):
    pass


def _need(path: Path) -> Path:
    if not path.exists():
        raise InputError(f"missing input {path}")
    return path


def _load_json_file(path: Path):
    try:
        return json.loads(_need(path).read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})") from None


# --------------------------------------------------------------------------- #
# generate
# --------------------------------------------------------------------------- #


def cmd_generate(scene_file, out_dir, seed: int | None = None) -> dict:
    data = _load_json_file(Path(scene_file))
    try:
        scene = generate_scene_from_dict(data, seed)
    except SceneError as e:
        raise InputError(str(e)) from None
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    effective = data.copy()
    if seed is not None:
        effective = json.loads(json.dumps(data))
        effective.setdefault("noise", {})["seed"] = int(seed)
    io.dump_json(out / "scene.json", effective)
    io.write_tum(out / "truth.tum", scene.timestamps, scene.truth)
    io.write_tum(out / "odometry.tum", scene.timestamps, scene.odometry)
    for i, c in enumerate(scene.clouds):
        io.write_ply(out / "clouds" / f"{i:06d}.ply", c)
    io.write_grid(out / "grid.pgm", scene.grid)
    truth = {
        "rooms": scene.truth_rooms,
        "planes": [{"normal": p.normal.tolist(), "distance": p.distance} for p in scene.truth_planes],
        "floor_center": scene.floor_center.tolist(),
        "path_length": scene.path_length,
    }
    io.dump_json(out / "ground_truth.json", truth)
    summary = {
        "poses": len(scene.truth),
        "clouds": len(scene.clouds),
        "points": int(sum(len(c) for c in scene.clouds)),
        "rooms": len(truth["rooms"]),
        "planes": len(truth["planes"]),
        "path_length_m": round(scene.path_length, 3),
    }
    return summary


# --------------------------------------------------------------------------- #
# run
# --------------------------------------------------------------------------- #


def load_config(config_file, optimize_every: int | None = None, seed: int | None = None) -> PipelineConfig:
    data = {} if config_file is None else _load_json_file(Path(config_file))
    if optimize_every is not None:
        data["optimize_every"] = optimize_every
    if seed is not None:
        data["seed"] = seed
    try:
        return PipelineConfig.from_dict(data)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "$"
        raise InputError(f"config {where}: {e.message}") from None


def cmd_run(scene_dir, out_dir, config: PipelineConfig) -> dict:
    scene_dir = Path(scene_dir)
    times, odom = io.read_tum(_need(scene_dir / "odometry.tum"))
    cloud_dir = _need(scene_dir / "clouds")
    files = sorted(cloud_dir.glob("*.ply"))
    if len(files) != len(odom):
        raise InputError(f"{cloud_dir}: {len(files)} clouds for {len(odom)} odometry poses")
    clouds = [io.read_ply(f) for f in files]
    res = run_pipeline(times, odom, clouds, config)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export = scene_graph_export(res)
    check_export(export)
    io.dump_json(out / "scene_graph.json", export)
    (out / "graph.json").write_text(res.graph.to_json() + "\n")
    io.dump_json(out / "config.json", config.to_dict())
    io.write_tum(out / "trajectory.tum", res.keyframe_times, res.keyframe_poses)
    io.write_tum(out / "odometry_keyframes.tum", res.keyframe_times, res.odometry_poses)
    io.write_ply(out / "map.ply", res.map_points())
    rows = []
    for m in MODULES:
        for i, v in enumerate(res.timings[m]):
            size = res.backend_sizes[i] if m == "back_end" else ""
            rows.append((m, i, float(v * 1e3), size))
    io.write_csv(out / "timing.csv", ["module", "sample", "ms", "factors"], rows)
    rows = [(s, k, float(c)) for s, rep in enumerate(res.solver_reports) for k, c in enumerate(rep.cost_history)]
    io.write_csv(out / "solver.csv", ["solve", "iteration", "cost"], rows)
    rows = []
    for cl in res.last_clusters:
        for vid, p in zip(cl.vertex_ids, cl.positions):
            rows.append((cl.cluster_id, vid, float(p[0]), float(p[1])))
    io.write_csv(out / "clusters.csv", ["cluster", "vertex", "x", "y"], rows)
    return export["summary"]


# --------------------------------------------------------------------------- #
# eval
# --------------------------------------------------------------------------- #


def _read_timing(path: Path) -> dict[str, list[float]]:
    samples: dict[str, list[float]] = {m: [] for m in MODULES}
    for line in path.read_text().splitlines()[1:]:
        parts = line.split(",")
        samples.setdefault(parts[0], []).append(float(parts[2]) / 1e3)
    return samples


def cmd_eval(run_dir, truth_dir, out_dir=None) -> dict:
    run_dir, truth_dir = Path(run_dir), Path(truth_dir)
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    t_truth, truth = io.read_tum(_need(truth_dir / "truth.tum"))
    gt = _load_json_file(truth_dir / "ground_truth.json")
    scene = _load_json_file(truth_dir / "scene.json")
    t_est, est = io.read_tum(_need(run_dir / "trajectory.tum"))
    t_odo, odo = io.read_tum(_need(run_dir / "odometry_keyframes.tum"))
    export = _load_json_file(run_dir / "scene_graph.json")
    est_map = io.read_ply(_need(run_dir / "map.ply"))
    try:
        a = ate(t_est, est, t_truth, truth)
        a_odo = ate(t_odo, odo, t_truth, truth)
    except ValueError as e:
        raise InputError(str(e)) from None
    fp, *_ = scene_specs_from_dict(scene)
    m = map_rmse(est_map, wall_point_cloud(fp), cap=0.5) if len(est_map) else None
    pr = room_pr(export["rooms"], gt["rooms"], center_gate=1.5)
    ate_d = a.to_dict()
    ate_d["odometry_rmse"] = a_odo.rmse
    ate_d["improvement_pct"] = improvement_pct(a_odo.rmse, a.rmse) if a_odo.rmse > 0 else None
    io.dump_json(out / "ate.json", ate_d)
    io.dump_json(out / "map_rmse.json", m.to_dict() if m else {"rmse": None, "matched_fraction": 0.0, "defined": False})
    io.dump_json(out / "room_pr.json", pr.to_dict())
    timing_path = run_dir / "timing.csv"
    timing = timing_report(_read_timing(timing_path)) if timing_path.exists() else {}
    io.dump_json(out / "timing.json", timing)
    rows = [
        ("ate_rmse", a.rmse),
        ("ate_odometry_rmse", a_odo.rmse),
        ("map_rmse", m.rmse if m and m.defined else float("nan")),
        ("map_matched_fraction", m.matched_fraction if m else 0.0),
    ]
    for fam in ("four_wall", "two_wall", "overall"):
        rows.append((f"precision_{fam}", float(pr.precision[fam])))
        rows.append((f"recall_{fam}", float(pr.recall[fam])))
    for k, v in timing.items():
        rows.append((f"time_ms_{k}", v if isinstance(v, float) else float("nan")))
    io.write_csv(out / "metrics.csv", ["metric", "value"], rows)
    return dict(rows)


# --------------------------------------------------------------------------- #
# export-plot
# --------------------------------------------------------------------------- #


def cmd_export_plot(run_dir, out_dir=None) -> dict:
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "plot"
    out.mkdir(parents=True, exist_ok=True)
    export = _load_json_file(run_dir / "scene_graph.json")
    t_est, est = io.read_tum(_need(run_dir / "trajectory.tum"))
    _, odo = io.read_tum(_need(run_dir / "odometry_keyframes.tum"))
    rows = [
        (float(t), *(float(v) for v in p.translation), *(float(v) for v in q.translation))
        for t, p, q in zip(t_est, est, odo)
    ]
    io.write_csv(out / "trajectory.csv", ["t", "x", "y", "z", "odom_x", "odom_y", "odom_z"], rows)
    nodes = []
    for k in export["keyframes"]:
        nodes.append(("keyframe", k["id"], *(float(v) for v in k["pose"]["translation"][:2])))
    for w in export["walls"]:
        cp = -w["plane"]["distance"] * np.asarray(w["plane"]["normal"])
        nodes.append(("wall", w["id"], float(cp[0]), float(cp[1])))
    for r in export["rooms"]:
        nodes.append(("room", r["id"], float(r["center"][0]), float(r["center"][1])))
    for f in export["floors"]:
        nodes.append(("floor", f["id"], float(f["center"][0]), float(f["center"][1])))
    io.write_csv(out / "nodes.csv", ["layer", "id", "x", "y"], nodes)
    clusters = _need(run_dir / "clusters.csv").read_text()
    (out / "clusters.csv").write_text(clusters)
    (out / "residuals.csv").write_text(_need(run_dir / "solver.csv").read_text())
    n_clustered = max(len(clusters.strip().splitlines()) - 1, 0)
    return {"trajectory": len(rows), "nodes": len(nodes), "clustered_vertices": n_clustered}


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgraphs", description="Situational-graph SLAM on synthetic indoor scenes.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="generate a synthetic scene from a JSON description")
    g.add_argument("scene_file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    r = sub.add_parser("run", help="replay a generated scene through the pipeline")
    r.add_argument("scene_dir")
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--optimize-every", type=int)
    e = sub.add_parser("eval", help="score a run against the scene's ground truth")
    e.add_argument("run_dir")
    e.add_argument("truth_dir")
    e.add_argument("--out")
    x = sub.add_parser("export-plot", help="flatten a run into CSV series for plotting")
    x.add_argument("run_dir")
    x.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            summary = cmd_generate(args.scene_file, args.out, args.seed)
        elif args.command == "run":
            cfg = load_config(args.config, args.optimize_every, args.seed)
            summary = cmd_run(args.scene_dir, args.out, cfg)
        elif args.command == "eval":
            summary = cmd_eval(args.run_dir, args.truth_dir, args.out)
        else:
            summary = cmd_export_plot(args.run_dir, args.out)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (GaugeError, InformationError) as e:
        print(f"error: solver refused: {e}", file=sys.stderr)
        return EXIT_SOLVER
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
