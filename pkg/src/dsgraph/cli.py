"""Command line entry points.

Subcommands:
  simulate   render a scenario script into an RGB-D frame dataset
  map        build an object map + scene graph from a frame dataset
  update     fold a new frame dataset into an existing map
  plan       parse an instruction and ground its targets in a map
  eval       run scripted trial suites and report change/graph accuracy
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .adaptation import Keyframe, update_memory
from .features import StubEmbedder
from .harness import (LEVELS, HarnessConfig, generate_scenario,
                      report_to_json, run_suite)
from .objectmap import ObjectMap, associate_detections, integrate_frame, \
    load_map, save_map
from .planning import TargetQuery, parse_instruction, resolve_target
from .scenegraph import build_scene_graph, graph_from_json, graph_to_json
from .simworld import (RenderConfig, lift_detections, load_scenario,
                       read_frame_dataset, save_scenario, write_frame_dataset)

_LEVEL_ALIASES = {"minor": "minor_adjustment", "shift": "positional_shift",
                  "appearance": "appearance"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _override(obj, dotted: str, value):
    """Replace a (possibly nested) frozen-dataclass field along a dotted path."""
    head, _, rest = dotted.partition(".")
    if not hasattr(obj, head):
        raise SystemExit(f"unknown config field {dotted!r}")
    if rest:
        child = _override(getattr(obj, head), rest, value)
        return dataclasses.replace(obj, **{head: child})
    current = getattr(obj, head)
    if isinstance(current, tuple) and isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return dataclasses.replace(obj, **{head: value})


def _build_config(args) -> HarnessConfig:
    cfg = HarnessConfig()
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
        for key, val in data.items():
            if isinstance(val, dict):
                for leaf, leaf_val in val.items():
                    cfg = _override(cfg, f"{key}.{leaf}", leaf_val)
            else:
                cfg = _override(cfg, key, val)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        cfg = _override(cfg, key.strip(), _parse_value(val.strip()))
    return cfg


def _add_config_args(p):
    p.add_argument("--config", help="JSON file of config overrides")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. "
                        "map_params.sim_threshold=0.8 (repeatable)")


def _cmd_simulate(args) -> int:
    cfg = _build_config(args)
    if args.scenario:
        script = load_scenario(args.scenario)
    else:
        level = _LEVEL_ALIASES.get(args.level, args.level)
        script = generate_scenario(level, args.seed, cfg)
        if args.save_scenario:
            save_scenario(script, args.save_scenario)
            print(f"wrote scenario to {args.save_scenario}")
    render = RenderConfig(max_range=cfg.max_range,
                          min_mask_pixels=cfg.min_mask_pixels,
                          depth_noise_sigma=args.depth_noise)
    write_frame_dataset(script, args.out, render)
    n = len(script.trajectory)
    print(f"rendered {n} frames of '{script.name}' into {args.out}")
    return 0


def _map_from_dataset(dataset_dir, cfg: HarnessConfig):
    intr, frames, id_to_label = read_frame_dataset(dataset_dir)
    embedder = StubEmbedder(dim=cfg.map_params.feature_dim)
    omap = ObjectMap(cfg.map_params)
    keyframes = []
    for fr in frames:
        dets = lift_detections(fr["depth"], fr["labels"], fr["color"],
                               fr["pose"], intr, id_to_label, embedder,
                               cfg.map_params, cfg.min_mask_pixels)
        integrate_frame(omap, dets, associate_detections(dets, omap))
        keyframes.append(Keyframe(fr["index"], fr["pose"]))
    return intr, frames, omap, keyframes


def _write_map_bundle(out_dir, omap, graph, keyframes):
    out = Path(out_dir)
    save_map(omap, out)
    (out / "graph.json").write_text(graph_to_json(graph, omap.nodes))
    (out / "keyframes.json").write_text(json.dumps(
        [{"index": kf.index,
          "pose": [[float(x) for x in row] for row in kf.pose.matrix()]}
         for kf in keyframes], indent=2))


def _cmd_map(args) -> int:
    cfg = _build_config(args)
    _, _, omap, keyframes = _map_from_dataset(args.dataset, cfg)
    graph = build_scene_graph(omap.nodes, cfg.relation_params)
    _write_map_bundle(args.out, omap, graph, keyframes)
    print(f"mapped {len(omap)} objects, {len(graph.edges)} relations "
          f"-> {args.out}")
    return 0


def _cmd_update(args) -> int:
    from .geometry import Pose
    from .adaptation import Frame

    cfg = _build_config(args)
    map_dir = Path(args.map)
    omap = load_map(map_dir, cfg.map_params)
    graph = graph_from_json((map_dir / "graph.json").read_text())
    keyframes = [Keyframe(e["index"], Pose.from_matrix(np.array(e["pose"])))
                 for e in json.loads((map_dir / "keyframes.json").read_text())]

    intr, frames, id_to_label = read_frame_dataset(args.frames)
    embedder = StubEmbedder(dim=cfg.map_params.feature_dim)
    observations = []
    for fr in frames:
        dets = lift_detections(fr["depth"], fr["labels"], fr["color"],
                               fr["pose"], intr, id_to_label, embedder,
                               cfg.map_params, cfg.min_mask_pixels)
        observations.append((Frame(fr["color"], fr["depth"], fr["pose"]),
                             dets))
    report = update_memory(omap, graph, observations, intr, cfg.thresholds,
                           cfg.relation_params)
    out = Path(args.out or args.map)
    new_keyframes = keyframes + [Keyframe(fr["index"], fr["pose"])
                                 for fr in frames]
    _write_map_bundle(out, omap, report.new_graph, new_keyframes)
    summary = {
        "voxels_deleted": {str(k): v for k, v in
                           sorted(report.deleted_per_node.items())},
        "nodes_added": report.nodes_added,
        "nodes_removed": report.nodes_removed,
        "edges_changed": [list(map(str, e)) for e in report.edges_changed],
        "points_integrated": report.points_integrated,
    }
    (out / "change_report.json").write_text(json.dumps(summary, indent=2))
    print(f"update: +{len(report.nodes_added)} nodes, "
          f"-{len(report.nodes_removed)} nodes, "
          f"{len(report.edges_changed)} edge changes -> {out}")
    return 0


def _cmd_plan(args) -> int:
    cfg = _build_config(args)
    subtasks = parse_instruction(args.instruction)
    out = {"instruction": args.instruction,
           "subtasks": [{"action": s.action, "objects": list(s.object_names)}
                        for s in subtasks]}
    if args.map:
        omap = load_map(Path(args.map), cfg.map_params)
        embedder = StubEmbedder(dim=cfg.map_params.feature_dim)
        groundings = {}
        for s in subtasks:
            for name in s.object_names:
                if name in groundings:
                    continue
                res = resolve_target(TargetQuery(name), omap, embedder)
                groundings[name] = {
                    "node": res.node_id,
                    "centroid": [round(float(c), 4) for c in res.centroid],
                    "score": round(res.score, 4),
                }
        out["groundings"] = groundings
    print(json.dumps(out, indent=2))
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    levels = []
    for name in args.levels.split(","):
        name = _LEVEL_ALIASES.get(name.strip(), name.strip())
        if name not in LEVELS:
            raise SystemExit(f"unknown level {name!r}; choose from {LEVELS}")
        levels.append(name)
    reports, summary = run_suite(levels, args.trials, cfg,
                                 base_seed=args.seed)
    for r in reports:
        print(f"  {r.name}: change={'ok' if r.change['detected'] else 'MISS'} "
              f"graph={'ok' if r.sga['match'] else 'MISS'} "
              f"({r.timings['total']:.1f}s)")
    print(f"SCDA {summary['scda']:.3f}  SGA {summary['sga']:.3f}  "
          f"task success {summary['task_success']:.3f}  "
          f"({summary['trials']} trials, {summary['total_seconds']:.0f}s)")
    if args.report:
        Path(args.report).write_text(report_to_json(reports, summary))
        print(f"wrote report to {args.report}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dsgraph",
        description="dynamic object-centric scene memory tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scenario to RGB-D frames")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--level", default="minor_adjustment",
                   help="generate a scenario of this level instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-scenario", help="also write the generated scenario")
    p.add_argument("--depth-noise", type=float, default=0.0,
                   help="gaussian depth noise sigma in meters")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_config_args(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("map", help="build a map from a frame dataset")
    p.add_argument("dataset", help="frame dataset directory")
    p.add_argument("--out", required=True, help="output map directory")
    _add_config_args(p)
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("update", help="fold new frames into an existing map")
    p.add_argument("map", help="existing map directory")
    p.add_argument("frames", help="new frame dataset directory")
    p.add_argument("--out", help="output map directory (default: in place)")
    _add_config_args(p)
    p.set_defaults(func=_cmd_update)

    p = sub.add_parser("plan", help="parse an instruction against a map")
    p.add_argument("instruction")
    p.add_argument("--map", help="map directory for grounding")
    _add_config_args(p)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("eval", help="run scripted trial suites")
    p.add_argument("--levels", default=",".join(LEVELS))
    p.add_argument("--trials", type=int, default=3,
                   help="trials per level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write full JSON report here")
    _add_config_args(p)
    p.set_defaults(func=_cmd_eval)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
