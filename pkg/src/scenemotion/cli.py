"""Command-line interface.

Subcommands: build-graph, ground, sensors, train-traj, train-motion,
generate, eval. Each reads an optional TOML config plus --section.key=value
overrides, writes its artifacts, and drops a JSON run manifest next to them.
Operational failures exit 1 with a structured JSON error on stderr; usage
errors exit 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import SceneMotionError
from .config import RunConfig, load_config
from .diffusion import DenoiserConfig, TrainConfig, build_model, make_schedule, save_checkpoint, train
from .geometry import Aabb
from .grounding import ground_llm, ground_symbolic, grounding_report, parse_instruction, RetryPolicy
from .pipeline import GenerationRequest, _build_client, eval_run, generate, replay
from .scene import build_scene_graph, load_detections, load_point_cloud, load_scene_graph, save_scene_graph, scene_graph_to_dict
from .sensors import PointCloudIndex, build_environment_sensor, build_target_sensor, save_sensor

_OVERRIDE_RE = re.compile(r"^--(scene|grounding|sensors|diffusion|eval)\.([A-Za-z0-9_]+)=(.*)$")


def _split_overrides(extras, parser):
    overrides = []
    for token in extras:
        m = _OVERRIDE_RE.match(token)
        if m is None:
            parser.error(f"unrecognized argument: {token}")
        overrides.append(f"{m.group(1)}.{m.group(2)}={m.group(3)}")
    return overrides


def _write_manifest(out_path, command: str, inputs: dict, params: dict, seed=None):
    manifest = {
        "command": command,
        "inputs": {
            name: {"path": str(p), "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
            for name, p in inputs.items()
        },
        "params": params,
        "seed": seed,
    }
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _load_graph_or_detections(path, relation_params):
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict) and "nodes" in raw:
        return load_scene_graph(path)
    return build_scene_graph(load_detections(path), relation_params)


def cmd_build_graph(args, config: RunConfig):
    detections_path = args.detections or config.scene.detections
    params = config.scene.relation_params()
    graph = build_scene_graph(load_detections(detections_path), params)
    save_scene_graph(graph, args.out, params)
    _write_manifest(args.out, "build-graph", {"detections": detections_path},
                    {"relation_params": scene_graph_to_dict(graph, params)["params"]})
    print(json.dumps({"out": str(args.out), "nodes": len(graph.nodes),
                      "edges": len(graph.binary_edges), "between": len(graph.between_edges)}))
    return 0


def cmd_ground(args, config: RunConfig):
    method = args.method or config.grounding.method
    graph = _load_graph_or_detections(args.scene, config.scene.relation_params())
    if method == "symbolic":
        result = ground_symbolic(graph, parse_instruction(args.text))
    elif method == "llm":
        req = GenerationRequest(
            cloud_path="", detections_path="", utterance=args.text,
            traj_checkpoint="", motion_checkpoint="", grounding_method="llm",
            llm_backend=config.grounding.backend, transcript_path=config.grounding.transcript,
            model=config.grounding.model, temperature=config.grounding.temperature,
        )
        client = _build_client(req, graph)
        policy = RetryPolicy(config.grounding.max_retries, config.grounding.fallback)
        result = ground_llm(graph, args.text, client, policy, config.grounding.few_shot)
    else:
        raise SceneMotionError(f"unknown grounding method {method!r}")
    report = grounding_report(args.text, result)
    print(json.dumps(report, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
        _write_manifest(args.out, "ground", {"scene": args.scene},
                        {"method": method, "text": args.text})
    return 0


def cmd_sensors(args, config: RunConfig):
    cloud_path = args.cloud or config.scene.cloud
    cloud = load_point_cloud(cloud_path)
    params = config.sensors.sensor_params()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = PointCloudIndex(cloud)
    written = {}
    if args.center:
        center = [float(v) for v in args.center.split(",")]
        env = build_environment_sensor(cloud, center, params, index=index)
        save_sensor(env, out_dir / "environment.f32")
        written["environment"] = str(out_dir / "environment.f32")
    if args.box:
        values = [float(v) for v in args.box.split(",")]
        if len(values) != 6:
            raise SceneMotionError("--box needs cx,cy,cz,sx,sy,sz")
        box = Aabb(values[:3], np.asarray(values[3:]) / 2.0)
        target = build_target_sensor(cloud, box, params)
        save_sensor(target, out_dir / "target.f32")
        written["target"] = str(out_dir / "target.f32")
        if "environment" not in written:
            env = build_environment_sensor(cloud, box.center, params, index=index)
            save_sensor(env, out_dir / "environment.f32")
            written["environment"] = str(out_dir / "environment.f32")
    if not written:
        raise SceneMotionError("sensors needs --center and/or --box")
    _write_manifest(out_dir / "sensors", "sensors", {"cloud": cloud_path},
                    {"center": args.center, "box": args.box, "sensor_params": {
                        "env_extent": params.env_extent, "traj_extent": params.traj_extent,
                        "nn_radius": params.nn_radius, "target_inflation": params.target_inflation}})
    print(json.dumps({"written": written}, sort_keys=True))
    return 0


def _train_command(args, config: RunConfig, mode: str):
    from .synthetic import make_walk_dataset

    d = config.diffusion
    torch.set_num_threads(1)
    skel_joints = d.n_joints
    traj_items, motion_items, _ = make_walk_dataset(
        d.data_items, d.data_seed, n_frames=d.n_frames, text_dim=d.text_dim,
        sensor_params=config.sensors.sensor_params(), n_joints=skel_joints,
    )
    frame_dim = 5 if mode == "trajectory" else 6 + 6 * skel_joints
    model_config = DenoiserConfig(
        mode=mode, frame_dim=frame_dim, token_dim=d.token_dim, layers=d.layers,
        heads=d.heads, ff_dim=d.ff_dim, max_frames=d.max_frames, text_dim=d.text_dim,
    )
    model = build_model(model_config, make_schedule(d.t_steps, d.schedule), seed=d.seed)
    items = traj_items if mode == "trajectory" else motion_items
    curve = train(model, items, TrainConfig(
        steps=d.steps, batch_size=d.batch_size, lr=d.lr, weight_decay=d.weight_decay,
        seed=d.seed, pretrain=d.pretrain,
    ))
    save_checkpoint(model, args.out)
    _write_manifest(args.out, f"train-{'traj' if mode == 'trajectory' else 'motion'}",
                    {}, {"diffusion": vars(d).copy()}, seed=d.seed)
    summary = {
        "out": str(args.out),
        "steps": d.steps,
        "final_loss": curve[-1] if curve else None,
        "first_loss": curve[0] if curve else None,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train_traj(args, config: RunConfig):
    return _train_command(args, config, "trajectory")


def cmd_train_motion(args, config: RunConfig):
    return _train_command(args, config, "motion")


def cmd_generate(args, config: RunConfig):
    if args.replay:
        result = replay(args.replay, out_dir=args.out)
        print(json.dumps(result.report, sort_keys=True))
        return 0
    d = config.diffusion
    seed = args.seed if args.seed is not None else d.seed
    if not args.text:
        raise SceneMotionError("generate needs --text")
    req = GenerationRequest(
        cloud_path=config.scene.cloud,
        detections_path=config.scene.detections,
        utterance=args.text,
        traj_checkpoint=d.traj_checkpoint,
        motion_checkpoint=d.motion_checkpoint,
        grounding_method=config.grounding.method,
        n_frames=d.n_frames,
        seed=seed,
        llm_backend=config.grounding.backend,
        transcript_path=config.grounding.transcript,
        model=config.grounding.model,
        temperature=config.grounding.temperature,
    )
    result = generate(req, config, out_dir=args.out)
    print(json.dumps(result.report, sort_keys=True))
    return 0


def cmd_eval(args, config: RunConfig):
    report = eval_run(
        args.pred, args.gt,
        diversity_pairs=config.eval.diversity_pairs,
        multimodality_pairs=config.eval.multimodality_pairs,
        seed=config.eval.seed,
    )
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text)
        _write_manifest(args.out, "eval", {}, {
            "pred": str(args.pred), "gt": str(args.gt),
            "diversity_pairs": config.eval.diversity_pairs,
            "multimodality_pairs": config.eval.multimodality_pairs,
            "seed": config.eval.seed,
        })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenemotion",
        description="Text-driven human motion generation in 3D scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML config path")

    p = sub.add_parser("build-graph", help="build a spatial scene graph from detections")
    common(p)
    p.add_argument("--detections", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("ground", help="resolve an instruction to a target object")
    common(p)
    p.add_argument("--scene", required=True, help="scene graph JSON or detections JSON")
    p.add_argument("--text", required=True)
    p.add_argument("--method", choices=["symbolic", "llm"], default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("sensors", help="dump environment/target sensors for a cloud")
    common(p)
    p.add_argument("--cloud", default=None)
    p.add_argument("--center", default=None, help="x,y,z environment sensor center")
    p.add_argument("--box", default=None, help="cx,cy,cz,sx,sy,sz target box")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sensors)

    p = sub.add_parser("train-traj", help="train the trajectory model on synthetic data")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_traj)

    p = sub.add_parser("train-motion", help="train the motion model on synthetic data")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_motion)

    p = sub.add_parser("generate", help="generate a motion clip for a scene and utterance")
    common(p)
    p.add_argument("--text", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--replay", default=None, help="re-run from a manifest")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score generated clips against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    overrides = _split_overrides(extras, parser)
    try:
        config = load_config(args.config, overrides)
        return args.func(args, config)
    except SceneMotionError as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
