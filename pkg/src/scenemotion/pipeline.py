"""End-to-end orchestration: ground, sense, sample trajectory, complete motion.

A generation run is a pure function of its inputs and seed whenever
grounding is symbolic or mocked; the run manifest records input hashes and
every parameter so a run can be replayed bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .geometry import Aabb, box_iou
from .grounding import (
    GraphAwareMockClient,
    RetryPolicy,
    ScriptedMockClient,
    HttpLlmClient,
    ground_llm,
    ground_symbolic,
    grounding_report,
    parse_instruction,
)
from .config import RunConfig, config_from_dict
from .diffusion import ConditionSet, ddpm_sample, load_checkpoint, text_embed
from .metrics import DEFAULT_FEATURE_EXTRACTOR, diversity, fid, motion_features, multimodality
from .motion import MotionClip, Trajectory, default_skeleton, goal_distance, load_motion_clip, normalize_headings, save_motion_clip
from .scene import build_scene_graph, load_detections, load_point_cloud
from .sensors import PointCloudIndex, build_environment_sensor, build_target_sensor, build_trajectory_sensor

MANIFEST_VERSION = 1


@dataclass
class GenerationRequest:
    cloud_path: str
    detections_path: str
    utterance: str
    traj_checkpoint: str
    motion_checkpoint: str
    grounding_method: str = "symbolic"   # symbolic | llm
    n_frames: int = 16
    seed: int = 0
    llm_backend: str = "graph-mock"      # graph-mock | scripted | http
    transcript_path: str = ""
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValidationError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.grounding_method not in ("symbolic", "llm"):
            raise ValidationError(f"unknown grounding method {self.grounding_method!r}")


@dataclass
class GenerateResult:
    clip: MotionClip
    grounding: object
    report: dict
    manifest: dict
    paths: dict


def _derive_seed(seed: int, stage: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{stage}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**31)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _build_client(req: GenerationRequest, graph):
    if req.llm_backend == "graph-mock":
        return GraphAwareMockClient(graph)
    if req.llm_backend == "scripted":
        if not req.transcript_path:
            raise ValidationError("scripted llm backend needs transcript_path")
        return ScriptedMockClient(req.transcript_path)
    if req.llm_backend == "http":
        return HttpLlmClient(model=req.model, temperature=req.temperature)
    raise ValidationError(f"unknown llm backend {req.llm_backend!r}")


def generate(req: GenerationRequest, config: RunConfig = None, client=None,
             out_dir=None) -> GenerateResult:
    """Run ground -> sensors -> trajectory -> trajectory sensors -> motion."""
    config = config if config is not None else RunConfig()
    torch.set_num_threads(1)  # run-to-run bitwise reproducibility
    relation_params = config.scene.relation_params()
    sensor_params = config.sensors.sensor_params()

    cloud = load_point_cloud(req.cloud_path)
    objects = load_detections(req.detections_path)
    graph = build_scene_graph(objects, relation_params)

    if req.grounding_method == "symbolic":
        grounding = ground_symbolic(graph, parse_instruction(req.utterance))
    else:
        if client is None:
            client = _build_client(req, graph)
        policy = RetryPolicy(config.grounding.max_retries, config.grounding.fallback)
        grounding = ground_llm(graph, req.utterance, client, policy, config.grounding.few_shot)

    traj_model = load_checkpoint(req.traj_checkpoint)
    motion_model = load_checkpoint(req.motion_checkpoint)
    if traj_model.mode != "trajectory":
        raise ValidationError(f"trajectory checkpoint has mode {traj_model.mode!r}")
    if motion_model.mode != "motion":
        raise ValidationError(f"motion checkpoint has mode {motion_model.mode!r}")
    if (motion_model.config.frame_dim - 6) % 6 != 0:
        raise ValidationError(
            f"motion frame dim {motion_model.config.frame_dim} is not 6 + 6J"
        )
    if traj_model.config.text_dim != motion_model.config.text_dim:
        raise ValidationError("trajectory and motion checkpoints disagree on text_dim")

    c_o = grounding.center
    index = PointCloudIndex(cloud)
    env = build_environment_sensor(cloud, c_o, sensor_params, index=index)
    target = build_target_sensor(cloud, grounding.box, sensor_params)
    table = config.diffusion.embeddings or None
    text = text_embed(req.utterance, config.diffusion.text_backend,
                      dim=traj_model.config.text_dim, table=table)

    traj_cond = ConditionSet(text, env.features, target.features)
    traj_x = ddpm_sample(traj_model, traj_cond, req.n_frames, _derive_seed(req.seed, "trajectory"))
    root = traj_x[:, :3].astype(np.float64) + c_o
    heading = normalize_headings(traj_x[:, 3:5])
    trajectory = Trajectory(root, heading)

    yaw = trajectory.heading_angles()
    traj_feats = np.stack([
        build_trajectory_sensor(cloud, root[i], yaw[i], sensor_params, index=index).features
        for i in range(req.n_frames)
    ])
    motion_cond = ConditionSet(text, env.features, target.features, traj_feats)
    motion_x = ddpm_sample(motion_model, motion_cond, req.n_frames, _derive_seed(req.seed, "motion"))
    n_joints = (motion_model.config.frame_dim - 6) // 6
    clip = MotionClip(trajectory, motion_x[:, :6], motion_x[:, 6:].reshape(req.n_frames, n_joints, 6))

    g_report = grounding_report(req.utterance, grounding)
    report = {
        "utterance": req.utterance,
        "n_frames": req.n_frames,
        "seed": req.seed,
        "grounding": g_report,
        "goal_dist_to_grounded_box": goal_distance(clip, default_skeleton(), grounding.box),
        "label": parse_instruction(req.utterance).action.value,
    }
    manifest = {
        "version": MANIFEST_VERSION,
        "inputs": {
            "cloud": {"path": str(req.cloud_path), "sha256": _sha256(req.cloud_path)},
            "detections": {"path": str(req.detections_path), "sha256": _sha256(req.detections_path)},
            "traj_checkpoint": {"path": str(req.traj_checkpoint), "sha256": _sha256(req.traj_checkpoint)},
            "motion_checkpoint": {"path": str(req.motion_checkpoint), "sha256": _sha256(req.motion_checkpoint)},
        },
        "request": {
            "utterance": req.utterance,
            "grounding_method": req.grounding_method,
            "n_frames": req.n_frames,
            "seed": req.seed,
            "llm_backend": req.llm_backend,
            "transcript_path": str(req.transcript_path),
            "model": req.model,
            "temperature": req.temperature,
        },
        "config": config.to_dict(),
    }

    paths = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths["clip"] = out_dir / "motion.clip"
        paths["grounding"] = out_dir / "grounding.json"
        paths["report"] = out_dir / "report.json"
        paths["manifest"] = out_dir / "manifest.json"
        save_motion_clip(clip, paths["clip"])
        paths["grounding"].write_text(json.dumps(g_report, indent=2, sort_keys=True))
        paths["report"].write_text(json.dumps(report, indent=2, sort_keys=True))
        paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return GenerateResult(clip, grounding, report, manifest, paths)


def replay(manifest_path, out_dir=None, client=None) -> GenerateResult:
    """Re-run a generation exactly as recorded; refuses if any input changed."""
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {manifest.get('version')!r}")
    inputs = manifest["inputs"]
    for name, entry in inputs.items():
        actual = _sha256(entry["path"])
        if actual != entry["sha256"]:
            raise ValidationError(
                f"input {name!r} at {entry['path']} changed since the original run "
                f"(sha256 {actual[:12]}... != recorded {entry['sha256'][:12]}...)"
            )
    request = manifest["request"]
    if request["grounding_method"] == "llm" and request["llm_backend"] == "http" and client is None:
        raise ValidationError("cannot replay an http-grounded run without a live client")
    req = GenerationRequest(
        cloud_path=inputs["cloud"]["path"],
        detections_path=inputs["detections"]["path"],
        utterance=request["utterance"],
        traj_checkpoint=inputs["traj_checkpoint"]["path"],
        motion_checkpoint=inputs["motion_checkpoint"]["path"],
        grounding_method=request["grounding_method"],
        n_frames=request["n_frames"],
        seed=request["seed"],
        llm_backend=request["llm_backend"],
        transcript_path=request["transcript_path"],
        model=request["model"],
        temperature=request["temperature"],
    )
    config = config_from_dict(manifest["config"])
    return generate(req, config, client=client, out_dir=out_dir)


# ---------------------------------------------------------------------------
# evaluation over directories of generated clips


def write_eval_sample(directory, name: str, clip: MotionClip, report: dict):
    """Prediction-side pair <name>.clip + <name>.json used by eval runs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_motion_clip(clip, directory / f"{name}.clip")
    (directory / f"{name}.json").write_text(json.dumps(report, indent=2, sort_keys=True))


def write_gt_sample(directory, name: str, clip: MotionClip, target_box: Aabb, label: str,
                    object_id: int):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_motion_clip(clip, directory / f"{name}.clip")
    meta = {
        "label": label,
        "object_id": object_id,
        "target": {
            "center": [float(v) for v in target_box.center],
            "size": [float(v) for v in target_box.size],
        },
    }
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def eval_run(pred_dir, gt_dir, diversity_pairs: int = 200, multimodality_pairs: int = 20,
             seed: int = 0) -> dict:
    """Compare prediction and ground-truth directories sample by sample.

    Expects matching <name>.clip / <name>.json pairs on both sides; the gt
    sidecar carries the target box and the condition label.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = sorted(p.stem for p in pred_dir.glob("*.clip"))
    names = [n for n in names if (gt_dir / f"{n}.clip").exists()]
    if len(names) < 2:
        raise ValidationError(f"need at least 2 matched samples, found {len(names)}")

    skel = default_skeleton()
    goal_dists, pred_feats, gt_feats, labels, hits, center_dists = [], [], [], [], [], []
    for name in names:
        clip = load_motion_clip(pred_dir / f"{name}.clip")
        pred_meta = json.loads((pred_dir / f"{name}.json").read_text())
        gt_clip = load_motion_clip(gt_dir / f"{name}.clip")
        gt_meta = json.loads((gt_dir / f"{name}.json").read_text())
        target = Aabb(gt_meta["target"]["center"], np.asarray(gt_meta["target"]["size"]) / 2.0)
        goal_dists.append(goal_distance(clip, skel, target))
        pred_feats.append(motion_features(clip))
        gt_feats.append(motion_features(gt_clip))
        labels.append(gt_meta["label"])
        g = pred_meta.get("grounding", pred_meta)
        pred_box = Aabb(g["center"], np.asarray(g["size"]) / 2.0)
        hit, center_dist = eval_grounding_box(pred_box, target)
        hits.append(hit)
        center_dists.append(center_dist)

    pred_feats = np.stack(pred_feats)
    gt_feats = np.stack(gt_feats)
    return {
        "n_samples": len(names),
        "goal_dist": {"mean": float(np.mean(goal_dists)), "values": [float(v) for v in goal_dists]},
        "fid": fid(pred_feats, gt_feats),
        "diversity": diversity(pred_feats, diversity_pairs, seed),
        "multimodality": multimodality(pred_feats, labels, multimodality_pairs, seed),
        "grounding": {
            "acc": float(np.mean(hits)),
            "center_dist": float(np.mean(center_dists)),
        },
        "feature_extractor": DEFAULT_FEATURE_EXTRACTOR,
        "params": {
            "diversity_pairs": diversity_pairs,
            "multimodality_pairs": multimodality_pairs,
            "seed": seed,
        },
    }


def eval_grounding_box(pred_box: Aabb, gt_box: Aabb):
    hit = box_iou(pred_box, gt_box) > 0.25
    return bool(hit), float(np.linalg.norm(pred_box.center - gt_box.center))
