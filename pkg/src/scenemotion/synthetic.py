"""Procedural scenes and scripted motions for desk-scale training and testing.

Every generated scene records its own ground truth (which object the
utterance refers to), so the generator doubles as the oracle for grounding
accuracy. Scenes are boxes on a floor plane; clouds are sampled from box
surfaces with outward normals; trajectories walk from a random start to the
target box center.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
from pathlib import Path

import numpy as np

from .errors import SceneMotionError, UnsatisfiableError, GroundingImpossibleError
from .geometry import Aabb
from .grounding import ParsedInstruction, Action, ground_symbolic, render_instruction
from .motion import MotionClip, Trajectory, default_skeleton, yaw_to_rot6d, matrix_to_rot6d
from .scene import DetectedObject, PointCloud, RelationParams, SceneGraph, SpatialRelation, build_scene_graph
from .sensors import PointCloudIndex, SensorParams, build_environment_sensor, build_target_sensor, build_trajectory_sensor
from .diffusion import ConditionSet, text_embed

TARGET_CATEGORIES = ["chair", "table", "sofa", "bed", "stool"]
ANCHOR_CATEGORIES = ["desk", "board", "end table", "nightstand", "bookshelf", "cabinet", "lamp"]
FILLER_CATEGORIES = ["plant", "bin", "monitor", "rug"]

ROOM_HALF = 3.0


@dataclass
class SyntheticScene:
    objects: list
    graph: SceneGraph
    utterance: str
    parsed: ParsedInstruction
    target_id: int
    relation_params: RelationParams

    @property
    def target_box(self) -> Aabb:
        return self.graph.node_by_id(self.target_id).box

    @property
    def target_center(self) -> np.ndarray:
        return self.target_box.center


def _random_box(rng, xy, max_half_z: float = 0.5) -> Aabb:
    half = np.array([
        rng.uniform(0.15, 0.45),
        rng.uniform(0.15, 0.45),
        rng.uniform(0.2, max_half_z),
    ])
    center = np.array([xy[0], xy[1], half[2]])  # resting on the floor
    return Aabb(center, half)


def _random_point(rng, margin: float = 0.5) -> np.ndarray:
    return rng.uniform(-ROOM_HALF + margin, ROOM_HALF - margin, size=2)


def _try_make_scene(rng, params: RelationParams, relation, action) -> SyntheticScene | None:
    target_cat = TARGET_CATEGORIES[rng.integers(len(TARGET_CATEGORIES))]
    placements = []  # (category, xy)

    if relation is None:
        placements.append((target_cat, _random_point(rng)))
        anchors = []
    elif relation is SpatialRelation.NEAR:
        anchor_cat = ANCHOR_CATEGORIES[rng.integers(len(ANCHOR_CATEGORIES))]
        anchors = [anchor_cat]
        p_anchor = _random_point(rng)
        angle = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(0.35, 0.9 * params.near_threshold)
        placements.append((anchor_cat, p_anchor))
        placements.append((target_cat, p_anchor + offset * np.array([np.cos(angle), np.sin(angle)])))
        for _ in range(int(rng.integers(1, 3))):  # decoys, kept out of the near band
            for _ in range(20):
                p = _random_point(rng)
                if np.linalg.norm(p - p_anchor) > params.near_threshold * 1.1:
                    placements.append((target_cat, p))
                    break
    elif relation is SpatialRelation.FAR:
        anchor_cat = ANCHOR_CATEGORIES[rng.integers(len(ANCHOR_CATEGORIES))]
        anchors = [anchor_cat]
        p_anchor = np.array([-ROOM_HALF + 0.6, -ROOM_HALF + 0.6]) + rng.uniform(0, 0.3, size=2)
        p_target = np.array([ROOM_HALF - 0.6, ROOM_HALF - 0.6]) - rng.uniform(0, 0.3, size=2)
        placements.append((anchor_cat, p_anchor))
        placements.append((target_cat, p_target))
        for _ in range(int(rng.integers(1, 3))):  # decoys must stay within far_threshold
            angle = rng.uniform(0, 2 * np.pi)
            radius = rng.uniform(0.4, 0.9 * params.far_threshold)
            p = p_anchor + radius * np.array([np.cos(angle), np.sin(angle)])
            p = np.clip(p, -ROOM_HALF + 0.5, ROOM_HALF - 0.5)
            if np.linalg.norm(p - p_anchor) < params.far_threshold * 0.95:
                placements.append((target_cat, p))
    elif relation is SpatialRelation.BETWEEN:
        pair = rng.choice(len(ANCHOR_CATEGORIES), size=2, replace=False)
        anchors = [ANCHOR_CATEGORIES[pair[0]], ANCHOR_CATEGORIES[pair[1]]]
        mid = _random_point(rng, margin=1.6)
        direction = rng.uniform(0, 2 * np.pi)
        axis = np.array([np.cos(direction), np.sin(direction)])
        half_span = rng.uniform(1.0, 1.4)
        p_a1 = mid - half_span * axis
        p_a2 = mid + half_span * axis
        lateral = np.array([-axis[1], axis[0]])
        p_target = mid + rng.uniform(-0.3, 0.3) * axis + rng.uniform(-0.3, 0.3) * lateral
        placements.append((anchors[0], p_a1))
        placements.append((anchors[1], p_a2))
        placements.append((target_cat, p_target))
        for _ in range(int(rng.integers(1, 3))):  # decoys far off the anchor axis
            shift = rng.uniform(params.between_lateral_max + 0.4, params.between_lateral_max + 1.2)
            side = 1.0 if rng.random() < 0.5 else -1.0
            along = rng.uniform(-half_span, half_span)
            p = np.clip(mid + along * axis + side * shift * lateral, -ROOM_HALF + 0.4, ROOM_HALF - 0.4)
            placements.append((target_cat, p))
    else:
        raise SceneMotionError(f"generator does not script relation {relation}")

    used = {target_cat, *anchors}
    fillers = [c for c in FILLER_CATEGORIES if c not in used]
    for _ in range(int(rng.integers(1, 3))):
        if not fillers:
            break
        cat = fillers.pop(int(rng.integers(len(fillers))))
        placements.append((cat, _random_point(rng)))

    # minimum spacing so boxes stay distinguishable
    points = [xy for _, xy in placements]
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            if np.linalg.norm(points[i] - points[j]) < 0.35:
                return None

    ids = rng.permutation(len(placements))
    objects = [
        DetectedObject(int(ids[k]), cat, _random_box(rng, xy))
        for k, (cat, xy) in enumerate(placements)
    ]
    target_pos = placements[1][1] if relation is SpatialRelation.NEAR else None
    if relation is None:
        target_index = 0
    elif relation is SpatialRelation.BETWEEN:
        target_index = 2
    elif relation is SpatialRelation.NEAR or relation is SpatialRelation.FAR:
        target_index = 1
    target_id = int(ids[target_index])

    parsed = ParsedInstruction(action, target_cat, relation, anchors)
    graph = build_scene_graph(objects, params)
    try:
        resolved = ground_symbolic(graph, parsed)
    except (UnsatisfiableError, GroundingImpossibleError):
        return None
    if resolved.object_id != target_id:
        return None  # placement noise made the description ambiguous; retry
    return SyntheticScene(objects, graph, render_instruction(parsed), parsed, target_id, params)


def make_scene(rng, params: RelationParams = RelationParams(), relation="random",
               action=None) -> SyntheticScene:
    """Procedural scene whose utterance provably grounds to the recorded target id."""
    if relation == "random":
        choices = [None, SpatialRelation.NEAR, SpatialRelation.FAR, SpatialRelation.BETWEEN]
        relation = choices[rng.integers(len(choices))]
    if action is None:
        action = list(Action)[rng.integers(len(Action))]
    for _ in range(200):
        scene = _try_make_scene(rng, params, relation, action)
        if scene is not None:
            return scene
    raise SceneMotionError("scene generator failed to place a satisfiable scene in 200 tries")


# ---------------------------------------------------------------------------
# point clouds


def box_surface_points(box: Aabb, n: int, rng):
    """n points uniform over the box faces with outward normals."""
    h = box.half_extents
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    positions = np.empty((n, 3))
    normals = np.zeros((n, 3))
    for f in range(6):
        rows = face == f
        axis, sign = divmod(f, 2)
        sign = 1.0 if sign == 0 else -1.0
        others = [k for k in range(3) if k != axis]
        positions[rows, axis] = sign * h[axis]
        positions[rows, others[0]] = uv[rows, 0] * h[others[0]]
        positions[rows, others[1]] = uv[rows, 1] * h[others[1]]
        normals[rows, axis] = sign
    return positions + box.center, normals


def scene_point_cloud(objects, rng, points_per_object: int = 300,
                      floor_points: int = 1500, floor_half: float = ROOM_HALF + 0.5) -> PointCloud:
    positions = [rng.uniform(-floor_half, floor_half, size=(floor_points, 2))]
    positions[0] = np.column_stack([positions[0], np.zeros(floor_points)])
    normals = [np.tile([0.0, 0.0, 1.0], (floor_points, 1))]
    for obj in objects:
        p, n = box_surface_points(obj.box, points_per_object, rng)
        positions.append(p)
        normals.append(n)
    return PointCloud(np.concatenate(positions), np.concatenate(normals))


def write_ply(cloud: PointCloud, path):
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        "end_header",
    ]
    rows = np.concatenate([cloud.positions, cloud.normals], axis=1)
    lines += [" ".join(repr(float(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_detections(objects, path):
    payload = [
        {
            "id": o.id,
            "category": o.category,
            "center": [float(v) for v in o.box.center],
            "size": [float(v) for v in o.box.size],
        }
        for o in sorted(objects, key=lambda o: o.id)
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def write_scene_files(scene: SyntheticScene, cloud: PointCloud, directory, stem: str = "scene"):
    """Write <stem>.ply and <stem>.json under directory; returns the two paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cloud_path = directory / f"{stem}.ply"
    det_path = directory / f"{stem}.json"
    write_ply(cloud, cloud_path)
    write_detections(scene.objects, det_path)
    return cloud_path, det_path


# ---------------------------------------------------------------------------
# scripted motions


PELVIS_HEIGHT = 0.9


def walk_trajectory(start_xy, goal, n_frames: int) -> Trajectory:
    """Straight walk from (start_xy, pelvis height) to the goal point."""
    start = np.array([start_xy[0], start_xy[1], PELVIS_HEIGHT])
    goal = np.asarray(goal, dtype=np.float64).reshape(3)
    s = np.linspace(0.0, 1.0, n_frames)[:, None]
    root = start + s * (goal - start)
    direction = goal[:2] - start[:2]
    norm = np.linalg.norm(direction)
    heading_vec = direction / norm if norm > 1e-9 else np.array([1.0, 0.0])
    heading = np.tile(heading_vec, (n_frames, 1))
    return Trajectory(root, heading)


def _rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def scripted_clip(trajectory: Trajectory, n_joints: int, rng) -> MotionClip:
    """Walk-like clip: global orientation follows the heading, knees swing gently."""
    n = len(trajectory)
    yaw = trajectory.heading_angles()
    global_orient = np.stack([yaw_to_rot6d(a) for a in yaw])
    joint_rot = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (n, n_joints, 1))
    phase = rng.uniform(0, 2 * np.pi)
    swing = 0.25 * np.sin(2 * np.pi * np.arange(n) / max(n, 2) * 2 + phase)
    for frame in range(n):
        for joint, sign in ((4, 1.0), (5, -1.0)):  # left/right knee
            if joint < n_joints:
                joint_rot[frame, joint] = matrix_to_rot6d(_rot_y(sign * swing[frame]))
    return MotionClip(trajectory, global_orient, joint_rot)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SyntheticSample:
    scene: SyntheticScene
    cloud: PointCloud
    trajectory: Trajectory
    clip: MotionClip
    traj_x0: np.ndarray        # (N, 5) object-frame [r | heading]
    motion_x0: np.ndarray      # (N, 6 + 6J)
    traj_cond: ConditionSet
    motion_cond: ConditionSet


def trajectory_to_x0(trajectory: Trajectory, c_o) -> np.ndarray:
    root_obj = trajectory.root - np.asarray(c_o, dtype=np.float64)
    return np.concatenate([root_obj, trajectory.heading], axis=1)


def clip_to_motion_x0(clip: MotionClip) -> np.ndarray:
    return np.concatenate(
        [clip.global_orient, clip.joint_rot.reshape(clip.n_frames, -1)], axis=1
    )


def make_sample(rng, n_frames: int = 16, text_dim: int = 32,
                sensor_params: SensorParams = SensorParams(),
                relation_params: RelationParams = RelationParams(),
                relation="random", n_joints: int | None = None) -> SyntheticSample:
    if n_joints is None:
        n_joints = default_skeleton().n_joints
    scene = make_scene(rng, relation_params, relation=relation, action=Action.WALK)
    cloud = scene_point_cloud(scene.objects, rng)
    c_o = scene.target_center

    for _ in range(50):
        start = _random_point(rng, margin=0.4)
        if np.linalg.norm(start - c_o[:2]) > 1.2:
            break
    trajectory = walk_trajectory(start, c_o, n_frames)
    clip = scripted_clip(trajectory, n_joints, rng)

    index = PointCloudIndex(cloud)
    env = build_environment_sensor(cloud, c_o, sensor_params, index=index)
    target = build_target_sensor(cloud, scene.target_box, sensor_params)
    text = text_embed(scene.utterance, "hashed", dim=text_dim)
    traj_cond = ConditionSet(text, env.features, target.features)

    yaw = trajectory.heading_angles()
    traj_feats = np.stack([
        build_trajectory_sensor(cloud, trajectory.root[i], yaw[i], sensor_params, index=index).features
        for i in range(n_frames)
    ])
    motion_cond = ConditionSet(text, env.features, target.features, traj_feats)

    return SyntheticSample(
        scene, cloud, trajectory, clip,
        trajectory_to_x0(trajectory, c_o), clip_to_motion_x0(clip),
        traj_cond, motion_cond,
    )


def make_walk_dataset(n_items: int, seed: int, n_frames: int = 16, text_dim: int = 32,
                      sensor_params: SensorParams = SensorParams(),
                      n_joints: int | None = None):
    """(trajectory items, motion items, samples) for desk-scale training."""
    rng = np.random.default_rng(seed)
    samples = [
        make_sample(rng, n_frames=n_frames, text_dim=text_dim,
                    sensor_params=sensor_params, n_joints=n_joints)
        for _ in range(n_items)
    ]
    traj_items = [(s.traj_x0, s.traj_cond) for s in samples]
    motion_items = [(s.motion_x0, s.motion_cond) for s in samples]
    return traj_items, motion_items, samples
