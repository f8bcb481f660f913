"""Motion data model.

A clip holds, per frame, the root translation r and planar heading (the
trajectory), a 6D global orientation, and 6D local rotations for the joints
of a simplified stick skeleton. The 6D rotation encoding is the first two
columns of the rotation matrix, orthonormalized with Gram-Schmidt on decode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateRotationError, ValidationError
from .geometry import Aabb, point_box_distance

IDENTITY_ROT6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def rot6d_to_matrix(v) -> np.ndarray:
    """Gram-Schmidt a 6-vector (two matrix columns) into a rotation matrix."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    a, b = v[:3], v[3:]
    na = np.linalg.norm(a)
    if na < 1e-8:
        raise DegenerateRotationError(f"first column has near-zero norm {na:.2e}")
    c1 = a / na
    residual = b - (b @ c1) * c1
    nr = np.linalg.norm(residual)
    if nr < 1e-8:
        raise DegenerateRotationError(f"second column is near-parallel to the first (residual {nr:.2e})")
    c2 = residual / nr
    c3 = np.cross(c1, c2)
    return np.column_stack([c1, c2, c3])


def matrix_to_rot6d(R) -> np.ndarray:
    """First two columns of a rotation matrix (validated orthonormal, det +1)."""
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-4):
        raise ValidationError("matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > 1e-4:
        raise ValidationError(f"matrix determinant {np.linalg.det(R):.4f} is not +1")
    return np.concatenate([R[:, 0], R[:, 1]])


def yaw_to_rot6d(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([c, s, 0.0, -s, c, 0.0])


@dataclass
class Trajectory:
    """Per-frame root translations (N, 3) and planar unit headings (N, 2)."""

    root: np.ndarray
    heading: np.ndarray

    def __post_init__(self):
        self.root = np.asarray(self.root, dtype=np.float64).reshape(-1, 3)
        self.heading = np.asarray(self.heading, dtype=np.float64).reshape(-1, 2)
        if self.root.shape[0] < 1:
            raise ValidationError("trajectory needs at least one frame")
        if self.heading.shape[0] != self.root.shape[0]:
            raise ValidationError("root and heading frame counts disagree")
        norms = np.linalg.norm(self.heading, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValidationError("headings must be unit vectors (within 1e-4)")

    def __len__(self):
        return self.root.shape[0]

    def heading_angles(self) -> np.ndarray:
        return np.arctan2(self.heading[:, 1], self.heading[:, 0])


def normalize_headings(raw) -> np.ndarray:
    """Project raw (N, 2) vectors to unit headings; zero vectors become +x."""
    h = np.asarray(raw, dtype=np.float64).reshape(-1, 2)
    norms = np.linalg.norm(h, axis=1)
    degenerate = norms < 1e-8
    safe = np.where(degenerate, 1.0, norms)
    h = h / safe[:, None]
    h[degenerate] = (1.0, 0.0)
    return h


@dataclass
class MotionClip:
    """Trajectory plus per-frame global orientation (N, 6) and joint rotations (N, J, 6)."""

    trajectory: Trajectory
    global_orient: np.ndarray
    joint_rot: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        n = len(self.trajectory)
        self.global_orient = np.asarray(self.global_orient, dtype=np.float64).reshape(n, 6)
        self.joint_rot = np.asarray(self.joint_rot, dtype=np.float64)
        if self.joint_rot.ndim != 3 or self.joint_rot.shape[0] != n or self.joint_rot.shape[2] != 6:
            raise ValidationError(
                f"joint rotations must be (N, J, 6) with N={n}, got {self.joint_rot.shape}"
            )

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    @property
    def n_joints(self) -> int:
        return self.joint_rot.shape[1]


@dataclass(frozen=True)
class Skeleton:
    """Stick skeleton: parent index per joint (root = -1 at joint 0) and bone offsets."""

    parents: tuple
    offsets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64).reshape(len(self.parents), 3))
        if not np.all(np.isfinite(self.offsets)):
            raise ValidationError("bone offsets must be finite")
        if self.parents[0] != -1 or any(p == -1 for p in self.parents[1:]):
            raise ValidationError("exactly joint 0 must be the root (parent -1)")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValidationError(f"joint {j} has parent {p}; parents must precede children")

    @property
    def n_joints(self) -> int:
        return len(self.parents)


def default_skeleton() -> Skeleton:
    """Canonical 22-joint pelvis-rooted figure (z up, facing +x, arms along +/-y)."""
    parents = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]
    offsets = np.array([
        [0.00, 0.00, 0.00],    # 0  pelvis
        [0.00, 0.10, -0.06],   # 1  left hip
        [0.00, -0.10, -0.06],  # 2  right hip
        [0.00, 0.00, 0.12],    # 3  spine1
        [0.00, 0.00, -0.40],   # 4  left knee
        [0.00, 0.00, -0.40],   # 5  right knee
        [0.00, 0.00, 0.13],    # 6  spine2
        [0.00, 0.00, -0.42],   # 7  left ankle
        [0.00, 0.00, -0.42],   # 8  right ankle
        [0.00, 0.00, 0.13],    # 9  spine3
        [0.13, 0.00, -0.06],   # 10 left foot
        [0.13, 0.00, -0.06],   # 11 right foot
        [0.00, 0.00, 0.10],    # 12 neck
        [0.00, 0.08, 0.06],    # 13 left collar
        [0.00, -0.08, 0.06],   # 14 right collar
        [0.00, 0.00, 0.14],    # 15 head
        [0.00, 0.10, 0.00],    # 16 left shoulder
        [0.00, -0.10, 0.00],   # 17 right shoulder
        [0.00, 0.26, 0.00],    # 18 left elbow
        [0.00, -0.26, 0.00],   # 19 right elbow
        [0.00, 0.25, 0.00],    # 20 left wrist
        [0.00, -0.25, 0.00],   # 21 right wrist
    ])
    return Skeleton(parents, offsets)


def forward_kinematics(skel: Skeleton, clip: MotionClip, frame: int) -> np.ndarray:
    """Joint positions (J, 3) at one frame.

    The root pose comes from the trajectory and the global orientation; the
    root's slot in the joint-rotation array is unused.
    """
    if not 0 <= frame < clip.n_frames:
        raise ValidationError(f"frame {frame} out of range (clip has {clip.n_frames})")
    if clip.n_joints != skel.n_joints:
        raise ValidationError(f"clip has {clip.n_joints} joints but skeleton has {skel.n_joints}")
    positions = np.zeros((skel.n_joints, 3))
    rotations = np.zeros((skel.n_joints, 3, 3))
    positions[0] = clip.trajectory.root[frame]
    rotations[0] = rot6d_to_matrix(clip.global_orient[frame])
    for j in range(1, skel.n_joints):
        p = skel.parents[j]
        positions[j] = positions[p] + rotations[p] @ skel.offsets[j]
        rotations[j] = rotations[p] @ rot6d_to_matrix(clip.joint_rot[frame, j])
    return positions


def goal_distance(clip: MotionClip, skel: Skeleton, target: Aabb) -> float:
    """Distance from the final-frame pelvis (root) to the target box; 0 inside."""
    if clip.n_frames < 1:
        raise ValidationError("clip must have at least one frame")
    pelvis = clip.trajectory.root[-1]
    return point_box_distance(pelvis, target)


# ---------------------------------------------------------------------------
# clip files: one JSON header line, then little-endian float32 blocks


def save_motion_clip(clip: MotionClip, path):
    """Write header {"N","J","fps"} + [r | heading | global orient | joint rot] blocks."""
    path = Path(path)
    header = json.dumps(
        {"N": clip.n_frames, "J": clip.n_joints, "fps": clip.fps}, sort_keys=True
    )
    blocks = [
        clip.trajectory.root,
        clip.trajectory.heading,
        clip.global_orient,
        clip.joint_rot,
    ]
    payload = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blocks)
    path.write_bytes(header.encode() + b"\n" + payload)


def load_motion_clip(path) -> MotionClip:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode())
    n, j, fps = int(header["N"]), int(header["J"]), float(header["fps"])
    data = np.frombuffer(raw[newline + 1:], dtype="<f4").astype(np.float64)
    expected = n * 3 + n * 2 + n * 6 + n * j * 6
    if data.shape[0] != expected:
        raise ValidationError(f"clip payload holds {data.shape[0]} floats, expected {expected}")
    cursor = 0

    def take(count, shape):
        nonlocal cursor
        block = data[cursor:cursor + count].reshape(shape)
        cursor += count
        return block

    root = take(n * 3, (n, 3))
    heading = take(n * 2, (n, 2))
    global_orient = take(n * 6, (n, 6))
    joint_rot = take(n * j * 6, (n, j, 6))
    # float32 storage can nudge heading norms; renormalize on load
    return MotionClip(Trajectory(root, normalize_headings(heading)), global_orient, joint_rot, fps)
