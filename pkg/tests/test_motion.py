import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from scenemotion.errors import DegenerateRotationError, ValidationError
from scenemotion.geometry import Aabb
from scenemotion.motion import (
    IDENTITY_ROT6D,
    MotionClip,
    Skeleton,
    Trajectory,
    default_skeleton,
    forward_kinematics,
    goal_distance,
    load_motion_clip,
    matrix_to_rot6d,
    normalize_headings,
    rot6d_to_matrix,
    save_motion_clip,
    yaw_to_rot6d,
)


# ---------------------------------------------------------------------------
# 6D rotations


def test_rot6d_identity():
    np.testing.assert_allclose(rot6d_to_matrix((1, 0, 0, 0, 1, 0)), np.eye(3))


def test_rot6d_scale_invariance():
    np.testing.assert_allclose(rot6d_to_matrix((2, 0, 0, 0, 3, 0)), np.eye(3))
    v = np.array([0.3, -0.7, 0.2, 0.5, 0.1, -0.9])
    np.testing.assert_allclose(rot6d_to_matrix(v), rot6d_to_matrix(4.2 * v), atol=1e-6)


def test_rot6d_roundtrip_against_scipy_rotations():
    rotations = Rotation.random(1000, random_state=7).as_matrix()
    for R in rotations:
        back = rot6d_to_matrix(matrix_to_rot6d(R))
        assert np.linalg.norm(back - R) < 1e-6  # Frobenius


def test_rot6d_outputs_orthonormal_det_one(rng):
    for _ in range(200):
        v = rng.normal(size=6)
        R = rot6d_to_matrix(v)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-6)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-6)


def test_rot6d_degenerate_inputs():
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix((0, 0, 0, 0, 1, 0))
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix((1, 0, 0, 2, 0, 0))  # parallel columns


def test_matrix_to_rot6d_reads_columns():
    np.testing.assert_allclose(matrix_to_rot6d(np.eye(3)), IDENTITY_ROT6D)
    yaw90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(matrix_to_rot6d(yaw90), [0, 1, 0, -1, 0, 0], atol=1e-12)


def test_matrix_to_rot6d_rejects_reflection():
    reflection = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValidationError):
        matrix_to_rot6d(reflection)


# ---------------------------------------------------------------------------
# trajectory and clip containers


def test_trajectory_requires_unit_headings():
    with pytest.raises(ValidationError):
        Trajectory(np.zeros((2, 3)), np.array([[1.0, 0.0], [0.5, 0.5]]))


def test_normalize_headings_zero_fallback():
    h = normalize_headings(np.array([[0.0, 0.0], [0.0, 3.0]]))
    np.testing.assert_allclose(h, [[1, 0], [0, 1]])


def _chain_skeleton():
    return Skeleton([-1, 0, 1], [[0, 0, 0], [0, 0, 0.5], [0, 0, 0.4]])


def _clip(traj, global_orient, joint_rot):
    return MotionClip(traj, global_orient, joint_rot)


def test_skeleton_validation():
    with pytest.raises(ValidationError):
        Skeleton([0, 0], np.zeros((2, 3)))  # joint 0 must be root
    with pytest.raises(ValidationError):
        Skeleton([-1, 1], np.zeros((2, 3)))  # parent after child


def test_default_skeleton_shape():
    skel = default_skeleton()
    assert skel.n_joints == 22
    assert skel.parents[0] == -1


# ---------------------------------------------------------------------------
# forward kinematics


def test_fk_rest_pose_cumulative_offsets():
    skel = _chain_skeleton()
    n = 1
    traj = Trajectory(np.zeros((n, 3)), np.tile([1.0, 0.0], (n, 1)))
    clip = _clip(traj, np.tile(IDENTITY_ROT6D, (n, 1)), np.tile(IDENTITY_ROT6D, (n, 3, 1)))
    joints = forward_kinematics(skel, clip, 0)
    np.testing.assert_allclose(joints, [[0, 0, 0], [0, 0, 0.5], [0, 0, 0.9]], atol=1e-12)


def test_fk_rigid_translation():
    skel = _chain_skeleton()
    traj = Trajectory(np.array([[1.0, 2.0, 3.0]]), np.array([[1.0, 0.0]]))
    clip = _clip(traj, np.tile(IDENTITY_ROT6D, (1, 1)), np.tile(IDENTITY_ROT6D, (1, 3, 1)))
    joints = forward_kinematics(skel, clip, 0)
    np.testing.assert_allclose(joints, np.array([[0, 0, 0], [0, 0, 0.5], [0, 0, 0.9]]) + [1, 2, 3])


def _fk_oracle(skel, root, root_rot, joint_mats):
    """Independent matrix-chain evaluation of the same kinematics."""
    positions = [np.asarray(root, dtype=float)]
    globals_ = [root_rot]
    for j in range(1, skel.n_joints):
        p = skel.parents[j]
        positions.append(positions[p] + globals_[p] @ skel.offsets[j])
        globals_.append(globals_[p] @ joint_mats[j])
    return np.stack(positions)


def test_fk_matches_independent_chain(rng):
    skel = _chain_skeleton()
    for _ in range(20):
        root = rng.normal(size=3)
        rotations = Rotation.random(3, random_state=int(rng.integers(1 << 30))).as_matrix()
        traj = Trajectory(root[None], np.array([[1.0, 0.0]]))
        clip = _clip(
            traj,
            matrix_to_rot6d(rotations[0])[None],
            np.stack([matrix_to_rot6d(m) for m in rotations])[None],
        )
        ours = forward_kinematics(skel, clip, 0)
        # joint 0's slot in the rotation array is unused; root pose comes from the clip
        oracle = _fk_oracle(skel, root, rotations[0], rotations)
        np.testing.assert_allclose(ours, oracle, atol=1e-9)


def test_fk_yaw_equivariance(rng):
    skel = default_skeleton()
    n = 1
    joint_rot = np.tile(IDENTITY_ROT6D, (n, skel.n_joints, 1))
    root = np.array([[0.5, -0.3, 0.9]])
    base_clip = _clip(Trajectory(root, np.array([[1.0, 0.0]])),
                      np.tile(IDENTITY_ROT6D, (n, 1)), joint_rot)
    base = forward_kinematics(skel, base_clip, 0)
    angle = 1.1
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    spun_clip = _clip(Trajectory(root, np.array([[1.0, 0.0]])),
                      matrix_to_rot6d(R)[None], joint_rot)
    spun = forward_kinematics(skel, spun_clip, 0)
    expected = (base - root) @ R.T + root
    np.testing.assert_allclose(spun, expected, atol=1e-9)


def test_fk_frame_out_of_range():
    skel = _chain_skeleton()
    traj = Trajectory(np.zeros((1, 3)), np.array([[1.0, 0.0]]))
    clip = _clip(traj, np.tile(IDENTITY_ROT6D, (1, 1)), np.tile(IDENTITY_ROT6D, (1, 3, 1)))
    with pytest.raises(ValidationError):
        forward_kinematics(skel, clip, 1)


# ---------------------------------------------------------------------------
# goal distance


def _clip_with_final_root(position):
    traj = Trajectory(np.array([[0.0, 0, 0.9], list(position)]), np.tile([1.0, 0.0], (2, 1)))
    return _clip(traj, np.tile(IDENTITY_ROT6D, (2, 1)), np.tile(IDENTITY_ROT6D, (2, 3, 1)))


def test_goal_distance_inside_box_is_zero():
    clip = _clip_with_final_root([0.1, 0.0, 0.3])
    assert goal_distance(clip, _chain_skeleton(), Aabb((0, 0, 0.3), (0.5, 0.5, 0.5))) == 0.0


def test_goal_distance_point_to_unit_cube():
    clip = _clip_with_final_root([3.0, 0.0, 0.0])
    assert goal_distance(clip, _chain_skeleton(), Aabb((0, 0, 0), (0.5, 0.5, 0.5))) == pytest.approx(2.5)


def test_goal_distance_shrinking_box_limit():
    clip = _clip_with_final_root([0.7, -0.4, 0.9])
    box = Aabb((0.7, -0.4, 0.9), (1e-9, 1e-9, 1e-9))
    assert goal_distance(clip, _chain_skeleton(), box) == 0.0


def test_goal_distance_lipschitz(rng):
    skel = _chain_skeleton()
    box = Aabb((0, 0, 0.5), (0.4, 0.3, 0.5))
    for _ in range(100):
        p = rng.uniform(-2, 2, 3)
        q = p + rng.normal(scale=0.1, size=3)
        dp = goal_distance(_clip_with_final_root(p), skel, box)
        dq = goal_distance(_clip_with_final_root(q), skel, box)
        assert abs(dp - dq) <= np.linalg.norm(p - q) + 1e-12


# ---------------------------------------------------------------------------
# clip files


def test_clip_roundtrip(tmp_path, rng):
    n, j = 5, 4
    traj = Trajectory(rng.normal(size=(n, 3)), normalize_headings(rng.normal(size=(n, 2))))
    yaws = rng.uniform(0, 2 * np.pi, n)
    clip = MotionClip(traj, np.stack([yaw_to_rot6d(a) for a in yaws]),
                      rng.normal(size=(n, j, 6)), fps=20.0)
    path = tmp_path / "clip.bin"
    save_motion_clip(clip, path)
    loaded = load_motion_clip(path)
    assert loaded.n_frames == n and loaded.n_joints == j and loaded.fps == 20.0
    np.testing.assert_allclose(loaded.trajectory.root, clip.trajectory.root, atol=1e-6)
    np.testing.assert_allclose(loaded.trajectory.heading, clip.trajectory.heading, atol=1e-6)
    np.testing.assert_allclose(loaded.global_orient, clip.global_orient, atol=1e-6)
    np.testing.assert_allclose(loaded.joint_rot, clip.joint_rot, atol=1e-6)


def test_clip_save_is_deterministic(tmp_path, rng):
    n, j = 3, 2
    traj = Trajectory(rng.normal(size=(n, 3)), np.tile([0.0, 1.0], (n, 1)))
    clip = MotionClip(traj, np.tile(IDENTITY_ROT6D, (n, 1)), np.tile(IDENTITY_ROT6D, (n, j, 1)))
    save_motion_clip(clip, tmp_path / "a.bin")
    save_motion_clip(clip, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_clip_truncated_payload_rejected(tmp_path):
    traj = Trajectory(np.zeros((2, 3)), np.tile([1.0, 0.0], (2, 1)))
    clip = MotionClip(traj, np.tile(IDENTITY_ROT6D, (2, 1)), np.tile(IDENTITY_ROT6D, (2, 2, 1)))
    path = tmp_path / "clip.bin"
    save_motion_clip(clip, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValidationError):
        load_motion_clip(path)
