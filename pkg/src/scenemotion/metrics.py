"""Evaluation metrics over motion feature sets.

Features are whatever the configured extractor yields per clip; the default
is the frame-averaged pose vector (global orientation plus flattened joint
rotations). FID fits a Gaussian to each set; diversity and multimodality
are seeded mean pairwise distances, overall and within condition labels.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import NumericError, ValidationError
from .motion import MotionClip

DEFAULT_FEATURE_EXTRACTOR = "frame_averaged_pose"


def motion_features(clip: MotionClip) -> np.ndarray:
    """Frame-averaged pose: mean over frames of [global orient | joint rotations]."""
    per_frame = np.concatenate(
        [clip.global_orient, clip.joint_rot.reshape(clip.n_frames, -1)], axis=1
    )
    return per_frame.mean(axis=0)


def _as_feature_matrix(feats, name):
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a (samples, dim) matrix, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValidationError(f"{name} needs at least 2 samples, got {arr.shape[0]}")
    return arr


def _sqrtm_trace(sigma_a, sigma_b):
    product = sigma_a @ sigma_b
    covmean, _ = linalg.sqrtm(product, disp=False)
    if not np.all(np.isfinite(covmean)):
        # regularize near-singular covariances and retry
        eps = 1e-9 * np.eye(sigma_a.shape[0])
        covmean, _ = linalg.sqrtm((sigma_a + eps) @ (sigma_b + eps), disp=False)
        if not np.all(np.isfinite(covmean)):
            raise NumericError("covariance square root failed even after regularization")
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(np.trace(covmean))


def fid(a, b) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = _as_feature_matrix(a, "first feature set")
    b = _as_feature_matrix(b, "second feature set")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature dims disagree: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.cov(a, rowvar=False)
    sigma_b = np.cov(b, rowvar=False)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b)) - 2.0 * _sqrtm_trace(sigma_a, sigma_b)
    # tiny negatives are numerical noise around zero
    return max(value, 0.0) if value > -1e-8 else value


def _seeded_pairs(n, count, rng):
    i = rng.integers(0, n, size=count)
    j = (i + 1 + rng.integers(0, n - 1, size=count)) % n  # uniform over j != i
    return i, j


def diversity(feats, pairs: int = 200, seed: int = 0) -> float:
    """Mean Euclidean distance over seeded random sample pairs (no self-pairs)."""
    arr = _as_feature_matrix(feats, "feature set")
    if pairs < 1:
        raise ValidationError("pairs must be positive")
    rng = np.random.default_rng(seed)
    i, j = _seeded_pairs(arr.shape[0], pairs, rng)
    return float(np.linalg.norm(arr[i] - arr[j], axis=1).mean())


def multimodality(feats, labels, pairs_per_label: int = 20, seed: int = 0) -> float:
    """Within-label mean pairwise distance, averaged over labels."""
    arr = _as_feature_matrix(feats, "feature set")
    labels = list(labels)
    if len(labels) != arr.shape[0]:
        raise ValidationError(f"{len(labels)} labels for {arr.shape[0]} samples")
    if pairs_per_label < 1:
        raise ValidationError("pairs_per_label must be positive")
    rng = np.random.default_rng(seed)
    means = []
    for label in sorted(set(labels)):
        rows = np.flatnonzero([lab == label for lab in labels])
        if rows.size < 2:
            raise ValidationError(f"label {label!r} has a single sample; multimodality needs >= 2")
        i, j = _seeded_pairs(rows.size, pairs_per_label, rng)
        means.append(np.linalg.norm(arr[rows[i]] - arr[rows[j]], axis=1).mean())
    return float(np.mean(means))
