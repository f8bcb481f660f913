"""Axis-aligned boxes and the handful of box/point predicates everything else shares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _as_vec3(x, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise ValidationError(f"{name} must have 3 components, got shape {np.shape(x)}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} must be finite, got {v}")
    return v


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by center and strictly positive half extents (meters)."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))
        object.__setattr__(self, "half_extents", _as_vec3(self.half_extents, "half_extents"))
        if not np.all(self.half_extents > 0):
            raise ValidationError(f"half_extents must be strictly positive, got {self.half_extents}")

    @property
    def min_corner(self):
        return self.center - self.half_extents

    @property
    def max_corner(self):
        return self.center + self.half_extents

    @property
    def size(self):
        """Full extents (twice the half extents)."""
        return 2.0 * self.half_extents

    def contains(self, point) -> bool:
        p = _as_vec3(point, "point")
        return bool(np.all(np.abs(p - self.center) <= self.half_extents))

    def inflated(self, factor: float) -> "Aabb":
        """Box scaled about its center by (1 + factor) per axis."""
        return Aabb(self.center, self.half_extents * (1.0 + factor))


def box_iou(a: Aabb, b: Aabb) -> float:
    """Intersection-over-union of two axis-aligned boxes (0 when disjoint)."""
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    edges = hi - lo
    if np.any(edges <= 0):
        return 0.0
    inter = float(np.prod(edges))
    vol_a = float(np.prod(a.size))
    vol_b = float(np.prod(b.size))
    return inter / (vol_a + vol_b - inter)


def footprint_iou(a: Aabb, b: Aabb) -> float:
    """IoU of the boxes' horizontal (xy) footprints."""
    lo = np.maximum(a.min_corner[:2], b.min_corner[:2])
    hi = np.minimum(a.max_corner[:2], b.max_corner[:2])
    edges = hi - lo
    if np.any(edges <= 0):
        return 0.0
    inter = float(np.prod(edges))
    area_a = float(np.prod(a.size[:2]))
    area_b = float(np.prod(b.size[:2]))
    return inter / (area_a + area_b - inter)


def point_box_distance(point, box: Aabb) -> float:
    """Euclidean distance from a point to the box surface; 0 inside."""
    p = _as_vec3(point, "point")
    excess = np.maximum(np.abs(p - box.center) - box.half_extents, 0.0)
    return float(np.linalg.norm(excess))
