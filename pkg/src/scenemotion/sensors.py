"""Volumetric scene sensors.

All three sensors share the same skeleton: an 8x8x8 grid of cells whose
occupancy comes from the signed distance between the cell center and the
scene. Scene geometry here is a point cloud with normals, so the signed
distance is the point-to-tangent-plane value d = (q - p) . n for the nearest
point p within a cutoff radius; beyond the radius the distance is +inf,
which the occupancy formula maps to 0.

* environment sensor: 4 m cube around the target object center, axis
  aligned, cells carry occupancy + cell center + nearest-point normal.
* target sensor: grid fitted to the (slightly inflated) target box, same
  cell payload, anisotropic cell edges.
* trajectory sensor: 2 m cube around the character root, yawed to its
  heading, occupancy only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, ValidationError
from .geometry import Aabb
from .scene import PointCloud

GRID_DIMS = 8
CELLS = GRID_DIMS**3

_DEFAULT_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SensorParams:
    env_extent: float = 4.0       # environment cube side, meters
    traj_extent: float = 2.0      # trajectory cube side, meters
    nn_radius: float = 1.0        # signed-distance cutoff radius, meters
    target_inflation: float = 0.1 # relative inflation of the target box before cropping


class PointCloudIndex:
    """Nearest-neighbor index over a cloud; exact ties resolve to the lowest point index."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyInputError("cannot index an empty point cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.positions)

    def nearest(self, queries, radius: float):
        """Nearest point per query within radius.

        Returns (distances, indices); misses get distance +inf and index -1.
        Results match an exhaustive numpy scan, including lowest-index
        resolution of exact distance ties.
        """
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dist, idx = self._tree.query(q, k=1, distance_upper_bound=radius)
        dist = np.asarray(dist, dtype=np.float64)
        idx = np.asarray(idx, dtype=np.int64)
        hit = np.isfinite(dist)
        idx[~hit] = -1
        dist[~hit] = np.inf
        if np.any(hit):
            # re-resolve within a sliver around the tree's distance so ties and
            # last-ulp disagreements land on the same point the brute-force
            # scan would pick
            balls = self._tree.query_ball_point(q[hit], dist[hit] + 1e-9)
            hit_rows = np.flatnonzero(hit)
            for row, candidates in zip(hit_rows, balls):
                cand = np.sort(np.asarray(candidates, dtype=np.int64))
                diffs = self.cloud.positions[cand] - q[row]
                d2 = np.einsum("ij,ij->i", diffs, diffs)
                best = int(np.argmin(d2))
                idx[row] = cand[best]
                dist[row] = np.sqrt(d2[best])
        return dist, idx

    def signed_distances(self, queries, radius: float):
        """Signed distance (q - p*) . n* per query; +inf beyond the radius."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        _, idx = self.nearest(q, radius)
        d = np.full(q.shape[0], np.inf)
        hit = idx >= 0
        if np.any(hit):
            p = self.cloud.positions[idx[hit]]
            n = self.cloud.normals[idx[hit]]
            d[hit] = np.einsum("ij,ij->i", q[hit] - p, n)
        return d, idx


def signed_distance(cloud: PointCloud, query, radius: float = 1.0) -> float:
    """Signed distance from a single query point to the cloud's local tangent plane."""
    d, _ = PointCloudIndex(cloud).signed_distances(np.asarray(query).reshape(1, 3), radius)
    return float(d[0])


def occupancy(d_s, a_s):
    """Piecewise occupancy: 1 behind the surface, 0 past one cell edge, linear between.

    Works elementwise on arrays; a_s may be scalar or per-element.
    """
    d = np.asarray(d_s, dtype=np.float64)
    a = np.asarray(a_s, dtype=np.float64)
    if np.any(a <= 0):
        raise ValidationError("cell edge a_s must be positive")
    with np.errstate(invalid="ignore"):
        o = np.where(d < 0, 1.0, np.where(d > a, 0.0, 1.0 - d / a))
    if np.ndim(d_s) == 0 and np.ndim(a_s) == 0:
        return float(o)
    return o


def to_object_frame(cloud: PointCloud, c_o) -> PointCloud:
    """Translate positions so the object center becomes the origin; normals unchanged."""
    return cloud.translated(-np.asarray(c_o, dtype=np.float64))


def local_cell_centers(extents) -> np.ndarray:
    """(512, 3) cell centers of an 8x8x8 grid spanning +/- extents/2, z-fastest row-major."""
    extents = np.broadcast_to(np.asarray(extents, dtype=np.float64), (3,))
    edge = extents / GRID_DIMS
    axes = [(-extents[k] / 2.0 + (np.arange(GRID_DIMS) + 0.5) * edge[k]) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass(frozen=True)
class VoxelGrid:
    origin: np.ndarray       # grid center, world coordinates (meters)
    yaw: float               # rotation about vertical, radians (0 for env/target)
    cell_edge: np.ndarray    # per-axis edge length a_s (meters)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "cell_edge", np.asarray(self.cell_edge, dtype=np.float64).reshape(3))
        if not np.all(self.cell_edge > 0):
            raise ValidationError(f"cell edges must be positive, got {self.cell_edge}")

    @property
    def dims(self) -> int:
        return GRID_DIMS


@dataclass(frozen=True)
class EnvironmentSensor:
    grid: VoxelGrid
    occupancies: np.ndarray  # (512,)
    centers: np.ndarray      # (512, 3), sensor frame
    normals: np.ndarray      # (512, 3), unit

    kind = "environment"

    @property
    def features(self) -> np.ndarray:
        """Flat feature vector [all o_s | all c_v | all n_v], length 3584."""
        return np.concatenate([self.occupancies, self.centers.ravel(), self.normals.ravel()])


@dataclass(frozen=True)
class TargetSensor(EnvironmentSensor):
    kind = "target"


@dataclass(frozen=True)
class TrajectorySensor:
    grid: VoxelGrid
    occupancies: np.ndarray  # (512,)

    kind = "trajectory"

    @property
    def features(self) -> np.ndarray:
        return self.occupancies


def _cell_payload(index, queries, a_s, radius):
    d, idx = index.signed_distances(queries, radius)
    occ = occupancy(d, a_s)
    normals = np.tile(_DEFAULT_NORMAL, (queries.shape[0], 1))
    hit = idx >= 0
    normals[hit] = index.cloud.normals[idx[hit]]
    return occ, normals


def build_environment_sensor(cloud: PointCloud, c_o, params: SensorParams = SensorParams(),
                             index: PointCloudIndex | None = None) -> EnvironmentSensor:
    """4 m cube of 8x8x8 cells centered at the target object center, world-axis aligned."""
    if index is None:
        index = PointCloudIndex(cloud)
    c_o = np.asarray(c_o, dtype=np.float64).reshape(3)
    centers = local_cell_centers(params.env_extent)
    edge = params.env_extent / GRID_DIMS
    occ, normals = _cell_payload(index, centers + c_o, edge, params.nn_radius)
    grid = VoxelGrid(c_o, 0.0, np.full(3, edge))
    return EnvironmentSensor(grid, occ, centers, normals)


def build_target_sensor(cloud: PointCloud, box: Aabb,
                        params: SensorParams = SensorParams()) -> TargetSensor:
    """Grid fitted to the inflated target box over the cropped cloud.

    Cell edges differ per axis, so the occupancy edge a_s is taken along the
    axis where the cell center is farthest from its nearest point.
    """
    inflated = box.inflated(params.target_inflation)
    centers = local_cell_centers(inflated.size)
    edges = inflated.size / GRID_DIMS
    grid = VoxelGrid(inflated.center, 0.0, edges)

    inside = np.all(np.abs(cloud.positions - inflated.center) <= inflated.half_extents, axis=1)
    if not np.any(inside):
        occ = np.zeros(CELLS)
        normals = np.tile(_DEFAULT_NORMAL, (CELLS, 1))
        return TargetSensor(grid, occ, centers, normals)
    cropped = PointCloud(cloud.positions[inside], cloud.normals[inside])
    index = PointCloudIndex(cropped)

    queries = centers + inflated.center
    d, idx = index.signed_distances(queries, params.nn_radius)
    hit = idx >= 0
    a_s = np.full(CELLS, float(np.max(edges)))
    if np.any(hit):
        offsets = np.abs(queries[hit] - cropped.positions[idx[hit]])
        a_s[hit] = edges[np.argmax(offsets, axis=1)]
    occ = occupancy(d, a_s)
    normals = np.tile(_DEFAULT_NORMAL, (CELLS, 1))
    normals[hit] = cropped.normals[idx[hit]]
    return TargetSensor(grid, occ, centers, normals)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def build_trajectory_sensor(cloud: PointCloud, root, heading: float,
                            params: SensorParams = SensorParams(),
                            index: PointCloudIndex | None = None) -> TrajectorySensor:
    """2 m ego-centric occupancy cube at the root, yawed to the heading."""
    if index is None:
        index = PointCloudIndex(cloud)
    root = np.asarray(root, dtype=np.float64).reshape(3)
    centers = local_cell_centers(params.traj_extent)
    edge = params.traj_extent / GRID_DIMS
    queries = root + centers @ yaw_matrix(heading).T
    d, _ = index.signed_distances(queries, params.nn_radius)
    occ = occupancy(d, edge)
    grid = VoxelGrid(root, float(heading), np.full(3, edge))
    return TrajectorySensor(grid, occ)


# ---------------------------------------------------------------------------
# dumps: raw little-endian float32 + JSON sidecar


def save_sensor(sensor, path):
    """Write `<path>` as raw little-endian float32 plus a `<path>.json` sidecar."""
    path = Path(path)
    feats = np.asarray(sensor.features, dtype="<f4")
    path.write_bytes(feats.tobytes())
    layout = "o_s|c_v|n_v row-major z-fastest" if sensor.kind != "trajectory" else "o_s row-major z-fastest"
    sidecar = {
        "kind": sensor.kind,
        "origin": [float(v) for v in sensor.grid.origin],
        "yaw": float(sensor.grid.yaw),
        "cell_edge": [float(v) for v in sensor.grid.cell_edge],
        "layout": layout,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_sensor(path):
    """Rebuild a sensor from a dump written by save_sensor."""
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    feats = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    grid = VoxelGrid(sidecar["origin"], sidecar["yaw"], sidecar["cell_edge"])
    kind = sidecar["kind"]
    if kind == "trajectory":
        if feats.shape[0] != CELLS:
            raise ValidationError(f"trajectory dump must hold {CELLS} floats, got {feats.shape[0]}")
        return TrajectorySensor(grid, feats)
    if feats.shape[0] != CELLS * 7:
        raise ValidationError(f"sensor dump must hold {CELLS * 7} floats, got {feats.shape[0]}")
    occ = feats[:CELLS]
    centers = feats[CELLS:CELLS * 4].reshape(CELLS, 3)
    normals = feats[CELLS * 4:].reshape(CELLS, 3)
    cls = TargetSensor if kind == "target" else EnvironmentSensor
    return cls(grid, occ, centers, normals)
