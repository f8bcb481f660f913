"""Scene geometry and the spatial scene graph.

A scene is a point cloud with per-point normals plus a set of detected
objects (axis-aligned boxes ingested from a JSON file, never computed here).
Pairwise relations (near/far, above/below, support) and the ternary
"between" relation are inferred from boxes alone and collected into a graph
whose nodes are objects and whose edges are relations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, ParseError, ValidationError
from .geometry import Aabb, footprint_iou


class SpatialRelation(Enum):
    NEAR = "near"
    FAR = "far"
    ABOVE = "above"
    BELOW = "below"
    SUPPORTED_BY = "supported_by"
    SUPPORTING = "supporting"
    BETWEEN = "between"


# fixed ordering used when sorting edges deterministically
_REL_ORDER = {rel: i for i, rel in enumerate(SpatialRelation)}


@dataclass
class PointCloud:
    """N points with positions (meters) and unit normals, both (N, 3) float64."""

    positions: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape != self.normals.shape:
            raise ValidationError(
                f"positions {self.positions.shape} and normals {self.normals.shape} disagree"
            )

    @classmethod
    def from_raw(cls, positions, normals) -> "PointCloud":
        """Build a cloud, renormalizing normals; zero-length normals become +z."""
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        lengths = np.linalg.norm(nrm, axis=1)
        degenerate = lengths < 1e-12
        safe = np.where(degenerate, 1.0, lengths)
        nrm = nrm / safe[:, None]
        nrm[degenerate] = (0.0, 0.0, 1.0)
        return cls(pos, nrm)

    def __len__(self):
        return self.positions.shape[0]

    def translated(self, offset) -> "PointCloud":
        off = np.asarray(offset, dtype=np.float64).reshape(3)
        return PointCloud(self.positions + off, self.normals.copy())


@dataclass(frozen=True)
class DetectedObject:
    id: int
    category: str
    box: Aabb

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"object id must be non-negative, got {self.id}")
        if not self.category:
            raise ValidationError("object category must be non-empty")

    @property
    def center(self):
        return self.box.center


@dataclass(frozen=True)
class RelationParams:
    """Thresholds for the relation predicates.

    These are configuration, not ground truth: the relation definitions are
    Sr3D-style but the numeric cutoffs are ours, so they are recorded in any
    exported graph for reproducibility.
    """

    near_threshold: float = 1.0
    far_threshold: float = 2.0
    overlap_min: float = 0.25
    contact_eps: float = 0.05
    between_margin: float = 0.1
    between_lateral_max: float = 0.5


@dataclass
class SceneGraph:
    """Objects as nodes; binary edges (subject, relation, object); between edges (subject, anchor1, anchor2)."""

    nodes: list
    binary_edges: list = field(default_factory=list)
    between_edges: list = field(default_factory=list)

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate object ids in scene graph nodes")
        known = set(ids)
        for s, rel, o in self.binary_edges:
            if s not in known or o not in known:
                raise ValidationError(f"edge ({s}, {rel}, {o}) references unknown node id")
            if rel is SpatialRelation.BETWEEN:
                raise ValidationError("between edges belong in between_edges, not binary_edges")
        for s, a1, a2 in self.between_edges:
            if not {s, a1, a2} <= known:
                raise ValidationError(f"between edge ({s}, {a1}, {a2}) references unknown node id")
        if len(set(self.binary_edges)) != len(self.binary_edges):
            raise ValidationError("duplicate binary edges")
        if len(set(self.between_edges)) != len(self.between_edges):
            raise ValidationError("duplicate between edges")

    def node_by_id(self, object_id: int) -> DetectedObject:
        for n in self.nodes:
            if n.id == object_id:
                return n
        raise KeyError(f"no node with id {object_id}")

    @property
    def categories(self):
        return {n.category for n in self.nodes}


# ---------------------------------------------------------------------------
# loading


def _parse_float_row(parts, path, lineno):
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ParseError(f"non-numeric value in row: {parts!r}", path=path, line=lineno) from None


def _load_ply(lines, path) -> PointCloud:
    if lines[0].strip() != "ply":
        raise ParseError("expected 'ply' magic on first line", path=path, line=1)
    n_vertices = None
    prop_names = []
    in_vertex_element = False
    header_end = None
    for i, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError(f"only ascii PLY is supported, got {line.strip()!r}", path=path, line=i)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError(f"malformed element line {line.strip()!r}", path=path, line=i)
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertices = int(tokens[2])
                except ValueError:
                    raise ParseError(f"bad vertex count {tokens[2]!r}", path=path, line=i) from None
        elif tokens[0] == "property":
            if in_vertex_element:
                if len(tokens) != 3:
                    raise ParseError(f"malformed property line {line.strip()!r}", path=path, line=i)
                prop_names.append(tokens[2])
        elif tokens[0] == "end_header":
            header_end = i
            break
        else:
            raise ParseError(f"unrecognized header line {line.strip()!r}", path=path, line=i)
    if header_end is None:
        raise ParseError("missing end_header", path=path, line=len(lines))
    if n_vertices is None:
        raise ParseError("missing 'element vertex' declaration", path=path, line=header_end)
    required = ("x", "y", "z", "nx", "ny", "nz")
    missing = [p for p in required if p not in prop_names]
    if missing:
        raise ParseError(f"vertex element lacks properties {missing}", path=path, line=header_end)
    cols = [prop_names.index(p) for p in required]

    rows = []
    lineno = header_end
    for line in lines[header_end:]:
        lineno += 1
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(prop_names):
            raise ParseError(
                f"expected {len(prop_names)} values per vertex row, got {len(parts)}",
                path=path,
                line=lineno,
            )
        rows.append(_parse_float_row(parts, path, lineno))
        if len(rows) == n_vertices:
            break
    if len(rows) != n_vertices:
        raise ParseError(f"header declares {n_vertices} vertices but file has {len(rows)}", path=path, line=lineno)
    if n_vertices == 0:
        raise EmptyInputError(f"{path}: point cloud is empty")
    data = np.asarray(rows, dtype=np.float64)[:, cols]
    return PointCloud.from_raw(data[:, :3], data[:, 3:])


def _load_xyzn(lines, path) -> PointCloud:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 6:
            raise ParseError(f"expected 6 columns (x y z nx ny nz), got {len(parts)}", path=path, line=lineno)
        rows.append(_parse_float_row(parts, path, lineno))
    if not rows:
        raise EmptyInputError(f"{path}: point cloud is empty")
    data = np.asarray(rows, dtype=np.float64)
    return PointCloud.from_raw(data[:, :3], data[:, 3:])


def load_point_cloud(path) -> PointCloud:
    """Load an ASCII PLY (x y z nx ny nz vertex properties) or 6-column text cloud.

    Normals are renormalized on load; zero-length normals are replaced by +z.
    """
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise EmptyInputError(f"{path}: point cloud is empty")
    if lines[0].strip() == "ply":
        return _load_ply(lines, path)
    return _load_xyzn(lines, path)


def load_detections(path) -> list:
    """Load detected objects from a JSON array of {id, category, center, size}.

    `size` holds full extents; boxes are stored with half extents. Categories
    are lowercased and trimmed.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", path=path, line=e.lineno) from None
    if not isinstance(raw, list):
        raise ValidationError(f"{path}: detections file must hold a JSON array")
    objects = []
    seen_ids = set()
    for i, entry in enumerate(raw):
        try:
            obj_id = int(entry["id"])
            category = str(entry["category"]).strip().lower()
            center = entry["center"]
            size = np.asarray(entry["size"], dtype=np.float64).reshape(3)
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"{path}: detection #{i} malformed: {e}") from None
        if obj_id in seen_ids:
            raise ValidationError(f"{path}: duplicate object id {obj_id}")
        seen_ids.add(obj_id)
        if np.any(size <= 0):
            raise ValidationError(f"{path}: object {obj_id} has non-positive size component {size}")
        objects.append(DetectedObject(obj_id, category, Aabb(center, size / 2.0)))
    return objects


# ---------------------------------------------------------------------------
# relation predicates


def infer_pairwise_relations(a: DetectedObject, b: DetectedObject, params: RelationParams) -> set:
    """Relations of `a` with respect to `b`.

    Near/Far compare horizontal center distance against the two thresholds
    (the band in between yields neither). Above/Below need the boxes'
    z-intervals separated (up to contact_eps of interpenetration) with
    horizontal footprint IoU above overlap_min; SupportedBy/Supporting
    additionally need the vertical gap within +/-contact_eps.
    """
    if a.id == b.id:
        raise ValidationError(f"pairwise relations need distinct objects, got id {a.id} twice")
    rels = set()
    d_xy = float(np.linalg.norm(a.center[:2] - b.center[:2]))
    if d_xy < params.near_threshold:
        rels.add(SpatialRelation.NEAR)
    elif d_xy > params.far_threshold:
        rels.add(SpatialRelation.FAR)

    if footprint_iou(a.box, b.box) > params.overlap_min:
        gap_ab = float(a.box.min_corner[2] - b.box.max_corner[2])  # a sits above b
        gap_ba = float(b.box.min_corner[2] - a.box.max_corner[2])  # b sits above a
        if gap_ab >= -params.contact_eps:
            rels.add(SpatialRelation.ABOVE)
            if gap_ab <= params.contact_eps:
                rels.add(SpatialRelation.SUPPORTED_BY)
        if gap_ba >= -params.contact_eps:
            rels.add(SpatialRelation.BELOW)
            if gap_ba <= params.contact_eps:
                rels.add(SpatialRelation.SUPPORTING)
    return rels


def infer_between(c: DetectedObject, a: DetectedObject, b: DetectedObject, params: RelationParams) -> bool:
    """True iff `c` lies horizontally between `a` and `b`.

    The center of `c` is projected onto the horizontal segment a->b; the
    projection parameter must fall inside (margin, 1-margin) and the
    perpendicular horizontal offset must stay below between_lateral_max.
    A horizontally degenerate segment yields False.
    """
    if len({a.id, b.id, c.id}) != 3:
        raise ValidationError("between needs three distinct objects")
    pa = a.center[:2]
    pb = b.center[:2]
    pc = c.center[:2]
    seg = pb - pa
    seg_len2 = float(seg @ seg)
    if seg_len2 < 1e-18:
        return False
    t = float((pc - pa) @ seg) / seg_len2
    if not (params.between_margin < t < 1.0 - params.between_margin):
        return False
    perp = float(np.linalg.norm(pc - (pa + t * seg)))
    return perp < params.between_lateral_max


def build_scene_graph(objects, params: RelationParams = RelationParams()) -> SceneGraph:
    """Evaluate every ordered pair and every (subject; unordered anchor pair) triple."""
    if not objects:
        raise ValidationError("scene graph needs at least one object")
    binary = set()
    for a in objects:
        for b in objects:
            if a.id == b.id:
                continue
            for rel in infer_pairwise_relations(a, b, params):
                binary.add((a.id, rel, b.id))
    between = set()
    for c in objects:
        others = [o for o in objects if o.id != c.id]
        for i in range(len(others)):
            for j in range(i + 1, len(others)):
                a, b = others[i], others[j]
                if infer_between(c, a, b, params):
                    between.add((c.id, min(a.id, b.id), max(a.id, b.id)))
    nodes = sorted(objects, key=lambda o: o.id)
    binary_edges = sorted(binary, key=lambda e: (e[0], _REL_ORDER[e[1]], e[2]))
    between_edges = sorted(between)
    return SceneGraph(nodes, binary_edges, between_edges)


# ---------------------------------------------------------------------------
# graph export / import


def scene_graph_to_dict(graph: SceneGraph, params: RelationParams = None) -> dict:
    return {
        "nodes": [
            {
                "id": n.id,
                "category": n.category,
                "center": [float(v) for v in n.box.center],
                "size": [float(v) for v in n.box.size],
            }
            for n in graph.nodes
        ],
        "edges": [{"s": s, "rel": rel.value, "o": o} for s, rel, o in graph.binary_edges],
        "between": [{"s": s, "a1": a1, "a2": a2} for s, a1, a2 in graph.between_edges],
        "params": asdict(params) if params is not None else {},
    }


def scene_graph_from_dict(data: dict) -> SceneGraph:
    nodes = [
        DetectedObject(
            int(n["id"]),
            str(n["category"]),
            Aabb(n["center"], np.asarray(n["size"], dtype=np.float64) / 2.0),
        )
        for n in data["nodes"]
    ]
    binary = [(int(e["s"]), SpatialRelation(e["rel"]), int(e["o"])) for e in data.get("edges", [])]
    between = [(int(e["s"]), int(e["a1"]), int(e["a2"])) for e in data.get("between", [])]
    return SceneGraph(nodes, binary, between)


def save_scene_graph(graph: SceneGraph, path, params: RelationParams = None):
    Path(path).write_text(json.dumps(scene_graph_to_dict(graph, params), indent=2, sort_keys=True))


def load_scene_graph(path) -> SceneGraph:
    return scene_graph_from_dict(json.loads(Path(path).read_text()))
