"""Object-centric map: per-frame detections are associated to persistent
object nodes by a weighted visual/geometric/text similarity, then fused into
per-object voxel grids and running-mean features.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .features import RunningFeature, feature_similarity
from .geometry import (PointCloud, VoxelGrid, _pack_keys, voxel_downsample)


class MapError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityWeights:
    visual: float = 0.4
    geometric: float = 0.4
    text: float = 0.2

    def __post_init__(self):
        total = self.visual + self.geometric + self.text
        if min(self.visual, self.geometric, self.text) < 0 or abs(total - 1.0) > 1e-9:
            raise MapError("similarity weights must be non-negative and sum to 1")


@dataclass(frozen=True)
class MapParams:
    voxel_resolution: float = 0.01
    nn_radius: float = 0.025          # geometric-overlap neighbor radius
    sim_threshold: float = 0.75       # associate when best score >= threshold
    bbox_dilation: float = 0.05       # candidate pre-filter slack
    weights: SimilarityWeights = SimilarityWeights()
    dbscan_k: int = 10
    denoise: bool = True
    feature_dim: int = 64


@dataclass
class Detection:
    """One detector hit in one frame.

    ``box`` is (u0, v0, u1, v1) with exclusive maxima, ``mask`` a (H, W) bool
    raster, ``cloud`` the denoised world-frame points behind the mask.
    ``instance_id`` is an optional detector-provided identity hint; the
    mapping itself never reads it, evaluation uses it for correspondence.
    """

    label: str
    box: tuple[int, int, int, int]
    mask: np.ndarray
    cloud: PointCloud
    f_vis: np.ndarray
    f_text: np.ndarray
    instance_id: int | None = None

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise MapError("detection cloud is empty")
        if not self.label:
            raise MapError("detection label is empty")
        for f in (self.f_vis, self.f_text):
            if abs(np.linalg.norm(f) - 1.0) > 1e-4:
                raise MapError("detection features must be unit length")


class ObjectNode:
    """Persistent map object: voxel grid, fused features, class votes."""

    def __init__(self, node_id: int, detection: Detection, resolution: float):
        self.id = node_id
        self.voxels = voxel_downsample(detection.cloud, resolution)
        self._vis = RunningFeature(detection.f_vis)
        self._text = RunningFeature(detection.f_text)
        self.class_votes: dict[str, int] = {detection.label: 1}
        self._vote_order: dict[str, int] = {detection.label: 0}
        self.instance_votes: dict[int, int] = {}
        if detection.instance_id is not None:
            self.instance_votes[detection.instance_id] = 1

    @property
    def detection_count(self) -> int:
        return self._vis.count

    @property
    def f_vis(self) -> np.ndarray:
        return self._vis.normalized

    @property
    def f_text(self) -> np.ndarray:
        return self._text.normalized

    @property
    def f_vis_mean(self) -> np.ndarray:
        return self._vis.mean

    @property
    def f_text_mean(self) -> np.ndarray:
        return self._text.mean

    @property
    def class_label(self) -> str:
        best = max(self.class_votes.values())
        tied = [c for c, n in self.class_votes.items() if n == best]
        return min(tied, key=lambda c: self._vote_order[c])

    @property
    def centroid(self) -> np.ndarray:
        return self.voxels.points.mean(axis=0)

    @property
    def bbox(self) -> np.ndarray:
        return self.voxels.bbox()

    @property
    def volume(self) -> float:
        lo, hi = self.bbox
        return float(np.prod(hi - lo))

    @property
    def instance_id(self) -> int | None:
        """Plurality detector-instance hint, for evaluation only."""
        if not self.instance_votes:
            return None
        best = max(self.instance_votes.values())
        return min(i for i, n in self.instance_votes.items() if n == best)

    def fuse_detection(self, detection: Detection) -> int:
        """Fold one matched detection into the node. Returns #voxels added."""
        self._vis.update(detection.f_vis)
        self._text.update(detection.f_text)
        if detection.label not in self.class_votes:
            self.class_votes[detection.label] = 0
            self._vote_order[detection.label] = len(self._vote_order)
        self.class_votes[detection.label] += 1
        if detection.instance_id is not None:
            self.instance_votes[detection.instance_id] = \
                self.instance_votes.get(detection.instance_id, 0) + 1
        return self.voxels.merge_points(detection.cloud.points,
                                        detection.cloud.colors)


class ObjectMap:
    """Id-stable collection of ObjectNodes. Single-writer: mapping and update
    mutate in place, graph snapshots are taken as immutable values."""

    def __init__(self, params: MapParams = MapParams()):
        self.params = params
        self.nodes: dict[int, ObjectNode] = {}
        self._next_id = 0
        self.stats = {"points_integrated": 0, "voxels_projected": 0,
                      "assoc_voxels_touched": 0}

    def __len__(self) -> int:
        return len(self.nodes)

    def ids(self) -> list[int]:
        return sorted(self.nodes)

    def new_node(self, detection: Detection) -> ObjectNode:
        node = ObjectNode(self._next_id, detection, self.params.voxel_resolution)
        self.nodes[self._next_id] = node
        self._next_id += 1
        return node

    def remove_empty_nodes(self) -> list[int]:
        empty = [i for i, n in self.nodes.items() if len(n.voxels) == 0]
        for i in empty:
            del self.nodes[i]
        return empty

    def all_voxels(self, node_ids=None):
        """Concatenated (points, colors, owner ids, row-in-owner) view,
        optionally restricted to the given nodes."""
        ids = self.ids() if node_ids is None else sorted(node_ids)
        ids = [i for i in ids if len(self.nodes[i].voxels) > 0]
        if not ids:
            z = np.zeros((0, 3))
            return z, z.copy(), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        pts, cols, owner, row = [], [], [], []
        for i in ids:
            g = self.nodes[i].voxels
            pts.append(g.points)
            cols.append(g.colors)
            owner.append(np.full(len(g), i, dtype=np.int64))
            row.append(np.arange(len(g), dtype=np.int64))
        return (np.vstack(pts), np.vstack(cols),
                np.concatenate(owner), np.concatenate(row))

    def instance_nodes(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i in self.ids():
            inst = self.nodes[i].instance_id
            if inst is not None:
                out.setdefault(inst, []).append(i)
        return out


def geometric_similarity(new_cloud: PointCloud, obj: ObjectNode,
                         nn_radius: float, tree: cKDTree | None = None) -> float:
    """Fraction of the new cloud's points with an object voxel within radius."""
    if len(new_cloud) == 0:
        raise MapError("empty cloud")
    if len(obj.voxels) == 0:
        return 0.0
    if tree is None:
        tree = cKDTree(obj.voxels.points)
    d, _ = tree.query(new_cloud.points, distance_upper_bound=nn_radius)
    return float(np.isfinite(d).mean())


def overall_similarity(detection: Detection, obj: ObjectNode,
                       weights: SimilarityWeights, nn_radius: float,
                       tree: cKDTree | None = None) -> float:
    s_vis = feature_similarity(detection.f_vis, obj.f_vis)
    s_geo = geometric_similarity(detection.cloud, obj, nn_radius, tree)
    s_text = feature_similarity(detection.f_text, obj.f_text)
    return (weights.visual * s_vis + weights.geometric * s_geo
            + weights.text * s_text)


def _boxes_overlap(a: np.ndarray, b: np.ndarray, dilation: float) -> bool:
    return bool(np.all(a[0] - dilation <= b[1]) and np.all(b[0] - dilation <= a[1]))


def _cloud_bbox(cloud: PointCloud) -> np.ndarray:
    return np.array([cloud.points.min(axis=0), cloud.points.max(axis=0)])


def associate_detections(detections: list[Detection], omap: ObjectMap,
                         params: MapParams | None = None) -> list[int | None]:
    """Greedy per-detection association against the current map.

    Each detection independently takes the argmax-similarity object among
    bbox-overlap candidates; scores below the threshold open a new object
    (None). Ties resolve to the lowest object id.
    """
    params = params or omap.params
    decisions: list[int | None] = []
    trees: dict[int, cKDTree] = {}   # node voxels are static during one pass
    boxes = {obj_id: omap.nodes[obj_id].bbox for obj_id in omap.ids()
             if len(omap.nodes[obj_id].voxels) > 0}
    for det in detections:
        dbox = _cloud_bbox(det.cloud)
        best_id, best_score = None, -1.0
        for obj_id in omap.ids():
            if obj_id not in boxes:
                continue
            obj = omap.nodes[obj_id]
            if not _boxes_overlap(dbox, boxes[obj_id], params.bbox_dilation):
                continue
            if obj_id not in trees:
                trees[obj_id] = cKDTree(obj.voxels.points)
                omap.stats["assoc_voxels_touched"] += len(obj.voxels)
            score = overall_similarity(det, obj, params.weights,
                                       params.nn_radius, trees[obj_id])
            if score > best_score:
                best_id, best_score = obj_id, score
        if best_id is None or best_score < params.sim_threshold:
            decisions.append(None)
        else:
            decisions.append(best_id)
    return decisions


def integrate_frame(omap: ObjectMap, detections: list[Detection],
                    decisions: list[int | None]) -> tuple[list[int], list[int]]:
    """Apply association decisions: fuse matches, create nodes for the rest.

    Returns (created ids, updated ids).
    """
    if len(detections) != len(decisions):
        raise MapError("detections and decisions length mismatch")
    created, updated = [], []
    for det, dec in zip(detections, decisions):
        if dec is None:
            node = omap.new_node(det)
            created.append(node.id)
        else:
            if dec not in omap.nodes:
                raise MapError(f"decision references unknown object {dec}")
            omap.nodes[dec].fuse_detection(det)
            updated.append(dec)
        omap.stats["points_integrated"] += len(det.cloud)
    return created, updated


def build_map(per_frame_detections, params: MapParams = MapParams()) -> ObjectMap:
    """Run associate/integrate over a detection sequence from scratch."""
    omap = ObjectMap(params)
    for dets in per_frame_detections:
        decisions = associate_detections(dets, omap, params)
        integrate_frame(omap, dets, decisions)
    return omap


# --- persistence -----------------------------------------------------------
#
# A map directory holds manifest.json plus one binary blob per object.
# Blob layout, little-endian, one 52-byte record per voxel:
#   int32 ix, iy, iz   voxel index (floor(coord / resolution))
#   float32 x, y, z    representative point (member centroid)
#   float32 r, g, b    mean color in [0, 1]
#   int32 count        member count

_RECORD = struct.Struct("<3i3f3fi")


def save_map(omap: ObjectMap, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    objects = []
    for obj_id in omap.ids():
        node = omap.nodes[obj_id]
        blob = f"object_{obj_id:04d}.voxels"
        keys = node.voxels.keys()
        with open(out / blob, "wb") as fh:
            for k, p, c, n in zip(keys, node.voxels.points, node.voxels.colors,
                                  node.voxels.counts):
                fh.write(_RECORD.pack(int(k[0]), int(k[1]), int(k[2]),
                                      float(p[0]), float(p[1]), float(p[2]),
                                      float(c[0]), float(c[1]), float(c[2]),
                                      int(n)))
        objects.append({
            "id": obj_id,
            "class_label": node.class_label,
            "class_votes": node.class_votes,
            "vote_order": node._vote_order,
            "detection_count": node.detection_count,
            "f_vis_mean": node.f_vis_mean.tolist(),
            "f_text_mean": node.f_text_mean.tolist(),
            "instance_votes": {str(k): v for k, v in node.instance_votes.items()},
            "bbox": node.bbox.tolist(),
            "voxel_blob": blob,
        })
    manifest = {
        "format": "dsgraph-map-v1",
        "voxel_resolution": omap.params.voxel_resolution,
        "next_id": omap._next_id,
        "objects": objects,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_map(map_dir, params: MapParams = MapParams()) -> ObjectMap:
    src = Path(map_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format") != "dsgraph-map-v1":
        raise MapError("unrecognized map manifest format")
    res = manifest["voxel_resolution"]
    if abs(res - params.voxel_resolution) > 1e-12:
        params = MapParams(**{**params.__dict__, "voxel_resolution": res})
    omap = ObjectMap(params)
    for entry in manifest["objects"]:
        raw = (src / entry["voxel_blob"]).read_bytes()
        n_rec = len(raw) // _RECORD.size
        keys = np.zeros((n_rec, 3), dtype=np.int64)
        points = np.zeros((n_rec, 3))
        colors = np.zeros((n_rec, 3))
        counts = np.zeros(n_rec, dtype=np.int64)
        for i in range(n_rec):
            rec = _RECORD.unpack_from(raw, i * _RECORD.size)
            keys[i] = rec[0:3]
            points[i] = rec[3:6]
            colors[i] = rec[6:9]
            counts[i] = rec[9]
        node = object.__new__(ObjectNode)
        node.id = entry["id"]
        grid = VoxelGrid(res)
        grid._codes = _pack_keys(keys)
        grid._points = points
        grid._colors = colors
        grid._counts = counts
        grid._rebuild_index()
        node.voxels = grid
        node._vis = object.__new__(RunningFeature)
        node._vis.mean = np.array(entry["f_vis_mean"])
        node._vis.count = entry["detection_count"]
        node._text = object.__new__(RunningFeature)
        node._text.mean = np.array(entry["f_text_mean"])
        node._text.count = entry["detection_count"]
        node.class_votes = dict(entry["class_votes"])
        node._vote_order = {k: int(v) for k, v in entry["vote_order"].items()}
        node.instance_votes = {int(k): v for k, v in entry["instance_votes"].items()}
        omap.nodes[node.id] = node
    omap._next_id = manifest["next_id"]
    return omap
