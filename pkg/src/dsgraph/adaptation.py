"""Long-term map maintenance: relocalize incoming frames against the stored
map, delete voxels contradicted by new depth/color evidence, fuse fresh
detections, and patch the scene graph locally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, PointCloud, Pose, backproject_depth,
                       bbox_in_frustum, project_to_pixels)
from .objectmap import (Detection, MapParams, ObjectMap, associate_detections,
                        integrate_frame)
from .registration import IcpParams, RegistrationError, icp_refine
from .scenegraph import (RelationParams, SceneGraph, local_graph_update,
                         summarize_objects)


@dataclass
class Frame:
    """One RGB-D observation: color in [0, 1], z-depth in meters (0 invalid),
    camera-to-world pose."""
    color: np.ndarray
    depth: np.ndarray
    pose: Pose


@dataclass(frozen=True)
class RemovalThresholds:
    """Two-tier evidence test for deleting a stored voxel.

    A voxel projected to a valid depth pixel is obsolete when the depth
    disagreement exceeds ``delta_z``, or exceeds the stricter ``delta_z_strict``
    while the color also disagrees by more than ``delta_color`` (euclidean
    distance between 8-bit RGB triples).
    """
    delta_z: float = 0.05
    delta_z_strict: float = 0.02
    delta_color: float = 30.0

    def __post_init__(self):
        if not self.delta_z > self.delta_z_strict > 0:
            raise ValueError("need delta_z > delta_z_strict > 0")
        if self.delta_color <= 0:
            raise ValueError("delta_color must be positive")


def mark_obsolete_points(points: np.ndarray, colors: np.ndarray, frame: Frame,
                         intrinsics: CameraIntrinsics,
                         thresholds: RemovalThresholds = RemovalThresholds(),
                         ) -> np.ndarray:
    """Boolean deletion mask over ``points`` given one new frame.

    Each point is projected into the frame and compared against the observed
    depth/color at its rounded pixel. Points outside the frustum or landing on
    invalid depth are kept.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    mask = np.zeros(len(points), dtype=bool)
    if len(points) == 0:
        return mask
    uv, z, idx = project_to_pixels(points, frame.pose, intrinsics)
    if len(idx) == 0:
        return mask
    u = np.rint(uv[:, 0]).astype(np.intp)
    v = np.rint(uv[:, 1]).astype(np.intp)
    observed = frame.depth[v, u]
    valid = np.isfinite(observed) & (observed > 0)
    dz = np.abs(observed - z)
    pt_rgb = np.rint(np.asarray(colors, dtype=np.float64)[idx] * 255.0)
    px_rgb = np.rint(frame.color[v, u] * 255.0)
    dc = np.linalg.norm(pt_rgb - px_rgb, axis=1)
    fire = valid & ((dz > thresholds.delta_z)
                    | ((dz > thresholds.delta_z_strict)
                       & (dc > thresholds.delta_color)))
    mask[idx[fire]] = True
    return mask


# --- relocalization ----------------------------------------------------------

@dataclass(frozen=True)
class Keyframe:
    index: int
    pose: Pose


@dataclass(frozen=True)
class RelocalizationResult:
    pose: Pose
    low_confidence: bool
    reference_index: int
    fitness: float


def _frustum_fraction(points: np.ndarray, pose: Pose,
                      intrinsics: CameraIntrinsics) -> float:
    if len(points) == 0:
        return 0.0
    _, _, idx = project_to_pixels(points, pose, intrinsics)
    return len(idx) / len(points)


def select_reference_keyframe(frame_cloud: PointCloud, keyframes,
                              intrinsics: CameraIntrinsics) -> int:
    """Keyframe whose frustum covers the most of the new frame's geometry
    (ties to the lowest index)."""
    if not keyframes:
        raise ValueError("no keyframes to relocalize against")
    pts = frame_cloud.points
    if len(pts) > 2000:
        pts = pts[:: len(pts) // 2000]
    best = (-1.0, None)
    for kf in sorted(keyframes, key=lambda k: k.index):
        frac = _frustum_fraction(pts, kf.pose, intrinsics)
        if frac > best[0]:
            best = (frac, kf.index)
    return best[1]


def relocalize(frame: Frame, coarse_pose: Pose, keyframes,
               omap: ObjectMap, intrinsics: CameraIntrinsics,
               icp_params: IcpParams = IcpParams(),
               min_target_points: int = 50) -> RelocalizationResult:
    """Refine a coarse camera pose against the stored map.

    The frame cloud (lifted by the coarse pose) is registered to the map
    voxels visible from the closest-overlap keyframe; the recovered correction
    is applied on top of the coarse pose. Falls back to the coarse pose with
    ``low_confidence`` set when registration fails or degenerates.
    """
    cam_cloud = backproject_depth(frame.depth, intrinsics, Pose.identity(),
                                  color=frame.color)
    if len(cam_cloud) == 0:
        ref = min(k.index for k in keyframes) if keyframes else -1
        return RelocalizationResult(coarse_pose, True, ref, 0.0)
    source = cam_cloud.transformed(coarse_pose)
    ref_index = select_reference_keyframe(source, keyframes, intrinsics)
    ref_pose = next(k.pose for k in keyframes if k.index == ref_index)

    pts, cols, _, _ = omap.all_voxels()
    _, _, idx = project_to_pixels(pts, ref_pose, intrinsics)
    if len(idx) < min_target_points:
        return RelocalizationResult(coarse_pose, True, ref_index, 0.0)
    target = PointCloud(pts[idx], cols[idx])

    try:
        result = icp_refine(source, target, Pose.identity(), icp_params)
    except RegistrationError:
        return RelocalizationResult(coarse_pose, True, ref_index, 0.0)
    refined = result.pose @ coarse_pose
    return RelocalizationResult(refined, bool(result.degenerate), ref_index,
                                result.fitness)


# --- memory update -----------------------------------------------------------

@dataclass
class UpdateHooks:
    """Optional instrumentation callbacks.

    ``on_removal(frame_index, points, colors, frame, delete_mask)`` fires once
    per frame with every stored voxel and the deletion decision taken.
    """
    on_removal: object = None


@dataclass
class ChangeReport:
    deleted_per_node: dict = field(default_factory=dict)
    deleted_keys: dict = field(default_factory=dict)
    nodes_added: list = field(default_factory=list)
    nodes_removed: list = field(default_factory=list)
    edges_changed: list = field(default_factory=list)
    old_graph: SceneGraph | None = None
    new_graph: SceneGraph | None = None
    points_integrated: int = 0
    voxels_projected: int = 0


def update_memory(omap: ObjectMap, old_graph: SceneGraph, observations,
                  intrinsics: CameraIntrinsics,
                  thresholds: RemovalThresholds = RemovalThresholds(),
                  relation_params: RelationParams = RelationParams(),
                  hooks: UpdateHooks | None = None,
                  death_fraction: float = 0.5) -> ChangeReport:
    """Fold a batch of re-observations into an existing map and graph.

    ``observations`` is a sequence of (Frame, detections) with poses already
    refined. Per frame: stored voxels contradicted by the new evidence are
    deleted (emptied objects dropped), then the frame's detections are
    associated and fused. An object that lost at least ``death_fraction`` of
    its stored voxels and attracted no new points over the whole batch is
    removed outright; a departed object leaves a few voxels that sit too close
    to the vacated surface for the thresholds to fire, and nothing else will
    claim them. Afterwards the scene graph is patched around the touched
    region only; untouched edges carry over unchanged.
    """
    from .scenegraph import diff_graphs

    report = ChangeReport(old_graph=old_graph)
    old_ids = set(omap.ids())
    old_summaries = summarize_objects(omap.nodes)
    points_before = omap.stats["points_integrated"]
    pre_counts = {i: len(omap.nodes[i].voxels) for i in old_ids}
    gained: set[int] = set()

    for frame_index, (frame, detections) in enumerate(observations):
        # the consistency test can only fire on voxels that project into the
        # raster, so nodes whose box misses the frustum are skipped wholesale
        in_view = [i for i in omap.ids()
                   if len(omap.nodes[i].voxels) > 0
                   and bbox_in_frustum(*omap.nodes[i].bbox, frame.pose,
                                       intrinsics)]
        pts, cols, owner, row = omap.all_voxels(in_view)
        omap.stats["voxels_projected"] += len(pts)
        report.voxels_projected += len(pts)
        delete = mark_obsolete_points(pts, cols, frame, intrinsics, thresholds)
        if hooks is not None and hooks.on_removal is not None:
            hooks.on_removal(frame_index, pts, cols, frame, delete)
        if delete.any():
            for node_id in np.unique(owner[delete]):
                node = omap.nodes[int(node_id)]
                rows = row[delete & (owner == node_id)]
                row_mask = np.zeros(len(node.voxels), dtype=bool)
                row_mask[rows] = True
                codes = node.voxels.key_codes()[row_mask]
                bucket = report.deleted_keys.setdefault(int(node_id), set())
                bucket.update(int(c) for c in codes)
                report.deleted_per_node[int(node_id)] = (
                    report.deleted_per_node.get(int(node_id), 0) + len(codes))
                node.voxels.delete(row_mask)
        omap.remove_empty_nodes()
        decisions = associate_detections(detections, omap)
        created, updated = integrate_frame(omap, detections, decisions)
        gained.update(created)
        gained.update(updated)

    for node_id in sorted(old_ids):
        if node_id not in omap.nodes or node_id in gained:
            continue
        lost = report.deleted_per_node.get(node_id, 0)
        if lost > 0 and lost >= death_fraction * pre_counts[node_id]:
            del omap.nodes[node_id]

    new_ids = set(omap.ids())
    report.nodes_added = sorted(new_ids - old_ids)
    report.nodes_removed = sorted(old_ids - new_ids)
    report.points_integrated = omap.stats["points_integrated"] - points_before
    report.new_graph = local_graph_update(old_graph, old_summaries,
                                          omap.nodes, relation_params)
    report.edges_changed = diff_graphs(old_graph, report.new_graph)
    return report
