"""Scene graph over map objects: support/containment/attachment edges with a
floor root, plus a local update that recomputes only the neighborhood of
changed objects and provably matches a from-scratch rebuild.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

FLOOR_ID = -1

INSIDE = "inside"
ON = "on"
BELONG = "belong"
_PRIORITY = {INSIDE: 0, ON: 1, BELONG: 2}


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class RelationParams:
    inside_fraction: float = 0.8      # child voxels inside parent interior
    on_overlap_fraction: float = 0.3  # xy footprint overlap vs child footprint
    on_z_below: float = 0.02          # child bottom may sink this far into parent top
    on_z_above: float = 0.03          # ... or float this far above it
    belong_dilation: float = 0.03     # bbox dilation for attachment test
    belong_volume_ratio: float = 0.05
    vicinity_margin: float = 0.10     # local-update interaction radius


@dataclass(frozen=True)
class SceneGraph:
    """Immutable forest: every node has exactly one parent edge; parents are
    object ids or FLOOR_ID."""

    nodes: tuple[int, ...]
    edges: dict[int, tuple[int, str]]

    def __post_init__(self):
        node_set = set(self.nodes)
        if set(self.edges) != node_set:
            raise GraphError("every node needs exactly one parent edge")
        for child, (parent, relation) in self.edges.items():
            if parent != FLOOR_ID and parent not in node_set:
                raise GraphError(f"edge {child}->{parent} references missing node")
            if relation not in _PRIORITY:
                raise GraphError(f"unknown relation {relation!r}")
            if parent == child:
                raise GraphError("self edge")

    def parent_of(self, node: int):
        return self.edges[node]

    def children_of(self, node: int) -> list[int]:
        return sorted(c for c, (p, _) in self.edges.items() if p == node)

    def edge_set(self) -> frozenset:
        return frozenset((c, p, r) for c, (p, r) in self.edges.items())


def _bbox_volume(bbox: np.ndarray) -> float:
    return float(np.prod(np.maximum(bbox[1] - bbox[0], 0.0)))


def _xy_overlap_area(a: np.ndarray, b: np.ndarray) -> float:
    lo = np.maximum(a[0, :2], b[0, :2])
    hi = np.minimum(a[1, :2], b[1, :2])
    return float(np.prod(np.maximum(hi - lo, 0.0)))


def infer_relation(child, parent, params: RelationParams = RelationParams()):
    """Highest-priority relation of ``child`` w.r.t. ``parent`` or None.

    inside: >= inside_fraction of the child's voxels lie in the parent's
    interior (bounding box shrunk by one voxel) and the child is smaller.
    on: xy footprints overlap enough and the child's underside sits at the
    parent's top surface. belong: the child's centroid is within the parent's
    dilated box and the child is at most belong_volume_ratio of its volume.
    """
    cb, pb = child.bbox, parent.bbox
    c_vol, p_vol = _bbox_volume(cb), _bbox_volume(pb)

    res = parent.voxels.resolution
    interior_lo = pb[0] + res
    interior_hi = pb[1] - res
    if np.all(interior_hi > interior_lo) and c_vol < p_vol:
        pts = child.voxels.points
        inside = np.all((pts >= interior_lo) & (pts <= interior_hi), axis=1)
        if inside.mean() >= params.inside_fraction:
            return INSIDE

    overlap = _xy_overlap_area(cb, pb)
    footprint = max(_xy_overlap_area(cb, cb), 1e-12)
    top = pb[1, 2]
    if (overlap >= params.on_overlap_fraction * footprint
            and top - params.on_z_below <= cb[0, 2] <= top + params.on_z_above):
        return ON

    centroid = child.centroid
    dilated_lo = pb[0] - params.belong_dilation
    dilated_hi = pb[1] + params.belong_dilation
    if (np.all(centroid >= dilated_lo) and np.all(centroid <= dilated_hi)
            and c_vol <= params.belong_volume_ratio * p_vol):
        return BELONG
    return None


def _choose_parent(node_id: int, objects: Mapping[int, object],
                   params: RelationParams) -> tuple[int, str]:
    child = objects[node_id]
    best = None
    for other_id in sorted(objects):
        if other_id == node_id:
            continue
        parent = objects[other_id]
        if len(parent.voxels) == 0 or len(child.voxels) == 0:
            continue
        rel = infer_relation(child, parent, params)
        if rel is None:
            continue
        key = (_PRIORITY[rel], _bbox_volume(parent.bbox), other_id)
        if best is None or key < best[0]:
            best = (key, other_id, rel)
    if best is None:
        return FLOOR_ID, ON
    return best[1], best[2]


def _resolve_cycles(edges: dict[int, tuple[int, str]]) -> dict[int, tuple[int, str]]:
    # mutual-support geometry can in principle produce a cycle; break each one
    # deterministically by grounding its smallest node on the floor
    edges = dict(edges)
    changed = True
    while changed:
        changed = False
        state: dict[int, int] = {}  # 0 visiting, 1 done
        for start in sorted(edges):
            if state.get(start) == 1:
                continue
            chain = []
            node = start
            while node != FLOOR_ID and state.get(node) != 1:
                if state.get(node) == 0:
                    cycle = chain[chain.index(node):]
                    edges[min(cycle)] = (FLOOR_ID, ON)
                    changed = True
                    break
                state[node] = 0
                chain.append(node)
                node = edges[node][0]
            if changed:
                break
            for n in chain:
                state[n] = 1
    return edges


def build_scene_graph(objects: Mapping[int, object],
                      params: RelationParams = RelationParams()) -> SceneGraph:
    """Infer one parent per object; parentless objects rest on the floor."""
    edges = {}
    for node_id in sorted(objects):
        if len(objects[node_id].voxels) == 0:
            raise GraphError(f"object {node_id} has no voxels")
        edges[node_id] = _choose_parent(node_id, objects, params)
    edges = _resolve_cycles(edges)
    return SceneGraph(tuple(sorted(objects)), edges)


@dataclass(frozen=True)
class NodeSummary:
    digest: str
    bbox: np.ndarray


def summarize_objects(objects: Mapping[int, object]) -> dict[int, NodeSummary]:
    """Cheap pre-update snapshot used to detect changed nodes afterwards."""
    return {i: NodeSummary(o.voxels.digest(), o.bbox.copy())
            for i, o in objects.items() if len(o.voxels) > 0}


def _boxes_near(a: np.ndarray, b: np.ndarray, margin: float) -> bool:
    return bool(np.all(a[0] - margin <= b[1]) and np.all(b[0] - margin <= a[1]))


def local_graph_update(old_graph: SceneGraph,
                       old_objects: Mapping[int, NodeSummary],
                       new_objects: Mapping[int, object],
                       params: RelationParams = RelationParams()) -> SceneGraph:
    """Recompute relations only around changed objects.

    Affected objects are the deleted/point-changed ones, expanded by their old
    parents, those parents' children, their own children, and every object
    within the vicinity margin of a changed extent; only surviving affected
    objects and brand-new ones get fresh relations, so the untouched sub-graph
    is carried over bit-identical. The result equals a full rebuild.
    """
    if set(old_graph.edges) - set(old_objects):
        raise GraphError("old graph references objects missing from old set")
    new_ids = set(new_objects)
    old_ids = set(old_objects)

    deleted = old_ids - new_ids
    added = new_ids - old_ids
    changed = {i for i in old_ids & new_ids
               if old_objects[i].digest != new_objects[i].voxels.digest()}

    affected = set(deleted) | changed
    for node in list(affected):
        if node in old_graph.edges:
            parent = old_graph.edges[node][0]
            if parent != FLOOR_ID:
                affected.add(parent)
                affected.update(old_graph.children_of(parent))
            affected.update(old_graph.children_of(node))

    seeds = [old_objects[i].bbox for i in (deleted | changed)]
    seeds += [new_objects[i].bbox for i in (changed | added) if len(new_objects[i].voxels)]
    for node_id in new_ids:
        if node_id in affected or node_id in added:
            continue
        nb = new_objects[node_id].bbox
        if any(_boxes_near(nb, s, params.vicinity_margin) for s in seeds):
            affected.add(node_id)

    need = (affected & new_ids) | added
    edges: dict[int, tuple[int, str]] = {}
    for child, edge in old_graph.edges.items():
        if child in new_ids and child not in need and edge[0] not in affected:
            edges[child] = edge
    for child in set(new_ids) - set(edges) - need:
        # old edge lost its parent via the affected set: recompute it too
        need.add(child)
    for node_id in sorted(need):
        edges[node_id] = _choose_parent(node_id, new_objects, params)
    edges = _resolve_cycles(edges)
    return SceneGraph(tuple(sorted(new_ids)), edges)


def diff_graphs(old: SceneGraph, new: SceneGraph) -> list[tuple]:
    """(child, old edge or None, new edge or None) for every changed edge."""
    out = []
    for child in sorted(set(old.edges) | set(new.edges)):
        a = old.edges.get(child)
        b = new.edges.get(child)
        if a != b:
            out.append((child, a, b))
    return out


def graph_to_json(graph: SceneGraph, objects: Mapping[int, object] | None = None) -> str:
    nodes = []
    for node_id in sorted(graph.nodes):
        entry: dict = {"id": node_id}
        if objects is not None and node_id in objects:
            obj = objects[node_id]
            entry["class_label"] = obj.class_label
            entry["centroid"] = [round(float(v), 6) for v in obj.centroid]
            entry["bbox"] = [[round(float(v), 6) for v in row] for row in obj.bbox]
        nodes.append(entry)
    edges = [{"child": c, "parent": p, "relation": r}
             for c, (p, r) in sorted(graph.edges.items())]
    return json.dumps({"floor_id": FLOOR_ID, "nodes": nodes, "edges": edges},
                      indent=2, sort_keys=True)


def graph_from_json(text: str) -> SceneGraph:
    data = json.loads(text)
    nodes = tuple(sorted(e["id"] for e in data["nodes"]))
    edges = {e["child"]: (e["parent"], e["relation"]) for e in data["edges"]}
    return SceneGraph(nodes, edges)
