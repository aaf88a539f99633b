"""Synthetic tabletop world: scripted scenes of box/sphere/cylinder objects
rendered to RGB-D + instance labels by analytic ray casting, with scripted
mid-run edits (move / add / reveal), exact ground truth, and on-disk frame
datasets.

Containers are open-top boxes with a removable lid; objects marked hidden
render nothing until revealed, which also opens their container.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adaptation import Frame
from .geometry import (CameraIntrinsics, GeometryError, PointCloud, Pose,
                       adaptive_dbscan_filter, backproject_depth,
                       rotation_about_z)
from .objectmap import Detection, MapParams
from .scenegraph import (BELONG, FLOOR_ID, INSIDE, ON, RelationParams,
                         SceneGraph)

BACKGROUND_ID = -1


class ScenarioError(ValueError):
    pass


@dataclass
class SceneObject:
    id: int
    label: str
    shape: str                      # box | sphere | cylinder
    size: tuple                     # box: (sx, sy, sz); sphere: (r,); cylinder: (r, h)
    pose: Pose
    color: tuple
    container: bool = False
    open: bool = False
    contains: tuple = ()
    hidden: bool = False
    wall: float = 0.02

    def __post_init__(self):
        if self.shape not in ("box", "sphere", "cylinder"):
            raise ScenarioError(f"unknown shape {self.shape!r}")
        sizes = {"box": 3, "sphere": 1, "cylinder": 2}
        if len(self.size) != sizes[self.shape]:
            raise ScenarioError(f"{self.shape} expects {sizes[self.shape]} size values")
        if min(self.size) <= 0:
            raise ScenarioError("sizes must be positive")
        if self.container and self.shape != "box":
            raise ScenarioError("containers must be boxes")

    def aabb(self) -> np.ndarray:
        """World axis-aligned bounds of the primitive."""
        r = self.pose.rotation
        c = self.pose.translation
        if self.shape == "box":
            half = np.array(self.size) / 2.0
            corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                                for sz in (-1, 1)]) * half
            world = corners @ r.T + c
            return np.array([world.min(axis=0), world.max(axis=0)])
        if self.shape == "sphere":
            rad = self.size[0]
            return np.array([c - rad, c + rad])
        rad, h = self.size
        axis = r[:, 2]
        ext = (h / 2.0) * np.abs(axis) + rad * np.sqrt(
            np.clip(1.0 - axis ** 2, 0.0, 1.0))
        return np.array([c - ext, c + ext])

    def cavity_aabb(self) -> np.ndarray:
        """World bounds of a container's interior space."""
        if not self.container:
            raise ScenarioError("cavity of a non-container")
        sx, sy, sz = self.size
        w = self.wall
        lo = np.array([-sx / 2 + w, -sy / 2 + w, -sz / 2 + w])
        hi = np.array([sx / 2 - w, sy / 2 - w, sz / 2 - (w if not self.open else 0.0)])
        corners = np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1])
                            for c in (lo[2], hi[2])])
        world = corners @ self.pose.rotation.T + self.pose.translation
        return np.array([world.min(axis=0), world.max(axis=0)])


@dataclass
class EditEvent:
    at_frame: int
    kind: str                       # move | add | reveal
    target: int | None = None
    pose: Pose | None = None
    obj: SceneObject | None = None

    def __post_init__(self):
        if self.kind not in ("move", "add", "reveal"):
            raise ScenarioError(f"unknown edit kind {self.kind!r}")
        if self.kind == "move" and (self.target is None or self.pose is None):
            raise ScenarioError("move edit needs target and pose")
        if self.kind == "add" and self.obj is None:
            raise ScenarioError("add edit needs an object")
        if self.kind == "reveal" and self.target is None:
            raise ScenarioError("reveal edit needs a target")


@dataclass
class ScenarioScript:
    objects: list
    floor_extent: float
    trajectory: list
    intrinsics: CameraIntrinsics
    edits: list = field(default_factory=list)
    tasks: list = field(default_factory=list)
    floor_color: tuple = (0.45, 0.40, 0.35)
    name: str = "scenario"
    level: str | None = None

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ScenarioError("duplicate object ids")
        if not self.trajectory:
            raise ScenarioError("empty camera trajectory")
        if self.floor_extent <= 0:
            raise ScenarioError("floor extent must be positive")
        containers = {o.id: o for o in self.objects if o.container}
        contained = {i for o in containers.values() for i in o.contains}
        for o in self.objects:
            if o.hidden and o.id not in contained:
                raise ScenarioError(f"hidden object {o.id} has no containing parent")
        for e in self.edits:
            if not 0 <= e.at_frame <= len(self.trajectory):
                raise ScenarioError("edit frame outside trajectory")

    def state_at(self, frame_index: int) -> dict[int, SceneObject]:
        """Object states after applying every edit at_frame <= frame_index."""
        state = {o.id: replace(o) for o in self.objects}
        for e in self.edits:
            if e.at_frame <= frame_index:
                _apply_edit(state, e)
        return state

    def final_state(self) -> dict[int, SceneObject]:
        return self.state_at(len(self.trajectory))


def _apply_edit(state: dict[int, SceneObject], event: EditEvent) -> None:
    if event.kind == "move":
        if event.target not in state:
            raise ScenarioError(f"move targets unknown object {event.target}")
        state[event.target] = replace(state[event.target], pose=event.pose)
    elif event.kind == "add":
        if event.obj.id in state:
            raise ScenarioError(f"add duplicates object id {event.obj.id}")
        state[event.obj.id] = replace(event.obj)
    else:  # reveal
        if event.target not in state:
            raise ScenarioError(f"reveal targets unknown object {event.target}")
        state[event.target] = replace(state[event.target], hidden=False)
        for obj in state.values():
            if obj.container and event.target in obj.contains:
                state[obj.id] = replace(obj, open=True)


def apply_scene_edit(script: ScenarioScript, event: EditEvent) -> ScenarioScript:
    """Bake one edit into the script's base objects (functional). If the
    event came from the script's own edit list it is dropped from it."""
    state = {o.id: replace(o) for o in script.objects}
    _apply_edit(state, event)
    return replace(script, objects=[state[i] for i in sorted(state)],
                   edits=[e for e in script.edits if e is not event])


# --- camera helpers ---------------------------------------------------------

def make_intrinsics(width: int = 240, height: int = 180,
                    hfov_deg: float = 60.0) -> CameraIntrinsics:
    fx = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
    return CameraIntrinsics(fx, fx, width / 2.0, height / 2.0, width, height)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose with +z toward ``target`` (+x right, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise GeometryError("look_at eye coincides with target")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return Pose(rot, eye)


# --- analytic ray casting ---------------------------------------------------

_EPS = 1e-9


def _ray_box(origin_l: np.ndarray, dirs_l: np.ndarray, half: np.ndarray) -> np.ndarray:
    d = np.where(np.abs(dirs_l) < 1e-12, 1e-12, dirs_l)
    inv = 1.0 / d
    t1 = (-half - origin_l) * inv
    t2 = (half - origin_l) * inv
    tnear = np.minimum(t1, t2).max(axis=1)
    tfar = np.maximum(t1, t2).min(axis=1)
    hit = (tfar >= tnear) & (tfar > _EPS)
    t = np.where(tnear > _EPS, tnear, tfar)
    return np.where(hit, t, np.inf)


def _ray_sphere(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
                radius: float) -> np.ndarray:
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius ** 2
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > _EPS, t0, t1)
    return np.where(ok & (t > _EPS), t, np.inf)


def _ray_cylinder(origin_l: np.ndarray, dirs_l: np.ndarray, radius: float,
                  height: float) -> np.ndarray:
    hh = height / 2.0
    ox, oy, oz = origin_l
    dx, dy, dz = dirs_l[:, 0], dirs_l[:, 1], dirs_l[:, 2]
    best = np.full(len(dirs_l), np.inf)
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius ** 2
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-16)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2 * a)
            z = oz + t * dz
            good = ok & (t > _EPS) & (np.abs(z) <= hh)
            best = np.where(good & (t < best), t, best)
        dz_safe = np.where(np.abs(dz) < 1e-12, 1e-12, dz)
        for cap in (-hh, hh):
            t = (cap - oz) / dz_safe
            x = ox + t * dx
            y = oy + t * dy
            good = (t > _EPS) & (x * x + y * y <= radius ** 2)
            best = np.where(good & (t < best), t, best)
    return best


def _container_pieces(obj: SceneObject):
    """Decompose a container into wall boxes (local center, local size)."""
    sx, sy, sz = obj.size
    w = obj.wall
    pieces = [
        ((0.0, 0.0, -sz / 2 + w / 2), (sx, sy, w)),                       # bottom
        ((-sx / 2 + w / 2, 0.0, w / 2), (w, sy, sz - w)),                 # -x wall
        ((sx / 2 - w / 2, 0.0, w / 2), (w, sy, sz - w)),                  # +x wall
        ((0.0, -sy / 2 + w / 2, w / 2), (sx - 2 * w, w, sz - w)),         # -y wall
        ((0.0, sy / 2 - w / 2, w / 2), (sx - 2 * w, w, sz - w)),          # +y wall
    ]
    if not obj.open:
        pieces.append(((0.0, 0.0, sz / 2 - w / 2), (sx - 2 * w, sy - 2 * w, w)))
    return pieces


def _pixel_dirs(intrinsics: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    u = np.arange(intrinsics.width)
    v = np.arange(intrinsics.height)
    uu, vv = np.meshgrid(u, v)
    x = (uu - intrinsics.cx) / intrinsics.fx
    y = (vv - intrinsics.cy) / intrinsics.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ pose.rotation.T
    return pose.translation, dirs_world


def render_rasters(state: dict[int, SceneObject], floor_extent: float,
                   floor_color, pose: Pose, intrinsics: CameraIntrinsics,
                   max_range: float = 12.0):
    """Cast one ray per pixel; returns (depth, labels, color) rasters.

    ``t`` along the unnormalized pixel ray equals z-depth, so the rasters hold
    z-depth in meters directly. Background and floor pixels get label -1.
    """
    origin, dirs = _pixel_dirs(intrinsics, pose)
    n = len(dirs)
    depth = np.full(n, np.inf)
    labels = np.full(n, BACKGROUND_ID, dtype=np.int32)
    colors = np.zeros((n, 3))

    inv = pose.inverse()
    w, h = intrinsics.width, intrinsics.height
    full = np.arange(n)

    def window(obj) -> np.ndarray | None:
        # pixel indices covered by the object's bounding box, so each shape
        # test only touches the rays that can possibly hit it
        if obj.shape == "sphere":
            half = np.full(3, obj.size[0])
        elif obj.shape == "cylinder":
            half = np.array([obj.size[0], obj.size[0], obj.size[1] / 2.0])
        else:
            half = np.array(obj.size) / 2.0
        signs = np.array([[sx, sy, sz] for sx in (-1, 1)
                          for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        corners = obj.pose.translation + (signs * half) @ obj.pose.rotation.T
        cam = corners @ inv.rotation.T + inv.translation
        if (cam[:, 2] <= 0.05).all():
            return None
        if (cam[:, 2] <= 0.05).any():
            return full                      # straddles the image plane
        u = intrinsics.fx * cam[:, 0] / cam[:, 2] + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / cam[:, 2] + intrinsics.cy
        u0, u1 = int(max(np.floor(u.min()), 0)), int(min(np.ceil(u.max()), w - 1))
        v0, v1 = int(max(np.floor(v.min()), 0)), int(min(np.ceil(v.max()), h - 1))
        if u0 > u1 or v0 > v1:
            return None
        vv, uu = np.meshgrid(np.arange(v0, v1 + 1), np.arange(u0, u1 + 1),
                             indexing="ij")
        return (vv * w + uu).ravel()

    def consider(t: np.ndarray, idx: np.ndarray, obj_id: int, color):
        closer = t < depth[idx]
        if closer.any():
            upd = idx[closer]
            depth[upd] = t[closer]
            labels[upd] = obj_id
            colors[upd] = color

    half_floor = np.array([floor_extent / 2, floor_extent / 2, 0.025])
    floor_origin = origin - np.array([0.0, 0.0, -0.025])
    t = _ray_box(floor_origin, dirs, half_floor)
    consider(t, full, BACKGROUND_ID, np.asarray(floor_color))

    for obj in state.values():
        if obj.hidden:
            continue
        idx = window(obj)
        if idx is None:
            continue
        sub = dirs[idx]
        col = np.asarray(obj.color)
        if obj.shape == "sphere":
            t = _ray_sphere(origin, sub, obj.pose.translation, obj.size[0])
            consider(t, idx, obj.id, col)
            continue
        rot_t = obj.pose.rotation.T
        origin_l = rot_t @ (origin - obj.pose.translation)
        dirs_l = sub @ obj.pose.rotation
        if obj.shape == "cylinder":
            t = _ray_cylinder(origin_l, dirs_l, obj.size[0], obj.size[1])
            consider(t, idx, obj.id, col)
        elif not obj.container:
            t = _ray_box(origin_l, dirs_l, np.array(obj.size) / 2.0)
            consider(t, idx, obj.id, col)
        else:
            for center_l, size_l in _container_pieces(obj):
                t = _ray_box(origin_l - np.array(center_l), dirs_l,
                             np.array(size_l) / 2.0)
                consider(t, idx, obj.id, col)

    depth = np.where(np.isfinite(depth) & (depth <= max_range), depth, 0.0)
    labels = np.where(depth > 0, labels, BACKGROUND_ID)
    colors[depth <= 0] = 0.0
    h, w = intrinsics.height, intrinsics.width
    return depth.reshape(h, w), labels.reshape(h, w), colors.reshape(h, w, 3)


@dataclass(frozen=True)
class RenderConfig:
    max_range: float = 12.0
    min_mask_pixels: int = 50
    depth_noise_sigma: float = 0.0
    noise_seed: int = 0


def lift_detections(depth, labels, color, pose: Pose,
                    intrinsics: CameraIntrinsics, id_to_label: dict,
                    embedder, map_params: MapParams,
                    min_mask_pixels: int = 50) -> list[Detection]:
    """Turn labeled rasters into world-frame detections (one per instance
    with enough visible pixels), denoised per map parameters."""
    detections = []
    h, w = labels.shape
    for obj_id in sorted(int(i) for i in np.unique(labels) if i != BACKGROUND_ID):
        mask = (labels == obj_id) & (depth > 0)
        count = int(mask.sum())
        if count < min_mask_pixels:
            continue
        # frame-edge fragments are unreliable crops of the object, skip them
        if (mask[0, :].any() or mask[h - 1, :].any()
                or mask[:, 0].any() or mask[:, w - 1].any()):
            continue
        vs, us = np.nonzero(mask)
        box = (int(us.min()), int(vs.min()), int(us.max()) + 1, int(vs.max()) + 1)
        cloud = backproject_depth(depth, intrinsics, pose, mask=mask, color=color)
        if map_params.denoise:
            cloud = adaptive_dbscan_filter(cloud, k=map_params.dbscan_k)
        if len(cloud) == 0:
            continue
        detections.append(Detection(
            label=id_to_label[obj_id],
            box=box,
            mask=mask,
            cloud=cloud,
            f_vis=embedder.embed_visual(color, box, mask),
            f_text=embedder.embed_text(id_to_label[obj_id]),
            instance_id=obj_id,
        ))
    return detections


def render_frame(script: ScenarioScript, frame_index: int, embedder,
                 map_params: MapParams, cfg: RenderConfig = RenderConfig()):
    """Render one trajectory frame; returns (Frame, labels, detections)."""
    if not 0 <= frame_index < len(script.trajectory):
        raise ScenarioError("frame index outside trajectory")
    pose = script.trajectory[frame_index]
    state = script.state_at(frame_index)
    depth, labels, color = render_rasters(state, script.floor_extent,
                                          script.floor_color, pose,
                                          script.intrinsics, cfg.max_range)
    if cfg.depth_noise_sigma > 0:
        rng = np.random.default_rng((cfg.noise_seed, frame_index))
        noise = rng.normal(0.0, cfg.depth_noise_sigma, depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-6), 0.0)
    id_to_label = {o.id: o.label for o in state.values()}
    dets = lift_detections(depth, labels, color, pose, script.intrinsics,
                           id_to_label, embedder, map_params,
                           cfg.min_mask_pixels)
    frame = Frame(color=color, depth=depth, pose=pose)
    return frame, labels, dets


def coarse_pose_estimate(true_pose: Pose, sigma_translation: float,
                         sigma_rotation_deg: float, seed: int = 0) -> Pose:
    """Mobile-base style coarse pose: the true pose perturbed by zero-mean
    planar noise (x/y translation, yaw)."""
    rng = np.random.default_rng(seed)
    dx, dy = rng.normal(0.0, sigma_translation, 2)
    dyaw = rng.normal(0.0, np.radians(sigma_rotation_deg))
    rot = rotation_about_z(dyaw) @ true_pose.rotation
    tra = true_pose.translation + np.array([dx, dy, 0.0])
    return Pose(rot, tra)


# --- ground truth ------------------------------------------------------------

def _gt_relation(child: SceneObject, parent: SceneObject,
                 params: RelationParams):
    ca, pa = child.aabb(), parent.aabb()
    c_vol = float(np.prod(ca[1] - ca[0]))
    p_vol = float(np.prod(pa[1] - pa[0]))
    if parent.container and c_vol < p_vol:
        cav = parent.cavity_aabb()
        lo = np.maximum(ca[0], cav[0])
        hi = np.minimum(ca[1], cav[1])
        inter = float(np.prod(np.maximum(hi - lo, 0.0)))
        if c_vol > 0 and inter / c_vol >= params.inside_fraction:
            return INSIDE
    lo = np.maximum(ca[0, :2], pa[0, :2])
    hi = np.minimum(ca[1, :2], pa[1, :2])
    overlap = float(np.prod(np.maximum(hi - lo, 0.0)))
    footprint = max(float(np.prod(ca[1, :2] - ca[0, :2])), 1e-12)
    top = pa[1, 2]
    if (overlap >= params.on_overlap_fraction * footprint
            and top - params.on_z_below <= ca[0, 2] <= top + params.on_z_above):
        return ON
    centroid = (ca[0] + ca[1]) / 2.0
    if (np.all(centroid >= pa[0] - params.belong_dilation)
            and np.all(centroid <= pa[1] + params.belong_dilation)
            and c_vol <= params.belong_volume_ratio * p_vol):
        return BELONG
    return None


_GT_PRIORITY = {INSIDE: 0, ON: 1, BELONG: 2}


def gt_scene_graph(script: ScenarioScript, frame_index: int,
                   params: RelationParams = RelationParams()) -> SceneGraph:
    """Analytic scene graph over the visible objects at a timestep.

    Derived from exact primitive extents, independently of the voxel-based
    predicates used on mapped objects.
    """
    state = script.state_at(frame_index)
    visible = {i: o for i, o in state.items() if not o.hidden}
    edges = {}
    for i in sorted(visible):
        child = visible[i]
        best = None
        for j in sorted(visible):
            if j == i:
                continue
            rel = _gt_relation(child, visible[j], params)
            if rel is None:
                continue
            pa = visible[j].aabb()
            key = (_GT_PRIORITY[rel], float(np.prod(pa[1] - pa[0])), j)
            if best is None or key < best[0]:
                best = (key, j, rel)
        edges[i] = (FLOOR_ID, ON) if best is None else (best[1], best[2])
    return SceneGraph(tuple(sorted(visible)), edges)


# --- scenario JSON -----------------------------------------------------------

def _pose_to_json(pose: Pose) -> list:
    return [[float(x) for x in row] for row in pose.matrix()]


def _pose_from_json(rows) -> Pose:
    return Pose.from_matrix(np.array(rows, dtype=np.float64))


def _object_to_json(o: SceneObject) -> dict:
    return {
        "id": o.id, "label": o.label, "shape": o.shape,
        "size": list(o.size), "pose": _pose_to_json(o.pose),
        "color": list(o.color), "container": o.container, "open": o.open,
        "contains": list(o.contains), "hidden": o.hidden, "wall": o.wall,
    }


def _object_from_json(d: dict) -> SceneObject:
    return SceneObject(
        id=d["id"], label=d["label"], shape=d["shape"], size=tuple(d["size"]),
        pose=_pose_from_json(d["pose"]), color=tuple(d["color"]),
        container=d.get("container", False), open=d.get("open", False),
        contains=tuple(d.get("contains", ())), hidden=d.get("hidden", False),
        wall=d.get("wall", 0.02),
    )


def scenario_to_json(script: ScenarioScript) -> str:
    edits = []
    for e in script.edits:
        entry = {"at_frame": e.at_frame, "kind": e.kind}
        if e.target is not None:
            entry["target"] = e.target
        if e.pose is not None:
            entry["pose"] = _pose_to_json(e.pose)
        if e.obj is not None:
            entry["object"] = _object_to_json(e.obj)
        edits.append(entry)
    data = {
        "format": "dsgraph-scenario-v1",
        "name": script.name,
        "level": script.level,
        "floor_extent": script.floor_extent,
        "floor_color": list(script.floor_color),
        "intrinsics": {
            "fx": script.intrinsics.fx, "fy": script.intrinsics.fy,
            "cx": script.intrinsics.cx, "cy": script.intrinsics.cy,
            "width": script.intrinsics.width, "height": script.intrinsics.height,
        },
        "objects": [_object_to_json(o) for o in script.objects],
        "trajectory": [_pose_to_json(p) for p in script.trajectory],
        "edits": edits,
        "tasks": list(script.tasks),
    }
    return json.dumps(data, indent=2, sort_keys=True)


def scenario_from_json(text: str) -> ScenarioScript:
    data = json.loads(text)
    if data.get("format") != "dsgraph-scenario-v1":
        raise ScenarioError("unrecognized scenario format")
    intr = data["intrinsics"]
    edits = []
    for e in data.get("edits", []):
        edits.append(EditEvent(
            at_frame=e["at_frame"], kind=e["kind"], target=e.get("target"),
            pose=_pose_from_json(e["pose"]) if "pose" in e else None,
            obj=_object_from_json(e["object"]) if "object" in e else None,
        ))
    return ScenarioScript(
        objects=[_object_from_json(o) for o in data["objects"]],
        floor_extent=data["floor_extent"],
        trajectory=[_pose_from_json(p) for p in data["trajectory"]],
        intrinsics=CameraIntrinsics(intr["fx"], intr["fy"], intr["cx"],
                                    intr["cy"], intr["width"], intr["height"]),
        edits=edits,
        tasks=list(data.get("tasks", [])),
        floor_color=tuple(data.get("floor_color", (0.45, 0.40, 0.35))),
        name=data.get("name", "scenario"),
        level=data.get("level"),
    )


def save_scenario(script: ScenarioScript, path) -> None:
    Path(path).write_text(scenario_to_json(script))


def load_scenario(path) -> ScenarioScript:
    return scenario_from_json(Path(path).read_text())


# --- frame datasets ----------------------------------------------------------
#
# A dataset directory holds, per frame NNNN:
#   NNNN.depth.f32   float32 z-depth, row-major height x width, meters, 0 = invalid
#   NNNN.labels.i32  int32 instance ids, -1 = background/floor
#   NNNN.color.u8    uint8 RGB triples, row-major
#   NNNN.pose.txt    4x4 camera-to-world matrix, row-major text
# plus intrinsics.txt ("fx fy cx cy width height") and labels.json mapping
# instance id -> class label.

def write_frame_dataset(script: ScenarioScript, out_dir,
                        cfg: RenderConfig = RenderConfig(),
                        frames: list[int] | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    intr = script.intrinsics
    (out / "intrinsics.txt").write_text(
        f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} {intr.width} {intr.height}\n")
    id_to_label = {}
    indices = frames if frames is not None else range(len(script.trajectory))
    for idx in indices:
        pose = script.trajectory[idx]
        state = script.state_at(idx)
        for o in state.values():
            id_to_label[o.id] = o.label
        depth, labels, color = render_rasters(state, script.floor_extent,
                                              script.floor_color, pose, intr,
                                              cfg.max_range)
        if cfg.depth_noise_sigma > 0:
            rng = np.random.default_rng((cfg.noise_seed, idx))
            noise = rng.normal(0.0, cfg.depth_noise_sigma, depth.shape)
            depth = np.where(depth > 0, np.maximum(depth + noise, 1e-6), 0.0)
        stem = out / f"{idx:04d}"
        depth.astype("<f4").tofile(f"{stem}.depth.f32")
        labels.astype("<i4").tofile(f"{stem}.labels.i32")
        (np.clip(color, 0, 1) * 255).round().astype(np.uint8).tofile(
            f"{stem}.color.u8")
        np.savetxt(f"{stem}.pose.txt", pose.matrix())
    (out / "labels.json").write_text(json.dumps(
        {str(k): v for k, v in sorted(id_to_label.items())}, indent=2))


def read_frame_dataset(dataset_dir):
    """Returns (intrinsics, frames, id_to_label); each frame is a dict with
    depth, labels, color (float in [0,1]) and pose."""
    src = Path(dataset_dir)
    vals = src.joinpath("intrinsics.txt").read_text().split()
    intr = CameraIntrinsics(float(vals[0]), float(vals[1]), float(vals[2]),
                            float(vals[3]), int(vals[4]), int(vals[5]))
    id_to_label = {int(k): v for k, v in
                   json.loads((src / "labels.json").read_text()).items()}
    frames = []
    for depth_file in sorted(src.glob("*.depth.f32")):
        stem = depth_file.name.split(".")[0]
        h, w = intr.height, intr.width
        depth = np.fromfile(depth_file, dtype="<f4").reshape(h, w).astype(np.float64)
        labels = np.fromfile(src / f"{stem}.labels.i32", dtype="<i4").reshape(h, w)
        color = np.fromfile(src / f"{stem}.color.u8", dtype=np.uint8)
        color = color.reshape(h, w, 3).astype(np.float64) / 255.0
        pose = Pose.from_matrix(np.loadtxt(src / f"{stem}.pose.txt"))
        frames.append({"index": int(stem), "depth": depth, "labels": labels,
                       "color": color, "pose": pose})
    return intr, frames, id_to_label
