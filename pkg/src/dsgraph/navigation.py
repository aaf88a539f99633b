"""Occupancy-grid navigation and heuristic tabletop manipulation.

The grid is built from map voxels in a height band (inflated for the robot
footprint), paths come from A* over 8-connected cells, and grasp/placement
poses are derived from simple oriented-box geometry.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, GeometryError, PointCloud, Pose

CELL_FREE = 0
CELL_OCCUPIED = 1
CELL_UNKNOWN = -1


class PlanningError(RuntimeError):
    pass


@dataclass
class OccupancyGrid:
    resolution: float
    origin: np.ndarray              # world xy of the min corner of cell (0, 0)
    cells: np.ndarray               # int8 [nx, ny], values above

    def world_to_cell(self, xy) -> tuple[int, int]:
        xy = np.asarray(xy, dtype=np.float64)
        c = np.floor((xy - self.origin) / self.resolution).astype(int)
        return int(c[0]), int(c[1])

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return self.origin + (np.array([ix, iy]) + 0.5) * self.resolution

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.cells.shape[0] and 0 <= iy < self.cells.shape[1]

    def to_pgm_text(self) -> str:
        """Portable graymap (P2): free 255, unknown 128, occupied 0; rows are
        descending y so the text reads like a map."""
        nx, ny = self.cells.shape
        gray = np.where(self.cells == CELL_FREE, 255,
                        np.where(self.cells == CELL_OCCUPIED, 0, 128))
        rows = [" ".join(str(int(gray[ix, iy])) for ix in range(nx))
                for iy in range(ny - 1, -1, -1)]
        return f"P2\n{nx} {ny}\n255\n" + "\n".join(rows) + "\n"


def _disk_structure(radius_cells: int) -> np.ndarray:
    r = radius_cells
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1),
                         indexing="ij")
    return di * di + dj * dj <= r * r


def build_occupancy_grid(points: np.ndarray, resolution: float = 0.05,
                         z_band: tuple = (0.1, 1.5), inflation: float = 0.25,
                         bounds: np.ndarray | None = None,
                         frustums=None) -> OccupancyGrid:
    """Rasterize map geometry into a navigation grid.

    Cells default to unknown; a cell is free when its center (at z = 0) falls
    inside any observation frustum (pose, intrinsics, max_range), then
    occupied when any point within ``z_band`` lands in it. Occupancy is
    dilated by a euclidean disk of ``inflation`` meters. Without ``frustums``
    every in-bounds cell is treated as observed.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if bounds is None:
        if len(points) == 0:
            raise PlanningError("cannot size a grid from an empty map")
        lo = points[:, :2].min(axis=0) - inflation - resolution
        hi = points[:, :2].max(axis=0) + inflation + resolution
    else:
        bounds = np.asarray(bounds, dtype=np.float64)
        lo, hi = bounds[0, :2].copy(), bounds[1, :2].copy()
    shape = np.maximum(np.ceil((hi - lo) / resolution).astype(int), 1)
    grid = OccupancyGrid(resolution, lo,
                         np.full(tuple(shape), CELL_UNKNOWN, dtype=np.int8))

    if frustums is None:
        grid.cells[:] = CELL_FREE
    else:
        ix, iy = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]),
                             indexing="ij")
        centers = lo + (np.stack([ix, iy], axis=-1).reshape(-1, 2) + 0.5) * resolution
        pts3 = np.column_stack([centers, np.zeros(len(centers))])
        observed = np.zeros(len(pts3), dtype=bool)
        for pose, intr, max_range in frustums:
            cam = pose.inverse().transform(pts3)
            z = cam[:, 2]
            ok = (z > 0) & (z <= max_range)
            u = intr.fx * cam[:, 0] / np.where(ok, z, 1.0) + intr.cx
            v = intr.fy * cam[:, 1] / np.where(ok, z, 1.0) + intr.cy
            ok &= (u >= -0.5) & (u < intr.width - 0.5)
            ok &= (v >= -0.5) & (v < intr.height - 0.5)
            observed |= ok
        grid.cells.reshape(-1)[observed] = CELL_FREE

    band = points[(points[:, 2] >= z_band[0]) & (points[:, 2] <= z_band[1])]
    occ = np.zeros(tuple(shape), dtype=bool)
    if len(band):
        cix = np.floor((band[:, :2] - lo) / resolution).astype(int)
        keep = ((cix[:, 0] >= 0) & (cix[:, 0] < shape[0])
                & (cix[:, 1] >= 0) & (cix[:, 1] < shape[1]))
        occ[cix[keep, 0], cix[keep, 1]] = True
    radius = int(np.ceil(inflation / resolution))
    if radius > 0 and occ.any():
        occ = ndimage.binary_dilation(occ, structure=_disk_structure(radius))
    grid.cells[occ] = CELL_OCCUPIED
    return grid


_MOVES = [(-1, -1, np.sqrt(2)), (-1, 0, 1.0), (-1, 1, np.sqrt(2)),
          (0, -1, 1.0), (0, 1, 1.0),
          (1, -1, np.sqrt(2)), (1, 0, 1.0), (1, 1, np.sqrt(2))]


def _octile(a: tuple, b: tuple) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (dx + dy) + (np.sqrt(2) - 2.0) * min(dx, dy)


def _reachable_from(grid: OccupancyGrid, start: tuple) -> np.ndarray:
    free = grid.cells == CELL_FREE
    seen = np.zeros_like(free)
    seen[start] = True
    stack = [start]
    while stack:
        x, y = stack.pop()
        for dx, dy, _ in _MOVES:
            nx, ny = x + dx, y + dy
            if (grid.in_bounds(nx, ny) and free[nx, ny] and not seen[nx, ny]):
                seen[nx, ny] = True
                stack.append((nx, ny))
    return seen


def _select_goal_cell(grid: OccupancyGrid, start: tuple, goal_xy,
                      reach_radius: float) -> tuple:
    """Nearest reachable free cell within reach of the goal point (ordered by
    distance, then cell index)."""
    goal_xy = np.asarray(goal_xy, dtype=np.float64)
    free_ix, free_iy = np.nonzero(grid.cells == CELL_FREE)
    centers = grid.origin + (np.stack([free_ix, free_iy], axis=1) + 0.5) * grid.resolution
    dist = np.linalg.norm(centers - goal_xy, axis=1)
    near = dist <= reach_radius
    if not near.any():
        raise PlanningError("no free cell within reach of the goal")
    order = np.lexsort((free_iy[near], free_ix[near], dist[near]))
    reachable = _reachable_from(grid, start)
    for i in order:
        cand = (int(free_ix[near][i]), int(free_iy[near][i]))
        if reachable[cand]:
            return cand
    raise PlanningError("goal region is unreachable from the start")


def astar_path(grid: OccupancyGrid, start_xy, goal_xy,
               reach_radius: float = 0.5):
    """Shortest 8-connected path from start toward a goal point.

    The target cell is the nearest reachable free cell within ``reach_radius``
    of the goal (candidates ordered by distance then cell index). Returns
    (waypoints, cost): world xy cell centers including the start cell, and the
    traversed path length in meters.
    """
    start = grid.world_to_cell(start_xy)
    if not grid.in_bounds(*start) or grid.cells[start] != CELL_FREE:
        raise PlanningError("start position is not in free space")
    goal = _select_goal_cell(grid, start, goal_xy, reach_radius)

    g = {start: 0.0}
    came: dict = {}
    heap = [(_octile(start, goal) * grid.resolution, 0.0, start)]
    closed = set()
    while heap:
        f, gc, node = heapq.heappop(heap)
        if node in closed:
            continue
        if node == goal:
            break
        closed.add(node)
        for dx, dy, step in _MOVES:
            nxt = (node[0] + dx, node[1] + dy)
            if not grid.in_bounds(*nxt) or grid.cells[nxt] != CELL_FREE:
                continue
            ng = gc + step * grid.resolution
            if ng < g.get(nxt, np.inf) - 1e-12:
                g[nxt] = ng
                came[nxt] = node
                heapq.heappush(heap, (ng + _octile(goal, nxt) * grid.resolution,
                                      ng, nxt))
    if goal not in g:
        raise PlanningError("search exhausted without reaching the goal")
    path = [goal]
    while path[-1] != start:
        path.append(came[path[-1]])
    path.reverse()
    waypoints = np.array([grid.cell_center(ix, iy) for ix, iy in path])
    return waypoints, g[goal]


def dijkstra_cost(grid: OccupancyGrid, start_xy, goal_xy,
                  reach_radius: float = 0.5) -> float:
    """Uninformed reference cost to the same goal cell ``astar_path`` uses."""
    start = grid.world_to_cell(start_xy)
    if not grid.in_bounds(*start) or grid.cells[start] != CELL_FREE:
        raise PlanningError("start position is not in free space")
    goal = _select_goal_cell(grid, start, goal_xy, reach_radius)
    g = {start: 0.0}
    heap = [(0.0, start)]
    done = set()
    while heap:
        gc, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == goal:
            return gc
        for dx, dy, step in _MOVES:
            nxt = (node[0] + dx, node[1] + dy)
            if not grid.in_bounds(*nxt) or grid.cells[nxt] != CELL_FREE:
                continue
            ng = gc + step * grid.resolution
            if ng < g.get(nxt, np.inf) - 1e-12:
                g[nxt] = ng
                heapq.heappush(heap, (ng, nxt))
    raise PlanningError("search exhausted without reaching the goal")


# --- manipulation ------------------------------------------------------------

def place_height(cloud_base: PointCloud) -> tuple:
    """Placement point over a support surface observed in the robot base frame
    (x forward, z up).

    Returns (x, y, z): per-axis medians for x/y and a drop height 0.1 m above
    the tallest surface point in the strip 0 <= x <= x_median, |y - y_median|
    < 0.1.
    """
    pts = cloud_base.points
    if len(pts) == 0:
        raise GeometryError("empty cloud for placement")
    xm = float(np.median(pts[:, 0]))
    ym = float(np.median(pts[:, 1]))
    strip = pts[(pts[:, 0] >= 0) & (pts[:, 0] <= xm)
                & (np.abs(pts[:, 1] - ym) < 0.1)]
    if len(strip) == 0:
        raise GeometryError("no surface points between robot and target")
    return xm, ym, float(strip[:, 2].max()) + 0.1


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    extents: np.ndarray             # full side lengths along the box axes
    rotation: np.ndarray            # columns are the box axes in world

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "extents", np.asarray(self.extents, float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, float))


@dataclass(frozen=True)
class GraspProposal:
    pose: Pose                      # gripper frame: x closing, z approach
    width: float
    from_above: bool


def oriented_box_from_cloud(cloud: PointCloud) -> OrientedBox:
    """Yaw-aligned bounding box: vertical axis fixed to world z, horizontal
    axes from the xy covariance eigenvectors."""
    pts = cloud.points
    if len(pts) < 3:
        raise GeometryError("too few points for an oriented box")
    xy = pts[:, :2] - pts[:, :2].mean(axis=0)
    cov = xy.T @ xy / len(xy)
    _, vecs = np.linalg.eigh(cov)
    major = vecs[:, 1]
    if major[0] < 0 or (major[0] == 0 and major[1] < 0):
        major = -major
    ax0 = np.array([major[0], major[1], 0.0])
    ax1 = np.array([-major[1], major[0], 0.0])
    rot = np.stack([ax0, ax1, np.array([0.0, 0.0, 1.0])], axis=1)
    local = pts @ rot
    lo, hi = local.min(axis=0), local.max(axis=0)
    center = rot @ ((lo + hi) / 2.0)
    return OrientedBox(center, hi - lo, rot)


def heuristic_grasp_orientation(box: OrientedBox, max_opening: float = 0.08,
                                margin: float = 0.01) -> GraspProposal:
    """Top/side grasp from box geometry.

    The gripper closes across the smaller horizontal extent (ties broken
    toward the axis most aligned with world x) and approaches from above when
    the box is shorter than its remaining horizontal extent, otherwise from
    the side. Fails when the closing extent exceeds the gripper opening.
    """
    axes = [box.rotation[:, i] for i in range(3)]
    vert = int(np.argmax([abs(a[2]) for a in axes]))
    horiz = [i for i in range(3) if i != vert]
    e = box.extents
    if e[horiz[0]] < e[horiz[1]] - 1e-12:
        close_i = horiz[0]
    elif e[horiz[1]] < e[horiz[0]] - 1e-12:
        close_i = horiz[1]
    else:
        close_i = max(horiz, key=lambda i: (abs(axes[i][0]), -i))
    other_i = horiz[0] if close_i == horiz[1] else horiz[1]
    closing_extent = float(e[close_i])
    if closing_extent > max_opening:
        raise GeometryError(
            f"object spans {closing_extent:.3f} m, wider than the "
            f"{max_opening:.3f} m gripper opening")
    width = closing_extent + margin

    height = float(e[vert])
    from_above = height < float(e[other_i])
    x_axis = axes[close_i].copy()
    if x_axis[0] < 0 or (x_axis[0] == 0 and (x_axis[1] < 0 or
                                             (x_axis[1] == 0 and x_axis[2] < 0))):
        x_axis = -x_axis
    if from_above:
        z_axis = np.array([0.0, 0.0, -1.0])
        x_axis = x_axis - z_axis * (x_axis @ z_axis)
        x_axis = x_axis / np.linalg.norm(x_axis)
    else:
        z_axis = axes[other_i].copy()
        z_axis[2] = 0.0
        n = np.linalg.norm(z_axis)
        if n < 1e-9:
            z_axis = np.array([1.0, 0.0, 0.0])
        else:
            z_axis = z_axis / n
        if z_axis[0] < 0 or (z_axis[0] == 0 and z_axis[1] < 0):
            z_axis = -z_axis
        z_axis = -z_axis            # approach points toward the object
        x_axis = x_axis - z_axis * (x_axis @ z_axis)
        x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rot = np.stack([x_axis, y_axis, z_axis], axis=1)
    return GraspProposal(Pose(rot, box.center), float(width), bool(from_above))


def crop_around_target(cloud: PointCloud, bbox: np.ndarray,
                       margin: float = 0.1) -> PointCloud:
    """Points within an axis-aligned bbox dilated by ``margin``."""
    bbox = np.asarray(bbox, dtype=np.float64)
    lo, hi = bbox[0] - margin, bbox[1] + margin
    pts = cloud.points
    keep = np.all((pts >= lo) & (pts <= hi), axis=1)
    return cloud.select(np.nonzero(keep)[0])
