"""Geometric substrate: rigid poses, pinhole camera math, voxel grids, plane
alignment and point-cloud denoising.

Conventions used throughout the package:
  - world frame: +z up, metric units (meters)
  - camera frame: +x right, +y down, +z forward (optical axis)
  - pixel (u, v): u is the column, v is the row; rasters are indexed [v, u]
  - depth rasters hold z-depth in meters; 0 or non-finite marks invalid pixels
  - colors are float RGB in [0, 1]
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN


class GeometryError(ValueError):
    """Degenerate or invalid geometric input."""


_ORTHO_TOL = 1e-6
# voxel index packing: supports coordinates up to +-2^20 cells per axis
_PACK_BITS = 21
_PACK_OFF = 1 << 20


def _as_float_array(values, shape_tail=None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if shape_tail is not None and arr.shape[-len(shape_tail):] != shape_tail:
        raise GeometryError(f"expected trailing shape {shape_tail}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid transform. ``rotation`` is a 3x3 matrix, ``translation`` a 3-vector.

    ``transform(p)`` maps points from the pose's source frame into its target
    frame (a camera pose maps camera coordinates to world coordinates).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _as_float_array(self.rotation, (3, 3))
        tra = _as_float_array(self.translation, (3,))
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tra)):
            raise GeometryError("pose contains non-finite entries")
        if np.abs(rot @ rot.T - np.eye(3)).max() > _ORTHO_TOL * 10:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL * 10:
            raise GeometryError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix) -> "Pose":
        m = _as_float_array(matrix, (4, 4))
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self @ other)(p) == self(other(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points) -> np.ndarray:
        pts = _as_float_array(points)
        return pts @ self.rotation.T + self.translation


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; ``axis`` need not be unit length."""
    axis = _as_float_array(axis, (3,))
    n = np.linalg.norm(axis)
    if n < 1e-12 or abs(angle) < 1e-15:
        return np.eye(3)
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("raster dimensions must be positive")


class PointCloud:
    """Points with parallel per-point RGB colors."""

    def __init__(self, points, colors=None):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if colors is None:
            cols = np.zeros_like(pts)
        else:
            cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if len(cols) != len(pts):
            raise GeometryError("points and colors must have equal length")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("points contain non-finite values")
        self.points = pts
        self.colors = cols

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.transform(self.points), self.colors.copy())

    def select(self, index) -> "PointCloud":
        return PointCloud(self.points[index], self.colors[index])

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.vstack([self.points, other.points]),
                          np.vstack([self.colors, other.colors]))


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    k = keys.astype(np.int64) + _PACK_OFF
    if k.min(initial=0) < 0 or k.max(initial=0) >= (1 << _PACK_BITS):
        raise GeometryError("voxel index out of packable range")
    return (k[:, 0] << (2 * _PACK_BITS)) | (k[:, 1] << _PACK_BITS) | k[:, 2]


def _unpack_keys(codes: np.ndarray) -> np.ndarray:
    mask = (1 << _PACK_BITS) - 1
    out = np.empty((len(codes), 3), dtype=np.int64)
    out[:, 0] = (codes >> (2 * _PACK_BITS)) & mask
    out[:, 1] = (codes >> _PACK_BITS) & mask
    out[:, 2] = codes & mask
    return out - _PACK_OFF


class VoxelGrid:
    """Sparse voxel grid keyed by floor(coord / resolution) per axis.

    Each occupied voxel stores the centroid of its member points, the mean
    member color and the member count, so incremental merges keep exact
    running-centroid semantics.
    """

    def __init__(self, resolution: float):
        if resolution <= 0:
            raise GeometryError("voxel resolution must be positive")
        self.resolution = float(resolution)
        self._codes = np.zeros(0, dtype=np.int64)
        self._points = np.zeros((0, 3))
        self._colors = np.zeros((0, 3))
        self._counts = np.zeros(0, dtype=np.int64)
        self._index: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._codes)

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def colors(self) -> np.ndarray:
        return self._colors

    @property
    def counts(self) -> np.ndarray:
        return self._counts

    def keys(self) -> np.ndarray:
        return _unpack_keys(self._codes)

    def key_codes(self) -> np.ndarray:
        return self._codes

    def _rebuild_index(self):
        self._index = {int(c): i for i, c in enumerate(self._codes)}

    def _grouped(self, points: np.ndarray, colors: np.ndarray):
        keys = np.floor(points / self.resolution).astype(np.int64)
        codes = _pack_keys(keys)
        uniq, inv = np.unique(codes, return_inverse=True)
        n = len(uniq)
        psum = np.zeros((n, 3))
        csum = np.zeros((n, 3))
        np.add.at(psum, inv, points)
        np.add.at(csum, inv, colors)
        cnt = np.bincount(inv, minlength=n).astype(np.int64)
        return uniq, psum, csum, cnt

    def merge_points(self, points, colors=None) -> int:
        """Insert points, updating per-voxel centroids. Returns #voxels added."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        cols = (np.zeros_like(pts) if colors is None
                else np.asarray(colors, dtype=np.float64).reshape(-1, 3))
        uniq, psum, csum, cnt = self._grouped(pts, cols)
        rows = np.array([self._index.get(int(c), -1) for c in uniq], dtype=np.int64)
        hit = rows >= 0
        if hit.any():
            r = rows[hit]
            tot = (self._counts[r] + cnt[hit]).astype(np.float64)[:, None]
            self._points[r] = (self._points[r] * self._counts[r][:, None] + psum[hit]) / tot
            self._colors[r] = (self._colors[r] * self._counts[r][:, None] + csum[hit]) / tot
            self._counts[r] += cnt[hit]
        new = ~hit
        added = int(new.sum())
        if added:
            self._codes = np.concatenate([self._codes, uniq[new]])
            self._points = np.vstack([self._points, psum[new] / cnt[new][:, None]])
            self._colors = np.vstack([self._colors, csum[new] / cnt[new][:, None]])
            self._counts = np.concatenate([self._counts, cnt[new]])
            self._rebuild_index()
        return added

    def delete(self, row_mask: np.ndarray) -> int:
        """Remove voxels where row_mask is True. Returns #voxels removed."""
        row_mask = np.asarray(row_mask, dtype=bool)
        removed = int(row_mask.sum())
        if removed == 0:
            return 0
        keep = ~row_mask
        self._codes = self._codes[keep]
        self._points = self._points[keep]
        self._colors = self._colors[keep]
        self._counts = self._counts[keep]
        self._rebuild_index()
        return removed

    def as_cloud(self) -> PointCloud:
        return PointCloud(self._points.copy(), self._colors.copy())

    def copy(self) -> "VoxelGrid":
        g = VoxelGrid(self.resolution)
        g._codes = self._codes.copy()
        g._points = self._points.copy()
        g._colors = self._colors.copy()
        g._counts = self._counts.copy()
        g._rebuild_index()
        return g

    def bbox(self) -> np.ndarray:
        """Axis-aligned (2, 3) bounds over voxel cubes (reps padded by res/2)."""
        if len(self) == 0:
            raise GeometryError("bbox of empty voxel grid")
        half = self.resolution / 2.0
        return np.array([self._points.min(axis=0) - half,
                         self._points.max(axis=0) + half])

    def digest(self) -> str:
        """Content hash over the occupied voxel set (order-independent)."""
        return hashlib.sha1(np.sort(self._codes).tobytes()).hexdigest()


def voxel_downsample(cloud: PointCloud, resolution: float) -> VoxelGrid:
    """Quantize a cloud onto a voxel grid; one centroid/mean-color rep per cell."""
    if resolution <= 0:
        raise GeometryError("voxel resolution must be positive")
    grid = VoxelGrid(resolution)
    grid.merge_points(cloud.points, cloud.colors)
    return grid


def project_to_pixels(points, camera_pose: Pose, intrinsics: CameraIntrinsics):
    """Project world points through a pinhole camera.

    Returns (uv, depth, index): continuous pixel coordinates, z-depth and the
    index of the source point, keeping only points in front of the camera
    whose rounded pixel lands inside the raster.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = camera_pose.inverse().transform(pts)
    z = cam[:, 2]
    front = z > 0
    idx = np.nonzero(front)[0]
    cam = cam[front]
    z = z[front]
    u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    inside = ((u >= -0.5) & (u < intrinsics.width - 0.5)
              & (v >= -0.5) & (v < intrinsics.height - 0.5))
    uv = np.stack([u[inside], v[inside]], axis=1)
    return uv, z[inside], idx[inside]


def bbox_in_frustum(lo, hi, camera_pose: Pose,
                    intrinsics: CameraIntrinsics) -> bool:
    """Conservative test whether an axis-aligned box can project into the
    raster: False only when the box provably misses the view frustum."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    cam = camera_pose.inverse().transform(corners)
    if (cam[:, 2] <= 0).all():
        return False
    # frustum side planes as half-spaces a (.) p >= 0 valid for any z sign:
    # the box and each half-space are convex, so all corners strictly outside
    # one plane separates them
    w, h = intrinsics.width, intrinsics.height
    planes = np.array([
        [intrinsics.fx, 0.0, intrinsics.cx + 0.5],
        [-intrinsics.fx, 0.0, w - 0.5 - intrinsics.cx],
        [0.0, intrinsics.fy, intrinsics.cy + 0.5],
        [0.0, -intrinsics.fy, h - 0.5 - intrinsics.cy],
    ])
    return not ((cam @ planes.T) < 0).all(axis=0).any()


def backproject_depth(depth: np.ndarray, intrinsics: CameraIntrinsics,
                      camera_pose: Pose, mask: np.ndarray | None = None,
                      color: np.ndarray | None = None) -> PointCloud:
    """Lift a depth raster to a world-frame cloud. Invalid depth (<= 0 or
    non-finite) is skipped; ``mask`` optionally restricts the pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intrinsics.height, intrinsics.width):
        raise GeometryError("depth raster does not match intrinsics dimensions")
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise GeometryError("mask does not match raster dimensions")
        valid &= mask
    v, u = np.nonzero(valid)
    z = depth[v, u]
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    cam = np.stack([x, y, z], axis=1)
    world = camera_pose.transform(cam)
    cols = None
    if color is not None:
        color = np.asarray(color, dtype=np.float64)
        cols = color[v, u]
    return PointCloud(world, cols)


def _fit_plane_lsq(points: np.ndarray):
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered
    w, vecs = np.linalg.eigh(cov)
    normal = vecs[:, 0]
    return normal / np.linalg.norm(normal), centroid


def _orient_up(normal: np.ndarray) -> np.ndarray:
    # deterministic sign: prefer +z, then +x, then +y
    for i in (2, 0, 1):
        if abs(normal[i]) > 1e-12:
            return normal if normal[i] > 0 else -normal
    return normal


def fit_floor_alignment(floor_points, ransac_iterations: int = 1000,
                        inlier_threshold: float = 0.01, seed: int = 0) -> Pose:
    """RANSAC plane fit with least-squares refit on the inliers.

    Returns the transform that maps the fitted plane onto z = 0 with +z up,
    so applying it to the inliers leaves |z| <= inlier_threshold.
    """
    pts = floor_points.points if isinstance(floor_points, PointCloud) else \
        np.asarray(floor_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise GeometryError("plane fit needs at least 3 points")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(ransac_iterations):
        sample = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(sample[1] - sample[0], sample[2] - sample[0])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = n @ sample[0]
        inliers = np.abs(pts @ n - d) <= inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < 3:
        raise GeometryError("degenerate input: no non-collinear sample found")
    normal, centroid = _fit_plane_lsq(pts[best_inliers])
    normal = _orient_up(normal)
    d = float(normal @ centroid)
    z_axis = np.array([0.0, 0.0, 1.0])
    axis = np.cross(normal, z_axis)
    angle = float(np.arccos(np.clip(normal @ z_axis, -1.0, 1.0)))
    rotation = rotation_from_axis_angle(axis, angle)
    return Pose(rotation, np.array([0.0, 0.0, -d]))


def _densest_cluster(points: np.ndarray, k: int) -> tuple[np.ndarray, float] | None:
    """Membership mask of the largest DBSCAN cluster plus the eps used, or
    None if no cluster forms.

    eps = 2 * median distance to the k-th nearest neighbor, min-points = k.
    Size ties pick the cluster with the lowest member index.
    """
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=k + 1)
    eps = 2.0 * float(np.median(dists[:, k]))
    if eps <= 0:
        return None
    labels = DBSCAN(eps=eps, min_samples=k).fit(points).labels_
    cluster_ids = [c for c in np.unique(labels) if c >= 0]
    if not cluster_ids:
        return None
    sizes = {c: int((labels == c).sum()) for c in cluster_ids}
    best_size = max(sizes.values())
    tied = [c for c in cluster_ids if sizes[c] == best_size]
    first_member = {c: int(np.nonzero(labels == c)[0][0]) for c in tied}
    chosen = min(tied, key=lambda c: first_member[c])
    return labels == chosen, eps


def adaptive_dbscan_filter(cloud: PointCloud, k: int = 10,
                           exact_below: int = 2000) -> PointCloud:
    """Keep the densest cluster of a cloud; eps adapts to local point spacing.

    eps = 2 * median distance to the k-th nearest neighbor, min-points = k.
    Clouds with at most k points are returned unchanged, as are clouds where
    no cluster forms.  Size ties pick the cluster with the lowest member
    index.  Clouds larger than ``exact_below`` are clustered on an evenly
    strided subsample and points within eps of the kept subsample survive.
    """
    if len(cloud) <= k:
        return cloud
    pts = cloud.points
    if len(pts) <= exact_below:
        res = _densest_cluster(pts, k)
        if res is None:
            return cloud
        return cloud.select(res[0])
    stride = len(pts) // exact_below + 1
    sub = pts[::stride]
    res = _densest_cluster(sub, k)
    if res is None:
        return cloud
    mask, eps = res
    d, _ = cKDTree(sub[mask]).query(pts, distance_upper_bound=eps)
    return cloud.select(np.isfinite(d))
