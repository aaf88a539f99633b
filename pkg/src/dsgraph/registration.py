"""Multi-scale colored ICP refinement.

Point-to-plane geometric residuals blended with a per-point photometric
residual (intensity against a tangent-plane color gradient on the target),
solved by Gauss-Newton over a 6-dof twist, coarse-to-fine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (GeometryError, PointCloud, Pose, rotation_from_axis_angle,
                       voxel_downsample)

DEFAULT_SCALES = ((0.05, 50), (0.025, 30), (0.0125, 14), (0.00625, 10))


@dataclass(frozen=True)
class IcpParams:
    scales: tuple = DEFAULT_SCALES        # (voxel size m, max iterations) coarse->fine
    color_weight: float = 0.3             # photometric blend in [0, 1)
    corr_scale: float = 3.0               # correspondence distance = corr_scale * voxel
    normal_neighbors: int = 20
    convergence: float = 1e-10

    def __post_init__(self):
        if not self.scales:
            raise GeometryError("icp needs at least one scale")
        if not 0.0 <= self.color_weight < 1.0:
            raise GeometryError("color_weight must be in [0, 1)")


class RegistrationError(RuntimeError):
    """ICP could not run; carries the initial pose as a fallback."""

    def __init__(self, message: str, fallback: Pose):
        super().__init__(message)
        self.fallback = fallback


class IcpResult(NamedTuple):
    pose: Pose
    fitness: float
    rmse: float
    degenerate: bool = False


def _estimate_normals(points: np.ndarray, tree: cKDTree, k: int) -> np.ndarray:
    k = min(k, len(points))
    _, idx = tree.query(points, k=k)
    neigh = points[idx]                      # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]                     # smallest-eigenvalue direction


def _intensity(colors: np.ndarray) -> np.ndarray:
    return colors.mean(axis=1)


def _color_gradients(points: np.ndarray, normals: np.ndarray,
                     intensity: np.ndarray, tree: cKDTree, k: int) -> np.ndarray:
    """Least-squares intensity gradient in each point's tangent plane."""
    k = min(k, len(points))
    _, idx = tree.query(points, k=k)
    rel = points[idx] - points[:, None, :]                  # (n, k, 3)
    dot = np.einsum("nkj,nj->nk", rel, normals)
    tangent = rel - dot[:, :, None] * normals[:, None, :]   # projected offsets
    di = intensity[idx] - intensity[:, None]
    m = np.einsum("nki,nkj->nij", tangent, tangent)
    m += k * np.einsum("ni,nj->nij", normals, normals)      # pin the normal component
    m += 1e-12 * np.eye(3)
    rhs = np.einsum("nki,nk->ni", tangent, di)
    return np.linalg.solve(m, rhs[..., None])[..., 0]


def _twist_matrix(twist: np.ndarray) -> np.ndarray:
    rot = rotation_from_axis_angle(twist[:3], float(np.linalg.norm(twist[:3])))
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = twist[3:]
    return m


def _evaluate(src_points: np.ndarray, tree: cKDTree, transform: np.ndarray,
              max_dist: float) -> tuple[float, float]:
    pts = src_points @ transform[:3, :3].T + transform[:3, 3]
    d, j = tree.query(pts, distance_upper_bound=max_dist)
    hit = np.isfinite(d)
    if not hit.any():
        return 0.0, 0.0
    return float(hit.mean()), float(np.sqrt(np.mean(d[hit] ** 2)))


def icp_refine(source: PointCloud, target: PointCloud, initial: Pose,
               params: IcpParams = IcpParams()) -> IcpResult:
    """Align ``source`` onto ``target`` starting from ``initial``.

    Returns the refined pose with fitness (inlier fraction at the finest
    correspondence distance) and inlier RMSE.  The result is never worse in
    fitness than the initial alignment; if no correspondences exist at the
    coarsest scale a RegistrationError carrying ``initial`` is raised.
    """
    if len(source) == 0 or len(target) == 0:
        raise GeometryError("icp needs non-empty clouds")
    lam = params.color_weight
    current = initial.matrix()
    degenerate = False
    finest = None
    for level, (voxel, max_iter) in enumerate(params.scales):
        src = voxel_downsample(source, voxel)
        tgt = voxel_downsample(target, voxel)
        sp, sc = src.points, _intensity(src.colors)
        tp = tgt.points
        tree = cKDTree(tp)
        normals = _estimate_normals(tp, tree, params.normal_neighbors)
        grads = None
        if lam > 0:
            grads = _color_gradients(tp, normals, _intensity(tgt.colors), tree,
                                     params.normal_neighbors)
        corr = params.corr_scale * voxel
        finest = (sp, sc, tree, corr)
        for it in range(max_iter):
            x = sp @ current[:3, :3].T + current[:3, 3]
            d, j = tree.query(x, distance_upper_bound=corr)
            valid = np.isfinite(d)
            if not valid.any():
                if level == 0 and it == 0:
                    raise RegistrationError("no correspondences at coarsest scale",
                                            initial)
                break
            xi, ji = x[valid], j[valid]
            n, q = normals[ji], tp[ji]
            r_g = np.einsum("ij,ij->i", xi - q, n)
            jac_g = np.hstack([np.cross(xi, n), n])
            w_g = np.sqrt(1.0 - lam)
            jtj = w_g ** 2 * (jac_g.T @ jac_g)
            jtr = w_g ** 2 * (jac_g.T @ r_g)
            if lam > 0:
                g = grads[ji]
                r_c = sc[valid] - _intensity(tgt.colors[ji]) - np.einsum(
                    "ij,ij->i", g, xi - q)
                jac_c = np.hstack([-np.cross(xi, g), -g])
                jtj += lam * (jac_c.T @ jac_c)
                jtr += lam * (jac_c.T @ r_c)
            eig = np.linalg.eigvalsh(jtj)
            if eig[0] < 1e-9 * max(eig[-1], 1e-12):
                degenerate = True
                jtj = jtj + 1e-6 * max(eig[-1], 1e-9) * np.eye(6)
            twist = np.linalg.solve(jtj, -jtr)
            current = _twist_matrix(twist) @ current
            if np.linalg.norm(twist) < params.convergence:
                break
    sp, _, tree, corr = finest
    fitness, rmse = _evaluate(sp, tree, current, corr)
    fit0, rmse0 = _evaluate(sp, tree, initial.matrix(), corr)
    if fitness < fit0:
        return IcpResult(initial, fit0, rmse0, degenerate)
    return IcpResult(Pose(current[:3, :3], current[:3, 3]), fitness, rmse,
                     degenerate)
