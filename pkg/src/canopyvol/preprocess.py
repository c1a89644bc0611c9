"""Ground-plane fitting and ground/trunk removal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import CloudLike, PointCloud, as_points
from .errors import FitError, ParameterError

__all__ = ["PlaneModel", "PreprocessParams", "ransac_plane", "plane_heights", "remove_ground_and_trunk"]


@dataclass(frozen=True)
class PreprocessParams:
    ransac_iterations: int = 500
    ransac_distance_threshold: float = 0.15
    trunk_band_height: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if int(self.ransac_iterations) < 1:
            raise ParameterError(f"ransac_iterations must be >= 1, got {self.ransac_iterations}")
        if not self.ransac_distance_threshold > 0:
            raise ParameterError(
                f"ransac_distance_threshold must be positive, got {self.ransac_distance_threshold}"
            )
        if not self.trunk_band_height > 0:
            raise ParameterError(f"trunk_band_height must be positive, got {self.trunk_band_height}")


@dataclass(frozen=True, eq=False)
class PlaneModel:
    """Plane ``normal . p + d = 0`` with ``normal`` unit length, z >= 0."""

    normal: np.ndarray
    d: float
    inlier_indices: np.ndarray

    def signed_distance(self, cloud: CloudLike) -> np.ndarray:
        return as_points(cloud) @ self.normal + self.d


@njit(cache=True, nogil=True)
def _count_inliers(pts, nx, ny, nz, d, thr):
    count = 0
    for i in range(pts.shape[0]):
        dist = pts[i, 0] * nx + pts[i, 1] * ny + pts[i, 2] * nz + d
        if abs(dist) <= thr:
            count += 1
    return count


def _plane_through(a, b, c, scale):
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n)
    # collinear (or coincident) samples
    if norm <= 1e-12 * scale * scale:
        return None
    n = n / norm
    return n, -float(n @ a)


def _orient_up(n, d):
    if n[2] < 0 or (n[2] == 0 and (n[1] < 0 or (n[1] == 0 and n[0] < 0))):
        return -n, -d
    return n, d


def ransac_plane(cloud: CloudLike, params: PreprocessParams = PreprocessParams()) -> PlaneModel:
    """Fit the dominant plane.

    ``params.ransac_iterations`` seeded 3-point hypotheses are scored by inlier
    count (first hypothesis wins ties). The winner is refit by least squares on
    its inliers and inliers are recomputed once against the refit plane.
    """
    pts = np.ascontiguousarray(as_points(cloud))
    n_pts = len(pts)
    if n_pts < 3:
        raise FitError(f"plane fit needs at least 3 points, got {n_pts}")
    thr = float(params.ransac_distance_threshold)
    rng = np.random.default_rng(params.seed)
    samples = np.stack([rng.choice(n_pts, 3, replace=False) for _ in range(int(params.ransac_iterations))])
    scale = max(float(np.ptp(pts, axis=0).max()), 1e-300)

    best = None
    best_count = -1
    for a, b, c in samples:
        plane = _plane_through(pts[a], pts[b], pts[c], scale)
        if plane is None:
            continue
        n, d = plane
        count = _count_inliers(pts, n[0], n[1], n[2], d, thr)
        if count > best_count:
            best, best_count = (n, d), count
    if best is None:
        raise FitError(f"all {len(samples)} RANSAC samples were degenerate (collinear points)")

    n, d = best
    inliers = np.flatnonzero(np.abs(pts @ n + d) <= thr)
    if len(inliers) >= 3:
        sub = pts[inliers]
        center = sub.mean(axis=0)
        _, sv, vt = np.linalg.svd(sub - center, full_matrices=False)
        if sv.shape[0] == 3 and sv[1] > 1e-12 * scale:
            refit_n = vt[2] / np.linalg.norm(vt[2])
            refit_d = -float(refit_n @ center)
            refit_inliers = np.flatnonzero(np.abs(pts @ refit_n + refit_d) <= thr)
            # keep the refit unless it loses support
            if len(refit_inliers) >= 3:
                n, d, inliers = refit_n, refit_d, refit_inliers
    n, d = _orient_up(np.asarray(n, dtype=np.float64), float(d))
    return PlaneModel(normal=n, d=d, inlier_indices=inliers)


def plane_heights(cloud: CloudLike, plane: PlaneModel) -> np.ndarray:
    """Signed height of each point above ``plane`` along its upward normal."""
    return plane.signed_distance(cloud)


def remove_ground_and_trunk(
    cloud: CloudLike,
    params: PreprocessParams = PreprocessParams(),
    return_mask: bool = False,
):
    """Drop ground-plane inliers and everything at or below the trunk band.

    Returns the surviving points in original order; with ``return_mask`` also
    the boolean keep-mask over the input.
    """
    pts = as_points(cloud)
    plane = ransac_plane(pts, params)
    keep = plane_heights(pts, plane) > params.trunk_band_height
    keep[plane.inlier_indices] = False
    note = cloud.frame_note if isinstance(cloud, PointCloud) else ""
    out = PointCloud(pts[keep], note)
    if return_mask:
        return out, keep
    return out
