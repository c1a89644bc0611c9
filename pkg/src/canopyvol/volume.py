"""Canopy volume by convex hull and alpha shape.

The alpha shape here is the alpha complex of the Delaunay tetrahedralization:
tetrahedra whose circumradius is at most ``alpha`` are kept and their volumes
summed. For ``alpha`` above every circumradius it equals the hull volume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .core import CloudLike, as_points, voxel_downsample
from .delaunay import delaunay_tetrahedra
from .errors import DegenerateGeometryError, ParameterError, TopologyError

__all__ = [
    "TriangleMesh",
    "AlphaComplex",
    "TreeVolume",
    "jitter_points",
    "convex_hull",
    "mesh_volume",
    "tetra_volumes",
    "circumradii",
    "alpha_complex",
    "alpha_shape_volume",
    "estimate_tree_volumes",
]

JITTER = 1e-9


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (v, 3)
    faces: np.ndarray  # (f, 3), counter-clockwise seen from outside


@dataclass(frozen=True, eq=False)
class AlphaComplex:
    points: np.ndarray
    tetrahedra: np.ndarray  # kept tetrahedra, (m, 4) indices into points
    alpha: float
    volume: float


@dataclass(frozen=True)
class TreeVolume:
    convex_hull: float
    alpha_shape: float
    n_points: int
    degenerate: bool = False
    error: Optional[str] = None


def jitter_points(points: CloudLike, seed: int = 0, amplitude: float = JITTER) -> np.ndarray:
    """Centre the points and add a seeded uniform offset in ``±amplitude`` to
    every coordinate.

    Centring keeps predicate round-off small for map-frame coordinates;
    volumes are translation invariant.
    """
    pts = as_points(points)
    rng = np.random.default_rng(seed)
    return (pts - pts.mean(axis=0)) + rng.uniform(-amplitude, amplitude, pts.shape)


def _check_solid(pts: np.ndarray) -> None:
    if len(pts) < 4:
        raise DegenerateGeometryError(f"need at least 4 points for a volume, got {len(pts)}")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0.0 or sv[2] <= 1e-7 * sv[0]:
        raise DegenerateGeometryError("points are coplanar or collinear")


def convex_hull(points: CloudLike) -> TriangleMesh:
    """Triangulated convex hull with outward-facing faces.

    Only hull vertices are kept in the mesh.
    """
    pts = as_points(points)
    _check_solid(pts)
    center = pts.mean(axis=0)
    try:
        hull = ConvexHull(pts - center)
    except QhullError as exc:
        raise DegenerateGeometryError(f"convex hull failed: {exc}".splitlines()[0]) from None
    simp = hull.simplices.copy()
    v = pts[simp] - center
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = (normal * hull.equations[:, :3]).sum(axis=1) < 0
    simp[flip] = simp[flip][:, [0, 2, 1]]
    used, faces = np.unique(simp, return_inverse=True)
    return TriangleMesh(vertices=pts[used].copy(), faces=faces.reshape(-1, 3).astype(np.int64))


def _check_closed(faces: np.ndarray) -> None:
    if len(faces) == 0:
        raise TopologyError("mesh has no faces")
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    _, counts = np.unique(undirected, axis=0, return_counts=True)
    if (counts != 2).any():
        raise TopologyError(f"{int((counts != 2).sum())} edges are not shared by exactly two faces")
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    if (dcounts != 1).any():
        raise TopologyError("faces are not consistently oriented")


def mesh_volume(mesh: TriangleMesh) -> float:
    """Enclosed volume of a closed, outward-oriented triangle mesh."""
    faces = np.asarray(mesh.faces, dtype=np.int64)
    _check_closed(faces)
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    # any reference point works for a closed mesh; the vertex mean limits round-off
    v = verts[faces] - verts.mean(axis=0)
    det = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))
    return float(det.sum() / 6.0)


def tetra_volumes(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = points[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def circumradii(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Circumsphere radius of each tetrahedron (``inf`` for flat ones)."""
    p = points[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    bxc = np.cross(b, c)
    cxa = np.cross(c, a)
    axb = np.cross(a, b)
    den = 2.0 * np.einsum("ij,ij->i", a, bxc)
    num = (
        (a * a).sum(axis=1)[:, None] * bxc
        + (b * b).sum(axis=1)[:, None] * cxa
        + (c * c).sum(axis=1)[:, None] * axb
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.linalg.norm(num, axis=1) / np.abs(den)
    r[~np.isfinite(r)] = np.inf
    return r


def alpha_complex(points: CloudLike, alpha: float, seed: int = 0) -> AlphaComplex:
    """Delaunay tetrahedra of the jittered points with circumradius <= alpha."""
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    pts = as_points(points)
    _check_solid(pts)
    jit = jitter_points(pts, seed)
    tets = delaunay_tetrahedra(jit, seed)
    keep = circumradii(jit, tets) <= alpha
    kept = tets[keep]
    return AlphaComplex(points=jit, tetrahedra=kept, alpha=float(alpha),
                        volume=float(tetra_volumes(jit, kept).sum()))


def alpha_shape_volume(points: CloudLike, alpha: float, seed: int = 0) -> float:
    """Sum of the volumes of Delaunay tetrahedra with circumradius <= alpha."""
    return alpha_complex(points, alpha, seed).volume


def _cluster_volume(pts: np.ndarray, alpha: float, resolution: Optional[float], seed: int) -> TreeVolume:
    if resolution is not None and len(pts):
        pts = voxel_downsample(pts, resolution).points
    try:
        _check_solid(pts)
        jit = jitter_points(pts, seed)
        # both volumes come from the same jittered geometry so alpha <= hull holds
        hull = mesh_volume(convex_hull(jit))
        tets = delaunay_tetrahedra(jit, seed)
        kept = tets[circumradii(jit, tets) <= alpha]
        alpha_vol = float(tetra_volumes(jit, kept).sum())
    except (DegenerateGeometryError, TopologyError) as exc:
        return TreeVolume(0.0, 0.0, len(pts), degenerate=True, error=str(exc))
    return TreeVolume(hull, alpha_vol, len(pts))


def estimate_tree_volumes(
    cloud: CloudLike,
    clusters: Sequence,
    alpha: float = 0.9,
    downsample_resolution: Optional[float] = 0.1,
    seed: int = 0,
    executor=None,
) -> List[TreeVolume]:
    """Convex-hull and alpha-shape volume for every cluster, in cluster order.

    Each cluster is voxel-downsampled first (skipped when
    ``downsample_resolution`` is None). Degenerate clusters are flagged with
    zero volumes instead of aborting the batch.
    """
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    pts = as_points(cloud)

    def one(cluster):
        idx = getattr(cluster, "point_indices", cluster)
        return _cluster_volume(pts[np.asarray(idx, dtype=np.int64)], alpha, downsample_resolution, seed)

    if executor is None:
        return [one(c) for c in clusters]
    return list(executor.map(one, clusters))
