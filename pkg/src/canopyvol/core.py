"""Point-cloud primitives: containers, bounding boxes, voxel downsampling and
an exact uniform-grid spatial index for radius and k-nearest-neighbour queries.

Coordinates are metres throughout. Rows of orchards are assumed to run along
the x axis of the map frame with the robot path near ``y = reference_y``; see
:mod:`canopyvol.layout`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np
from numba import njit

from .errors import EmptyInputError, ParameterError

__all__ = [
    "PointCloud",
    "Aabb",
    "VoxelKey",
    "SpatialIndex",
    "as_points",
    "aabb",
    "centroid",
    "voxel_keys",
    "voxel_downsample",
    "radius_query",
    "knn_query",
]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered, immutable collection of 3D points.

    ``points`` is an ``(n, 3)`` float64 array. It is copied on construction
    and marked read-only, so a cloud can be shared between threads.
    """

    points: np.ndarray
    frame_note: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ParameterError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise ParameterError(f"non-finite coordinate at point {bad}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx].reshape(-1, 3), self.frame_note)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    """Return the ``(n, 3)`` float64 coordinate array behind ``cloud``."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ParameterError(f"points must have shape (n, 3), got {pts.shape}")
    return pts


class Aabb(NamedTuple):
    min: np.ndarray
    max: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


class VoxelKey(NamedTuple):
    i: int
    j: int
    k: int


def aabb(cloud: CloudLike) -> Aabb:
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyInputError("bounding box of an empty cloud")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def centroid(cloud: CloudLike) -> np.ndarray:
    """Arithmetic mean of the points, shape ``(3,)``."""
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyInputError("centroid of an empty cloud")
    return pts.mean(axis=0)


# --------------------------------------------------------------------------
# voxel grid


def voxel_keys(cloud: CloudLike, resolution: float, origin=None) -> np.ndarray:
    """Integer voxel coordinates ``floor((p - origin) / resolution)``.

    ``origin`` defaults to the minimum corner of the cloud.
    """
    if not resolution > 0:
        raise ParameterError(f"voxel resolution must be positive, got {resolution}")
    pts = as_points(cloud)
    if len(pts) == 0:
        return np.empty((0, 3), dtype=np.int64)
    origin = pts.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    return np.floor((pts - origin) / resolution).astype(np.int64)


def _linear_keys(ijk: np.ndarray):
    """Encode integer triples as one int64 preserving lexicographic order.

    Returns ``None`` when the span does not fit in 63 bits.
    """
    lo = ijk.min(axis=0)
    span = (ijk.max(axis=0) - lo + 1).astype(np.int64)
    if float(span[0]) * float(span[1]) * float(span[2]) >= 2.0**62:
        return None
    rel = ijk - lo
    return (rel[:, 0] * span[1] + rel[:, 1]) * span[2] + rel[:, 2]


def voxel_downsample(cloud: CloudLike, resolution: float, origin=None, return_inverse: bool = False):
    """Replace the points of every occupied voxel by their centroid.

    Output points are ordered by ascending voxel key ``(i, j, k)``.

    Parameters
    ----------
    cloud : PointCloud or (n, 3) array
    resolution : float
        Voxel edge length in metres.
    origin : array-like, optional
        Grid origin; the cloud's minimum corner when omitted.
    return_inverse : bool
        Also return, for every input point, the index of its output point.
    """
    ijk = voxel_keys(cloud, resolution, origin)
    pts = as_points(cloud)
    note = cloud.frame_note if isinstance(cloud, PointCloud) else ""
    if len(pts) == 0:
        empty = PointCloud(np.empty((0, 3)), note)
        return (empty, np.empty(0, np.int64)) if return_inverse else empty
    keys = _linear_keys(ijk)
    if keys is None:
        _, inverse = np.unique(ijk, axis=0, return_inverse=True)
    else:
        _, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse)
    out = np.empty((len(counts), 3))
    for axis in range(3):
        out[:, axis] = np.bincount(inverse, weights=pts[:, axis]) / counts
    # summation round-off can push a mean just past its voxel's face; clamping
    # to the members' range keeps it in the voxel since floor() is monotone
    order = np.argsort(inverse, kind="stable")
    starts = np.flatnonzero(np.r_[True, np.diff(inverse[order]) != 0])
    grouped = pts[order]
    np.clip(out, np.minimum.reduceat(grouped, starts), np.maximum.reduceat(grouped, starts), out=out)
    if return_inverse:
        return PointCloud(out, note), inverse.astype(np.int64)
    return PointCloud(out, note)


# --------------------------------------------------------------------------
# uniform grid index


@dataclass(frozen=True, eq=False)
class _Grid:
    origin: np.ndarray
    cell_size: float
    dims: np.ndarray  # cells per axis
    order: np.ndarray  # original point index, grouped by cell
    sorted_points: np.ndarray
    cell_keys: np.ndarray  # ascending linear keys of occupied cells
    cell_start: np.ndarray  # len(cell_keys) + 1 offsets into ``order``
    cell_ijk: np.ndarray = field(repr=False)


def _build_grid(pts: np.ndarray, cell_size: float) -> _Grid:
    origin = pts.min(axis=0)
    ijk = np.floor((pts - origin) / cell_size).astype(np.int64)
    dims = ijk.max(axis=0) + 1
    if float(dims[0]) * float(dims[1]) * float(dims[2]) >= 2.0**62:
        raise ParameterError(
            f"cell size {cell_size} is too small for a cloud of extent {np.ptp(pts, axis=0)}"
        )
    keys = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    cell_keys, first = np.unique(sorted_keys, return_index=True)
    cell_start = np.append(first, len(pts)).astype(np.int64)
    return _Grid(
        origin=origin,
        cell_size=float(cell_size),
        dims=dims.astype(np.int64),
        order=order.astype(np.int64),
        sorted_points=np.ascontiguousarray(pts[order]),
        cell_keys=cell_keys,
        cell_ijk=ijk[order][first],
        cell_start=cell_start,
    )


@njit(cache=True, nogil=True)
def _cell_lookup(cell_keys, dims, i, j, k):
    if i < 0 or j < 0 or k < 0 or i >= dims[0] or j >= dims[1] or k >= dims[2]:
        return -1
    key = (i * dims[1] + j) * dims[2] + k
    pos = np.searchsorted(cell_keys, key)
    if pos < cell_keys.shape[0] and cell_keys[pos] == key:
        return pos
    return -1


@njit(cache=True, nogil=True)
def _clamped_cell(x, o, s, d):
    # clip in float first so far-away coordinates cannot overflow int64
    f = np.floor((x - o) / s)
    if f < 0.0:
        return np.int64(0)
    if f > d - 1:
        return np.int64(d - 1)
    return np.int64(f)


@njit(cache=True, nogil=True)
def _radius_kernel(spts, order, cell_keys, cell_start, cell_ijk, origin, s, dims, q, r):
    r2 = r * r
    lo = np.empty(3, np.int64)
    hi = np.empty(3, np.int64)
    ncells = 1.0
    for a in range(3):
        flo = np.floor((q[a] - r - origin[a]) / s)
        fhi = np.floor((q[a] + r - origin[a]) / s)
        if fhi < 0.0 or flo > dims[a] - 1:
            return np.empty(0, np.int64)
        lo[a] = _clamped_cell(q[a] - r, origin[a], s, dims[a])
        hi[a] = _clamped_cell(q[a] + r, origin[a], s, dims[a])
        ncells *= hi[a] - lo[a] + 1
    out = np.empty(spts.shape[0], np.int64)
    m = 0
    if ncells <= cell_keys.shape[0]:
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    c = _cell_lookup(cell_keys, dims, i, j, k)
                    if c < 0:
                        continue
                    for t in range(cell_start[c], cell_start[c + 1]):
                        dx = spts[t, 0] - q[0]
                        dy = spts[t, 1] - q[1]
                        dz = spts[t, 2] - q[2]
                        if dx * dx + dy * dy + dz * dz <= r2:
                            out[m] = order[t]
                            m += 1
    else:
        for c in range(cell_keys.shape[0]):
            inside = True
            for a in range(3):
                if cell_ijk[c, a] < lo[a] or cell_ijk[c, a] > hi[a]:
                    inside = False
            if not inside:
                continue
            for t in range(cell_start[c], cell_start[c + 1]):
                dx = spts[t, 0] - q[0]
                dy = spts[t, 1] - q[1]
                dz = spts[t, 2] - q[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    out[m] = order[t]
                    m += 1
    return np.sort(out[:m])


@njit(cache=True, nogil=True)
def _knn_kernel(spts, order, cell_keys, cell_start, origin, s, dims, queries, k, exclude):
    n = spts.shape[0]
    nq = queries.shape[0]
    result = np.empty((nq, k), np.int64)
    buf_idx = np.empty(n, np.int64)
    buf_d2 = np.empty(n, np.float64)
    c = np.empty(3, np.int64)
    for qi in range(nq):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        for a in range(3):
            c[a] = _clamped_cell(queries[qi, a], origin[a], s, dims[a])
        m = 0
        rho = 0
        while True:
            box = 1.0
            for a in range(3):
                box *= min(c[a] + rho, dims[a] - 1) - max(c[a] - rho, 0) + 1
            if box > cell_keys.shape[0]:
                # the shell would visit more cells than are occupied: scan every point
                m = 0
                for t in range(n):
                    idx = order[t]
                    if idx == exclude[qi]:
                        continue
                    dx = spts[t, 0] - qx
                    dy = spts[t, 1] - qy
                    dz = spts[t, 2] - qz
                    buf_idx[m] = idx
                    buf_d2[m] = dx * dx + dy * dy + dz * dz
                    m += 1
                break
            # scan the shell of cells at Chebyshev distance rho from c, clipped to the grid
            for i in range(max(c[0] - rho, 0), min(c[0] + rho, dims[0] - 1) + 1):
                for j in range(max(c[1] - rho, 0), min(c[1] + rho, dims[1] - 1) + 1):
                    full = rho == 0 or abs(i - c[0]) == rho or abs(j - c[1]) == rho
                    for kk in range(max(c[2] - rho, 0), min(c[2] + rho, dims[2] - 1) + 1):
                        if not full and abs(kk - c[2]) != rho:
                            continue
                        cid = _cell_lookup(cell_keys, dims, i, j, kk)
                        if cid < 0:
                            continue
                        for t in range(cell_start[cid], cell_start[cid + 1]):
                            idx = order[t]
                            if idx == exclude[qi]:
                                continue
                            dx = spts[t, 0] - qx
                            dy = spts[t, 1] - qy
                            dz = spts[t, 2] - qz
                            buf_idx[m] = idx
                            buf_d2[m] = dx * dx + dy * dy + dz * dz
                            m += 1
            # every unscanned point lies beyond a face of the scanned box that is
            # inside the grid; the nearest such face bounds their distance. A small
            # margin absorbs floor() round-off in the cell assignment.
            bound = np.inf
            for a in range(3):
                q = queries[qi, a]
                if c[a] - rho > 0:
                    bound = min(bound, q - (origin[a] + (c[a] - rho) * s))
                if c[a] + rho < dims[a] - 1:
                    bound = min(bound, origin[a] + (c[a] + rho + 1) * s - q)
            covered = bound == np.inf
            bound -= 1e-9 * s
            within = 0
            if bound > 0.0:
                bound2 = bound * bound
                for t in range(m):
                    if buf_d2[t] <= bound2:
                        within += 1
            if within >= k or covered:
                break
            rho += 1
        # sort by index, then stably by distance: ties resolve to the lower index
        by_idx = np.argsort(buf_idx[:m])
        idx_sorted = buf_idx[:m][by_idx]
        d2_sorted = buf_d2[:m][by_idx]
        by_d = np.argsort(d2_sorted, kind="mergesort")
        for t in range(k):
            result[qi, t] = idx_sorted[by_d[t]]
    return result


def _default_cell_size(pts: np.ndarray, per_cell: float = 8.0) -> float:
    ext = np.ptp(pts, axis=0)
    big = float(ext.max())
    if big == 0.0:
        return 1.0
    thick = np.maximum(ext, big * 1e-3)
    s = (float(np.prod(thick)) * per_cell / len(pts)) ** (1.0 / 3.0)
    return max(s, big / 2.0e5)


class SpatialIndex:
    """Exact uniform-grid index over a fixed set of points.

    Queries are read-only; one index can serve many threads.

    Parameters
    ----------
    cloud : PointCloud or (n, 3) array
        Must be non-empty.
    cell_size : float, optional
        Grid cell edge. Chosen from point density when omitted; a value close
        to the typical query radius is best for radius queries.
    """

    def __init__(self, cloud: CloudLike, cell_size: float | None = None):
        pts = np.ascontiguousarray(as_points(cloud), dtype=np.float64)
        if len(pts) == 0:
            raise EmptyInputError("cannot index an empty cloud")
        if cell_size is None:
            cell_size = _default_cell_size(pts)
        elif not cell_size > 0:
            raise ParameterError(f"cell_size must be positive, got {cell_size}")
        self.points = pts
        self._grid = _build_grid(pts, cell_size)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def cell_size(self) -> float:
        return self._grid.cell_size

    def radius_query(self, p, r: float) -> np.ndarray:
        """Indices of points with Euclidean distance ``<= r`` from ``p``, ascending."""
        if not r > 0:
            raise ParameterError(f"radius must be positive, got {r}")
        g = self._grid
        q = np.asarray(p, dtype=np.float64).reshape(3)
        return _radius_kernel(
            g.sorted_points, g.order, g.cell_keys, g.cell_start, g.cell_ijk,
            g.origin, g.cell_size, g.dims, q, float(r),
        )

    def knn_query(self, p, k: int) -> np.ndarray:
        """The ``k`` nearest point indices, nearest first; distance ties go to
        the lower index."""
        q = np.asarray(p, dtype=np.float64).reshape(1, 3)
        return self.knn_many(q, k)[0]

    def knn_many(self, queries, k: int, exclude=None) -> np.ndarray:
        """Batch kNN. ``exclude[i]`` (or -1) is an index skipped for query ``i``."""
        n_avail = len(self) - (0 if exclude is None else 1)
        if not 1 <= k <= n_avail:
            raise ParameterError(f"k must be in [1, {n_avail}], got {k}")
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        if exclude is None:
            exclude = np.full(len(q), -1, dtype=np.int64)
        else:
            exclude = np.ascontiguousarray(exclude, dtype=np.int64)
        g = self._grid
        return _knn_kernel(
            g.sorted_points, g.order, g.cell_keys, g.cell_start,
            g.origin, g.cell_size, g.dims, q, int(k), exclude,
        )


def radius_query(index: SpatialIndex, p, r: float) -> np.ndarray:
    return index.radius_query(p, r)


def knn_query(index: SpatialIndex, p, k: int) -> np.ndarray:
    return index.knn_query(p, k)
