"""Per-tree segmentation: DBSCAN followed by spectral splitting of oversized
clusters.

DBSCAN runs on a uniform grid whose cells have edge ``eps / sqrt(3)``: every
pair of points sharing a cell is within ``eps``, so dense cells are core
wholesale and cluster connectivity can be resolved cell-to-cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh

from .core import CloudLike, SpatialIndex, _build_grid, _cell_lookup, as_points
from .errors import EmptyInputError, ParameterError, SegmentationError

__all__ = [
    "DbscanParams",
    "SpectralParams",
    "TreeCluster",
    "dbscan",
    "dbscan_labels",
    "knn_graph",
    "normalized_laplacian",
    "subcluster_count",
    "kmeans_pp",
    "spectral_split",
    "segment_trees",
]


@dataclass(frozen=True)
class DbscanParams:
    epsilon: float = 0.8
    min_points: int = 1300

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.min_points) < 1:
            raise ParameterError(f"min_points must be >= 1, got {self.min_points}")


@dataclass(frozen=True)
class SpectralParams:
    max_cluster_size: int = 45_000
    knn_k: int = 10
    embed_sample_cap: int = 5_000
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if int(self.max_cluster_size) < 1:
            raise ParameterError(f"max_cluster_size must be >= 1, got {self.max_cluster_size}")
        if int(self.knn_k) < 1:
            raise ParameterError(f"knn_k must be >= 1, got {self.knn_k}")
        if int(self.embed_sample_cap) < self.knn_k + 1:
            raise ParameterError(
                f"embed_sample_cap must be >= knn_k + 1, got {self.embed_sample_cap}"
            )
        if int(self.kmeans_max_iters) < 1:
            raise ParameterError(f"kmeans_max_iters must be >= 1, got {self.kmeans_max_iters}")
        if not self.kmeans_tol >= 0:
            raise ParameterError(f"kmeans_tol must be non-negative, got {self.kmeans_tol}")


@dataclass(frozen=True, eq=False)
class TreeCluster:
    """One segmented canopy: ascending indices into the canopy cloud."""

    point_indices: np.ndarray
    centroid: np.ndarray
    provenance: str = "dbscan"
    source_cluster_id: Optional[int] = None
    notes: Tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.point_indices)

    @classmethod
    def from_indices(cls, pts, indices, **kw) -> "TreeCluster":
        idx = np.sort(np.asarray(indices, dtype=np.int64))
        return cls(point_indices=idx, centroid=pts[idx].mean(axis=0), **kw)


# --------------------------------------------------------------------------
# DBSCAN


@njit(cache=True)
def _uf_find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


@njit(cache=True, nogil=True)
def _dbscan_kernel(spts, order, cell_keys, cell_start, cell_ijk, dims, s, eps, min_pts):
    n = spts.shape[0]
    n_cells = cell_keys.shape[0]
    eps2 = eps * eps
    safe2 = eps2 * (1.0 - 1e-9)

    # neighbour cells (all offsets in [-2, 2]^3 can hold points within eps)
    nb_start = np.zeros(n_cells + 1, np.int64)
    nb_list = np.empty(n_cells * 125, np.int64)
    m = 0
    for c in range(n_cells):
        for di in range(-2, 3):
            for dj in range(-2, 3):
                for dk in range(-2, 3):
                    o = _cell_lookup(cell_keys, dims, cell_ijk[c, 0] + di,
                                     cell_ijk[c, 1] + dj, cell_ijk[c, 2] + dk)
                    if o >= 0:
                        nb_list[m] = o
                        m += 1
        nb_start[c + 1] = m

    # 1. core flags (positions in sorted order)
    core = np.zeros(n, np.bool_)
    for c in range(n_cells):
        a0 = cell_start[c]
        a1 = cell_start[c + 1]
        if a1 - a0 >= min_pts:
            for t in range(a0, a1):
                core[t] = True
            continue
        for t in range(a0, a1):
            px = spts[t, 0]
            py = spts[t, 1]
            pz = spts[t, 2]
            cnt = 0
            for u in range(nb_start[c], nb_start[c + 1]):
                o = nb_list[u]
                # farthest corner of cell o (spts is relative to the grid origin)
                far2 = 0.0
                for a in range(3):
                    lo = cell_ijk[o, a] * s
                    dd = max(abs(spts[t, a] - lo), abs(spts[t, a] - lo - s))
                    far2 += dd * dd
                if far2 <= safe2:
                    cnt += cell_start[o + 1] - cell_start[o]
                else:
                    for w in range(cell_start[o], cell_start[o + 1]):
                        dx = spts[w, 0] - px
                        dy = spts[w, 1] - py
                        dz = spts[w, 2] - pz
                        if dx * dx + dy * dy + dz * dz <= eps2:
                            cnt += 1
                if cnt >= min_pts:
                    break
            if cnt >= min_pts:
                core[t] = True

    # 2. connect core cells
    cell_has_core = np.zeros(n_cells, np.bool_)
    for c in range(n_cells):
        for t in range(cell_start[c], cell_start[c + 1]):
            if core[t]:
                cell_has_core[c] = True
                break
    parent = np.arange(n_cells)
    for c in range(n_cells):
        if not cell_has_core[c]:
            continue
        for u in range(nb_start[c], nb_start[c + 1]):
            o = nb_list[u]
            if o <= c or not cell_has_core[o]:
                continue
            rc = _uf_find(parent, c)
            ro = _uf_find(parent, o)
            if rc == ro:
                continue
            linked = False
            for t in range(cell_start[c], cell_start[c + 1]):
                if not core[t]:
                    continue
                for w in range(cell_start[o], cell_start[o + 1]):
                    if not core[w]:
                        continue
                    dx = spts[w, 0] - spts[t, 0]
                    dy = spts[w, 1] - spts[t, 1]
                    dz = spts[w, 2] - spts[t, 2]
                    if dx * dx + dy * dy + dz * dz <= eps2:
                        linked = True
                        break
                if linked:
                    break
            if linked:
                if rc < ro:
                    parent[ro] = rc
                else:
                    parent[rc] = ro

    # component key = lowest original index of a core point
    big = np.int64(n + 1)
    comp_key = np.full(n_cells, big, np.int64)
    for c in range(n_cells):
        if not cell_has_core[c]:
            continue
        r = _uf_find(parent, c)
        for t in range(cell_start[c], cell_start[c + 1]):
            if core[t] and order[t] < comp_key[r]:
                comp_key[r] = order[t]
    cell_key = np.full(n_cells, big, np.int64)
    for c in range(n_cells):
        if cell_has_core[c]:
            cell_key[c] = comp_key[_uf_find(parent, c)]

    # 3. assignment: core -> its component; border -> adjacent component with
    # the lowest key (the one a sequential DBSCAN discovers first)
    point_key = np.full(n, -1, np.int64)
    for c in range(n_cells):
        for t in range(cell_start[c], cell_start[c + 1]):
            if core[t]:
                point_key[order[t]] = cell_key[c]
                continue
            best = big
            for u in range(nb_start[c], nb_start[c + 1]):
                o = nb_list[u]
                if cell_key[o] >= best:
                    continue
                for w in range(cell_start[o], cell_start[o + 1]):
                    if not core[w]:
                        continue
                    dx = spts[w, 0] - spts[t, 0]
                    dy = spts[w, 1] - spts[t, 1]
                    dz = spts[w, 2] - spts[t, 2]
                    if dx * dx + dy * dy + dz * dz <= eps2:
                        best = cell_key[o]
                        break
            if best < big:
                point_key[order[t]] = best
    core_orig = np.zeros(n, np.bool_)
    for t in range(n):
        core_orig[order[t]] = core[t]
    return point_key, core_orig


def dbscan_labels(cloud: CloudLike, params: DbscanParams = DbscanParams()):
    """Per-point DBSCAN labels.

    Returns ``(labels, core)``: ``labels[i]`` is the cluster number (clusters
    numbered by their lowest member index) or -1 for noise; ``core`` flags core
    points. A point counts itself as a neighbour.
    """
    pts = np.ascontiguousarray(as_points(cloud))
    n = len(pts)
    if n == 0:
        return np.empty(0, np.int64), np.empty(0, bool)
    # shrink a hair below eps/sqrt(3) so rounding in the cell assignment can
    # never put two points farther than eps apart into one cell
    s = params.epsilon / math.sqrt(3.0) * (1.0 - 1e-9)
    grid = _build_grid(pts, s)
    rel = np.ascontiguousarray(grid.sorted_points - grid.origin)
    point_key, core = _dbscan_kernel(
        rel, grid.order, grid.cell_keys, grid.cell_start, grid.cell_ijk,
        grid.dims, grid.cell_size, float(params.epsilon), int(params.min_points),
    )
    labels = np.full(n, -1, np.int64)
    member = point_key >= 0
    if member.any():
        keys = point_key[member]
        uniq, inv = np.unique(keys, return_inverse=True)
        idx = np.flatnonzero(member)
        lowest = np.full(len(uniq), n, np.int64)
        np.minimum.at(lowest, inv, idx)
        rank = np.empty(len(uniq), np.int64)
        rank[np.argsort(lowest, kind="stable")] = np.arange(len(uniq))
        labels[member] = rank[inv]
    return labels, core


def dbscan(cloud: CloudLike, params: DbscanParams = DbscanParams()):
    """Density clustering. Returns ``(clusters, noise_indices)``; clusters are
    ordered by their lowest member index."""
    pts = as_points(cloud)
    labels, _ = dbscan_labels(pts, params)
    if len(labels) == 0:
        return [], np.empty(0, np.int64)
    clusters = _clusters_from_labels(pts, labels, provenance="dbscan")
    return clusters, np.flatnonzero(labels < 0)


def _clusters_from_labels(pts, labels, provenance, source=None):
    valid = labels >= 0
    if not valid.any():
        return []
    idx = np.flatnonzero(valid)
    lab = labels[valid]
    order = np.argsort(lab, kind="stable")
    splits = np.flatnonzero(np.diff(lab[order])) + 1
    out = []
    for group in np.split(idx[order], splits):
        out.append(TreeCluster.from_indices(pts, group, provenance=provenance, source_cluster_id=source))
    out.sort(key=lambda c: c.point_indices[0])
    return out


# --------------------------------------------------------------------------
# graph construction


def knn_graph(cloud: CloudLike, k: int) -> sp.csr_matrix:
    """Symmetrized, unweighted kNN adjacency (no self-edges) as CSR.

    Edge ``{i, j}`` exists iff ``j`` is among the ``k`` nearest of ``i`` or
    vice versa. Distance ties resolve to the lower index.
    """
    pts = as_points(cloud)
    n = len(pts)
    if k < 1 or n < k + 1:
        raise ParameterError(f"kNN graph with k={k} needs at least {k + 1} points, got {n}")
    index = SpatialIndex(pts, cell_size=_knn_cell_size(pts, k))
    nbrs = index.knn_many(pts, k, exclude=np.arange(n))
    rows = np.repeat(np.arange(n), k)
    a = sp.csr_matrix((np.ones(n * k), (rows, nbrs.ravel())), shape=(n, n))
    a = a.maximum(a.T).tocsr()
    a.data[:] = 1.0
    a.sort_indices()
    return a


def _knn_cell_size(pts, k):
    ext = np.ptp(pts, axis=0)
    big = float(ext.max())
    if big == 0.0:
        return 1.0
    thick = np.maximum(ext, big * 1e-3)
    return max((float(np.prod(thick)) * max(k, 4) / len(pts)) ** (1.0 / 3.0), big / 2.0e5)


def normalized_laplacian(adjacency) -> sp.csr_matrix:
    """``I - D^-1/2 A D^-1/2``; isolated vertices get identity rows."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    return (sp.identity(a.shape[0], format="csr") - d @ a @ d).tocsr()


def subcluster_count(cluster_size: int, max_cluster_size: int) -> int:
    """Number of parts for an oversized cluster: ``ceil(size / max)``, at least
    2 whenever ``size > max``."""
    if cluster_size < 1 or max_cluster_size < 1:
        raise ParameterError("cluster sizes must be >= 1")
    m = -(-int(cluster_size) // int(max_cluster_size))
    if cluster_size > max_cluster_size:
        m = max(m, 2)
    return m


# --------------------------------------------------------------------------
# k-means


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 100, tol: float = 1e-6):
    """Lloyd's k-means with k-means++ seeding. Returns ``(labels, centers)``.

    A centre that loses all its points keeps its previous position.
    """
    n = len(x)
    if not 1 <= k <= n:
        raise ParameterError(f"k-means with k={k} on {n} rows")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    labels = np.zeros(n, np.int64)
    for _ in range(max_iters):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            sel = labels == j
            if sel.any():
                new[j] = x[sel].mean(axis=0)
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift <= tol:
            break
    dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return dist.argmin(axis=1), centers


# --------------------------------------------------------------------------
# spectral refinement


def _split_seed(seed: int, source_cluster_id) -> np.random.Generator:
    sid = -1 if source_cluster_id is None else int(source_cluster_id)
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, sid & 0xFFFFFFFF]))


def _smallest_eigvecs(lap: sp.csr_matrix, m: int, rng, label: str) -> np.ndarray:
    n = lap.shape[0]
    try:
        if n <= 600 or m >= n - 1:
            _, vecs = np.linalg.eigh(lap.toarray())
            return vecs[:, :m]
        v0 = rng.standard_normal(n)
        # shift-invert just below 0: L - sigma*I is positive definite
        _, vecs = eigsh(lap, k=m, sigma=-1e-3, which="LM", v0=v0)
        return vecs
    except (ArpackNoConvergence, ArpackError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise SegmentationError(f"eigen-decomposition failed for cluster {label}: {exc}") from exc


def spectral_split(cloud: CloudLike, cluster: TreeCluster, params: SpectralParams = SpectralParams()):
    """Split one oversized cluster into ``subcluster_count`` parts.

    Works on a seeded sample of at most ``embed_sample_cap`` members: kNN
    graph, normalized Laplacian, smallest eigenvectors, row normalisation,
    k-means++. Unsampled members join the part with the nearest 3D centroid.
    If the graph has more components than requested parts, each component is
    returned as its own part.
    """
    pts = as_points(cloud)
    members = np.asarray(cluster.point_indices, dtype=np.int64)
    size = len(members)
    if size <= params.max_cluster_size:
        raise ParameterError(
            f"cluster of {size} points does not exceed max_cluster_size={params.max_cluster_size}"
        )
    label = "?" if cluster.source_cluster_id is None else str(cluster.source_cluster_id)
    m = subcluster_count(size, params.max_cluster_size)
    rng = _split_seed(params.seed, cluster.source_cluster_id)

    if size > params.embed_sample_cap:
        sample = np.sort(rng.choice(size, params.embed_sample_cap, replace=False))
    else:
        sample = np.arange(size)
    work = pts[members[sample]]
    k = min(int(params.knn_k), len(work) - 1)
    adj = knn_graph(work, k)
    n_comp, comp = connected_components(adj, directed=False)

    notes = []
    if n_comp > m:
        sample_labels = comp
        notes.append(f"kNN graph has {n_comp} components > {m} requested parts; split by component")
    else:
        lap = normalized_laplacian(adj)
        emb = _smallest_eigvecs(lap, m, rng, label)
        norms = np.linalg.norm(emb, axis=1)
        nz = norms > 0
        emb[nz] /= norms[nz, None]
        sample_labels, _ = kmeans_pp(emb, m, rng, params.kmeans_max_iters, params.kmeans_tol)

    parts = np.unique(sample_labels)
    centers = np.stack([work[sample_labels == p].mean(axis=0) for p in parts])
    labels = np.empty(size, np.int64)
    labels[sample] = np.searchsorted(parts, sample_labels)
    rest = np.ones(size, bool)
    rest[sample] = False
    if rest.any():
        rp = pts[members[rest]]
        d2 = ((rp[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels[rest] = d2.argmin(axis=1)

    out = []
    for p in range(len(parts)):
        sel = members[labels == p]
        if len(sel):
            out.append(TreeCluster.from_indices(
                pts, sel, provenance="spectral_split",
                source_cluster_id=cluster.source_cluster_id, notes=tuple(notes),
            ))
    out.sort(key=lambda c: c.point_indices[0])
    return out


def segment_trees(
    cloud: CloudLike,
    dbscan_params: DbscanParams = DbscanParams(),
    spectral_params: SpectralParams = SpectralParams(),
    enable_split: bool = True,
    executor=None,
):
    """DBSCAN, then (optionally) spectral splitting of every cluster larger
    than ``max_cluster_size``. Returns ``(clusters, noise_indices)`` with
    clusters ordered by lowest member index.

    ``executor`` (a ``concurrent.futures`` executor) may run splits in
    parallel; per-cluster seeds make the result schedule-independent.
    """
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyInputError("segmentation of an empty cloud")
    clusters, noise = dbscan(pts, dbscan_params)
    clusters = [
        TreeCluster(c.point_indices, c.centroid, "dbscan", source_cluster_id=i)
        for i, c in enumerate(clusters)
    ]
    if not enable_split:
        return clusters, noise
    big = [c for c in clusters if len(c) > spectral_params.max_cluster_size]
    if not big:
        return clusters, noise
    if executor is None:
        split = [spectral_split(pts, c, spectral_params) for c in big]
    else:
        split = list(executor.map(lambda c: spectral_split(pts, c, spectral_params), big))
    out: List[TreeCluster] = [c for c in clusters if len(c) <= spectral_params.max_cluster_size]
    for parts in split:
        out.extend(parts)
    out.sort(key=lambda c: c.point_indices[0])
    return out, noise
