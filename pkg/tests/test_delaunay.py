import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull, Delaunay

from canopyvol.delaunay import delaunay_tetrahedra, insertion_order
from canopyvol.errors import DegenerateGeometryError
from canopyvol.volume import jitter_points, tetra_volumes


def circumspheres(pts, tets):
    p = pts[tets]
    a = p[:, 1:] - p[:, :1]
    rhs = 0.5 * (a**2).sum(axis=2)
    center = np.linalg.solve(a, rhs[..., None])[..., 0] + p[:, 0]
    return center, np.linalg.norm(center - p[:, 0], axis=1)


def as_set(tets):
    return {tuple(sorted(t)) for t in np.asarray(tets).tolist()}


@pytest.mark.parametrize("seed", range(8))
def test_empty_circumsphere_small(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 51))
    pts = jitter_points(rng.uniform(-1, 1, (n, 3)), seed)
    tets = delaunay_tetrahedra(pts, seed)
    center, radius = circumspheres(pts, tets)
    dist = np.linalg.norm(pts[None, :, :] - center[:, None, :], axis=2)
    assert (dist >= radius[:, None] - 1e-9).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 80))
def test_matches_independent_triangulation(seed, n):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    ours = delaunay_tetrahedra(pts, seed % 13)
    assert as_set(ours) == as_set(Delaunay(pts).simplices)


def test_volumes_fill_hull():
    pts = np.random.default_rng(1).uniform(0, 3, (3000, 3))
    tets = delaunay_tetrahedra(pts)
    vol = tetra_volumes(pts, tets)
    assert (vol > 0).all()
    assert vol.sum() == pytest.approx(ConvexHull(pts).volume, rel=1e-9)


def test_seed_does_not_change_result():
    pts = np.random.default_rng(2).random((500, 3))
    assert as_set(delaunay_tetrahedra(pts, 0)) == as_set(delaunay_tetrahedra(pts, 99))


def test_grid_after_jitter():
    g = np.stack(np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    pts = jitter_points(g, 0)
    tets = delaunay_tetrahedra(pts)
    assert tetra_volumes(pts, tets).sum() == pytest.approx(125.0, rel=1e-6)


def test_insertion_order_is_permutation():
    pts = np.random.default_rng(3).random((1000, 3))
    order = insertion_order(pts, 5)
    assert sorted(order.tolist()) == list(range(1000))


@pytest.mark.parametrize("pts", [
    np.zeros((3, 3)),
    np.zeros((10, 3)),
    np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)]),
    np.column_stack([np.random.default_rng(4).random((20, 2)), np.ones(20)]),
])
def test_degenerate_inputs(pts):
    with pytest.raises(DegenerateGeometryError):
        delaunay_tetrahedra(pts)
