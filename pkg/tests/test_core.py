import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from canopyvol.core import (PointCloud, SpatialIndex, aabb, centroid, knn_query, radius_query,
                            voxel_downsample, voxel_keys)
from canopyvol.errors import EmptyInputError, ParameterError

coords = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
clouds = st.integers(1, 200).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def bucket_oracle(pts, res):
    lo = pts.min(axis=0)
    buckets = {}
    for p in pts:
        key = tuple(int(math.floor(v)) for v in (p - lo) / res)
        buckets.setdefault(key, []).append(p)
    return buckets


class TestPointCloud:
    def test_copies_and_freezes(self):
        src = np.zeros((2, 3))
        cloud = PointCloud(src)
        src[0, 0] = 5
        assert cloud.points[0, 0] == 0
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 1

    def test_rejects_non_finite(self):
        with pytest.raises(ParameterError, match="point 1"):
            PointCloud([[0, 0, 0], [np.nan, 0, 0]])

    def test_rejects_bad_shape(self):
        with pytest.raises(ParameterError):
            PointCloud(np.zeros((3, 2)))

    def test_empty_allowed(self):
        assert len(PointCloud(np.empty((0, 3)))) == 0

    def test_aabb(self):
        box = aabb(np.array([[0, 5, -1], [2, 1, 3.0]]))
        assert box.min.tolist() == [0, 1, -1] and box.max.tolist() == [2, 5, 3]
        with pytest.raises(EmptyInputError):
            aabb(np.empty((0, 3)))


class TestVoxelDownsample:
    def test_single_point(self):
        out = voxel_downsample(PointCloud([[1.23, 4.56, 7.89]]), 0.1)
        assert out.points.tolist() == [[1.23, 4.56, 7.89]]

    def test_empty(self):
        assert len(voxel_downsample(PointCloud(np.empty((0, 3))), 0.1)) == 0

    @pytest.mark.parametrize("res", [0.0, -0.1])
    def test_bad_resolution(self, res):
        with pytest.raises(ParameterError):
            voxel_downsample(np.zeros((1, 3)), res)

    def test_octant_means(self):
        pts = np.random.default_rng(0).random((1000, 3))
        out = voxel_downsample(pts, 0.5).points
        buckets = bucket_oracle(pts, 0.5)
        assert len(out) <= 8 and len(out) == len(buckets)
        expected = np.array([np.mean(buckets[k], axis=0) for k in sorted(buckets)])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_order_is_ascending_key(self):
        pts = np.random.default_rng(1).uniform(0, 3, (500, 3))
        out = voxel_downsample(pts, 0.7)
        keys = voxel_keys(out, 0.7, origin=pts.min(axis=0))
        assert [tuple(k) for k in keys] == sorted(tuple(k) for k in keys)

    def test_inverse_maps_to_own_voxel(self):
        pts = np.random.default_rng(2).uniform(0, 2, (300, 3))
        out, inv = voxel_downsample(pts, 0.4, return_inverse=True)
        for i in range(len(out)):
            np.testing.assert_allclose(pts[inv == i].mean(axis=0), out.points[i], atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(clouds, st.floats(0.05, 20))
    def test_count_matches_bucket_oracle(self, pts, res):
        assert len(voxel_downsample(pts, res)) == len(bucket_oracle(pts, res))

    def test_repeated_boundary_values_stay_in_voxel(self):
        # the float mean of many copies of 0.05 rounds below 0.05
        pts = np.vstack([[-1.0, -1.0, 0.05], np.full((40, 3), 0.05), [0.05, 0.05, 0.0]])
        once = voxel_downsample(pts, 0.05)
        assert len(voxel_downsample(once, 0.05, origin=pts.min(axis=0))) == len(once) == 3

    @settings(max_examples=60, deadline=None)
    @given(clouds, st.floats(0.05, 20))
    def test_idempotent_in_count(self, pts, res):
        once = voxel_downsample(pts, res)
        twice = voxel_downsample(once, res, origin=pts.min(axis=0))
        assert len(twice) == len(once)


class TestCentroid:
    def test_examples(self):
        assert centroid(np.array([[0, 0, 0], [2, 0, 0.0]])).tolist() == [1, 0, 0]
        assert centroid(np.array([[1, 1, 1.0]])).tolist() == [1, 1, 1]

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            centroid(np.empty((0, 3)))

    def test_uniform_cube(self):
        pts = np.random.default_rng(42).random((10_000, 3))
        np.testing.assert_allclose(centroid(pts), 0.5, atol=0.02)

    @settings(max_examples=50, deadline=None)
    @given(clouds, arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)))
    def test_translation_equivariant(self, pts, t):
        np.testing.assert_allclose(centroid(pts + t), centroid(pts) + t, atol=1e-9, rtol=0)


def brute_radius(pts, p, r):
    return np.flatnonzero(((pts - p) ** 2).sum(axis=1) <= r * r)


def brute_knn(pts, p, k):
    d2 = ((pts - p) ** 2).sum(axis=1)
    return np.lexsort((np.arange(len(pts)), d2))[:k]


class TestRadiusQuery:
    def test_self(self):
        pts = np.random.default_rng(3).random((50, 3))
        idx = SpatialIndex(pts)
        assert 17 in radius_query(idx, pts[17], 1e-12)

    def test_exclusive_of_far_point(self):
        idx = SpatialIndex(np.array([[0, 0, 0], [1, 0, 0.0]]))
        assert radius_query(idx, [0, 0, 0], 0.99).tolist() == [0]

    def test_boundary_inclusive(self):
        idx = SpatialIndex(np.array([[0, 0, 0], [1, 0, 0.0]]))
        assert radius_query(idx, [0, 0, 0], 1.0).tolist() == [0, 1]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(0, 10, (5000, 3))
        for cell in (None, 0.3, 2.0):
            idx = SpatialIndex(pts, cell)
            for q, r in zip(rng.uniform(-1, 11, (100, 3)), rng.uniform(0.05, 3, 100)):
                assert np.array_equal(idx.radius_query(q, r), brute_radius(pts, q, r))

    def test_tiny_extent(self):
        pts = np.array([[4.68e-170, 0, 0], [0, 0, 0.0]])
        assert SpatialIndex(pts).radius_query([0, 0, 0], 1.0).tolist() == [0, 1]
        assert SpatialIndex(pts).radius_query([1e200, 0, 0], 1.0).tolist() == []

    def test_bad_radius(self):
        with pytest.raises(ParameterError):
            SpatialIndex(np.zeros((1, 3))).radius_query([0, 0, 0], 0)

    def test_empty_index(self):
        with pytest.raises(EmptyInputError):
            SpatialIndex(np.empty((0, 3)))

    @settings(max_examples=40, deadline=None)
    @given(clouds, arrays(np.float64, 3, elements=coords), st.floats(0.01, 40))
    def test_property(self, pts, q, r):
        assert np.array_equal(SpatialIndex(pts).radius_query(q, r), brute_radius(pts, q, r))


class TestKnnQuery:
    def test_all(self):
        pts = np.random.default_rng(5).random((30, 3))
        assert sorted(knn_query(SpatialIndex(pts), [0.5] * 3, 30).tolist()) == list(range(30))

    def test_self_nearest(self):
        pts = np.random.default_rng(6).random((100, 3))
        assert knn_query(SpatialIndex(pts), pts[42], 1).tolist() == [42]

    def test_too_many(self):
        with pytest.raises(ParameterError):
            knn_query(SpatialIndex(np.zeros((3, 3))), [0, 0, 0], 4)

    def test_ties_go_to_lower_index(self):
        # six lattice neighbours at distance 1, listed out of order
        pts = np.array([[0, 0, 1], [1, 0, 0], [0, -1, 0], [-1, 0, 0], [0, 1, 0], [0, 0, -1.0]])
        assert knn_query(SpatialIndex(pts), [0, 0, 0], 3).tolist() == [0, 1, 2]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(0, 5, (2000, 3))
        idx = SpatialIndex(pts)
        for q in rng.uniform(-1, 6, (50, 3)):
            assert np.array_equal(idx.knn_query(q, 10), brute_knn(pts, q, 10))

    def test_integer_lattice_ties(self):
        g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
        perm = np.random.default_rng(8).permutation(len(g))
        pts = g[perm]
        idx = SpatialIndex(pts, 1.0)
        for q in pts[:20]:
            assert np.array_equal(idx.knn_query(q, 7), brute_knn(pts, q, 7))

    def test_query_far_outside(self):
        pts = np.random.default_rng(10).random((300, 3)) * [1e-150, 1, 1]
        idx = SpatialIndex(pts)
        for q in ([50.0, 0, 0], [-1e9, 0.5, 0.5], [0, 0, 1e12]):
            assert np.array_equal(idx.knn_query(q, 5), brute_knn(pts, np.array(q), 5))

    def test_knn_many_exclude(self):
        pts = np.random.default_rng(9).random((200, 3))
        res = SpatialIndex(pts).knn_many(pts, 4, exclude=np.arange(200))
        for i in range(200):
            assert np.array_equal(res[i], brute_knn(pts, pts[i], 5)[1:])

    @settings(max_examples=40, deadline=None)
    @given(clouds, arrays(np.float64, 3, elements=coords), st.integers(1, 20))
    def test_property(self, pts, q, k):
        k = min(k, len(pts))
        assert np.array_equal(SpatialIndex(pts).knn_query(q, k), brute_knn(pts, q, k))
