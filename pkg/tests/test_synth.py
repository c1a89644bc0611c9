import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canopyvol.errors import ParameterError, ParseError
from canopyvol.synth import (PART_CROWN, PART_GROUND, PART_TRUNK, PRESETS, OrchardSpec,
                             generate_orchard, read_truth_csv, sphere_volume_from_diameter,
                             write_truth_csv)

SMALL = dict(points_per_tree=500, trunk_points=20, ground_points_per_m2=5.0)


def test_single_sphere_volume():
    spec = OrchardSpec(rows=1, trees_per_row=1, crown_radii=(2, 2, 2), points_per_tree=50_000)
    _, truth = generate_orchard(spec)
    assert truth.volumes.tolist() == [pytest.approx(33.5103, abs=5e-5)]


def test_ellipsoid_volume():
    spec = OrchardSpec(rows=1, trees_per_row=1, crown="ellipsoid", crown_radii=(1.0, 2.0, 3.0), **SMALL)
    _, truth = generate_orchard(spec)
    assert truth.volumes[0] == pytest.approx(4 / 3 * math.pi * 6, rel=1e-12)


def test_lattice_centroids():
    spec = OrchardSpec(rows=2, trees_per_row=5, row_spacing=7.0, tree_spacing=5.5, **SMALL)
    _, truth = generate_orchard(spec)
    assert truth.n_trees == 10
    expected = [[t * 5.5, y, 2.7] for y in (-3.5, 3.5) for t in range(5)]
    np.testing.assert_allclose(truth.centroids, expected, atol=1e-12)
    assert truth.row.tolist() == [0] * 5 + [1] * 5 and truth.index.tolist() == list(range(5)) * 2


def test_overlap_spacing():
    spec = OrchardSpec(rows=1, trees_per_row=3, tree_spacing=4.0, crown_overlap_fraction=0.3, **SMALL)
    _, truth = generate_orchard(spec)
    gaps = np.diff(truth.centroids[:, 0])
    np.testing.assert_allclose(gaps, 2.8, atol=1e-12)
    assert (gaps < truth.radii[:-1, 0] + truth.radii[1:, 0]).all()


@pytest.mark.parametrize("d,v", [(2.0, 4.18879), (1.0, 0.523599)])
def test_sphere_from_diameter(d, v):
    assert sphere_volume_from_diameter(d) == pytest.approx(v, abs=5e-6)


def test_diameter_round_trip():
    d = (6 * 28.06 / math.pi) ** (1 / 3)
    assert sphere_volume_from_diameter(d) == pytest.approx(28.06, abs=1e-6)


@pytest.mark.parametrize("d", [0.0, -1.0, float("nan")])
def test_bad_diameter(d):
    with pytest.raises(ParameterError):
        sphere_volume_from_diameter(d)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["sphere", "ellipsoid"]), st.floats(0, 0.5),
       st.floats(0, 0.6))
def test_crown_points_inside_solid(seed, crown, jitter, overlap):
    radii = (2.0, 2.0, 2.0) if crown == "sphere" else (1.5, 2.0, 1.2)
    spec = OrchardSpec(rows=2, trees_per_row=3, crown=crown, crown_radii=radii,
                       crown_radius_jitter=jitter, crown_overlap_fraction=overlap, seed=seed, **SMALL)
    cloud, truth = generate_orchard(spec)
    pts = cloud.points
    crown_mask = truth.point_part == PART_CROWN
    t = truth.point_tree[crown_mask]
    q = (pts[crown_mask] - truth.centroids[t]) / truth.radii[t]
    assert ((q**2).sum(axis=1) <= 1 + 1e-12).all()
    np.testing.assert_allclose(truth.volumes, 4 / 3 * math.pi * truth.radii.prod(axis=1), rtol=1e-12)


def test_counts_and_parts():
    spec = OrchardSpec(rows=2, trees_per_row=2, points_per_tree=700, trunk_points=30,
                       ground_points_per_m2=3.0)
    cloud, truth = generate_orchard(spec)
    assert len(cloud) == len(truth.point_tree) == len(truth.point_part)
    for t in range(4):
        mine = truth.point_tree == t
        assert (truth.point_part[mine] == PART_CROWN).sum() == 700
        assert (truth.point_part[mine] == PART_TRUNK).sum() == 30
    ground = truth.point_part == PART_GROUND
    assert (truth.point_tree[ground] == -1).all() and ground.sum() > 0


def test_bit_identical_regeneration():
    spec = OrchardSpec(seed=11, crown_radius_jitter=0.1, **SMALL)
    a, ta = generate_orchard(spec)
    b, tb = generate_orchard(spec)
    assert a.points.tobytes() == b.points.tobytes()
    for name in ("volumes", "centroids", "radii", "point_tree", "point_part"):
        assert getattr(ta, name).tobytes() == getattr(tb, name).tobytes()
    assert ta.labels == tb.labels
    c, _ = generate_orchard(OrchardSpec(seed=12, crown_radius_jitter=0.1, **SMALL))
    assert c.points.tobytes() != a.points.tobytes()


@pytest.mark.parametrize("kw", [
    dict(rows=0), dict(trees_per_row=0), dict(points_per_tree=0), dict(row_spacing=0),
    dict(tree_spacing=-1), dict(crown_overlap_fraction=1.0), dict(crown_overlap_fraction=-0.1),
    dict(crown="cone"), dict(crown_radii=(2, 2, 1)), dict(crown_radius_jitter=1.0),
])
def test_invalid_spec(kw):
    with pytest.raises(ParameterError):
        OrchardSpec(**kw)


def test_presets_valid():
    assert OrchardSpec(**PRESETS["pistachio"]).crown_overlap_fraction == 0
    assert OrchardSpec(**PRESETS["almond"]).crown_overlap_fraction > 0


def test_labels_follow_layout():
    _, truth = generate_orchard(OrchardSpec(**SMALL))
    assert truth.labels == tuple(f"R_{i}" for i in range(5)) + tuple(f"L_{i}" for i in range(5))


def test_truth_csv_round_trip(tmp_path):
    _, truth = generate_orchard(OrchardSpec(crown_radius_jitter=0.2, **SMALL))
    write_truth_csv(truth, tmp_path / "t.csv")
    rows = read_truth_csv(tmp_path / "t.csv")
    assert [r["tree_id"] for r in rows] == list(range(10))
    assert [r["true_volume_m3"] for r in rows] == truth.volumes.tolist()
    assert [r["centroid"] for r in rows] == [tuple(c) for c in truth.centroids.tolist()]
    assert tuple(r["label"] for r in rows) == truth.labels


def test_truth_csv_errors(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("tree_id,row\n0,0\n")
    with pytest.raises(ParseError, match="true_volume_m3"):
        read_truth_csv(p)
    p.write_text("tree_id,true_volume_m3\n0,1.5\n1,abc\n")
    with pytest.raises(ParseError, match="line 3"):
        read_truth_csv(p)
    p.write_text("tree_id,true_volume_m3\n4,1.5\n")
    assert read_truth_csv(p)[0]["label"] == "4"
