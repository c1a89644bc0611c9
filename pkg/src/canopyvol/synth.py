"""Synthetic orchards with analytically known crown volumes.

Trees stand on a lattice: rows at ``y = (r - (rows - 1) / 2) * row_spacing``
(so the robot path ``y = 0`` runs between them) and trees at
``x = t * tree_spacing * (1 - crown_overlap_fraction)``. Each crown is a
filled sphere or axis-aligned ellipsoid resting on a trunk cylinder; the
ground is a noisy horizontal plane at ``z = 0``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .core import PointCloud
from .errors import ParameterError, ParseError
from .layout import LayoutParams, group_rows, label_trees

__all__ = [
    "OrchardSpec",
    "OrchardTruth",
    "PART_GROUND",
    "PART_TRUNK",
    "PART_CROWN",
    "generate_orchard",
    "sphere_volume_from_diameter",
    "truth_labels",
    "write_truth_csv",
    "read_truth_csv",
    "PRESETS",
]

PART_GROUND, PART_TRUNK, PART_CROWN = 0, 1, 2
TRUTH_FIELDS = ["tree_id", "row", "index", "cx", "cy", "cz", "true_volume_m3", "label"]


@dataclass(frozen=True)
class OrchardSpec:
    rows: int = 2
    trees_per_row: int = 5
    row_spacing: float = 7.0
    tree_spacing: float = 5.5
    crown: str = "sphere"
    crown_radii: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    crown_radius_jitter: float = 0.0
    crown_overlap_fraction: float = 0.0
    trunk_height: float = 0.7
    trunk_radius: float = 0.12
    points_per_tree: int = 8000  # crown points
    trunk_points: int = 200
    ground_points_per_m2: float = 200.0
    ground_margin: float = 1.0
    ground_noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        radii = tuple(float(r) for r in np.broadcast_to(np.asarray(self.crown_radii, float), (3,)))
        object.__setattr__(self, "crown_radii", radii)
        for name in ("rows", "trees_per_row", "points_per_tree"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("row_spacing", "tree_spacing"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.crown not in ("sphere", "ellipsoid"):
            raise ParameterError(f"crown must be 'sphere' or 'ellipsoid', got {self.crown!r}")
        if min(radii) <= 0:
            raise ParameterError(f"crown radii must be positive, got {radii}")
        if self.crown == "sphere" and len(set(radii)) != 1:
            raise ParameterError(f"a sphere crown needs equal radii, got {radii}")
        if not 0 <= self.crown_radius_jitter < 1:
            raise ParameterError(f"crown_radius_jitter must be in [0, 1), got {self.crown_radius_jitter}")
        if not 0 <= self.crown_overlap_fraction < 1:
            raise ParameterError(
                f"crown_overlap_fraction must be in [0, 1), got {self.crown_overlap_fraction}"
            )
        if self.trunk_height < 0 or self.trunk_radius <= 0 or self.trunk_points < 0:
            raise ParameterError("trunk dimensions must be non-negative")
        if self.ground_points_per_m2 < 0 or self.ground_noise_sigma < 0 or self.ground_margin < 0:
            raise ParameterError("ground parameters must be non-negative")

    @property
    def n_trees(self) -> int:
        return self.rows * self.trees_per_row

    @property
    def center_spacing(self) -> float:
        return self.tree_spacing * (1.0 - self.crown_overlap_fraction)


# Standard fixtures. "pistachio" has isolated crowns; "almond" plants trees
# closer than a crown diameter so neighbouring crowns in a row intersect.
PRESETS = {
    "pistachio": dict(rows=2, trees_per_row=5, tree_spacing=5.5, crown_overlap_fraction=0.0),
    "almond": dict(rows=2, trees_per_row=6, tree_spacing=4.0, crown_overlap_fraction=0.3),
}


@dataclass(frozen=True, eq=False)
class OrchardTruth:
    volumes: np.ndarray  # (T,) m³
    centroids: np.ndarray  # (T, 3) crown centres
    radii: np.ndarray  # (T, 3) crown semi-axes
    row: np.ndarray  # (T,)
    index: np.ndarray  # (T,)
    point_tree: np.ndarray  # (n,) tree id, -1 for ground
    point_part: np.ndarray  # (n,) PART_* code
    labels: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_trees(self) -> int:
        return len(self.volumes)

    def crown_mask(self) -> np.ndarray:
        return self.point_part == PART_CROWN


def sphere_volume_from_diameter(d: float) -> float:
    """Volume of a sphere of diameter ``d``: ``pi d^3 / 6``."""
    if not d > 0:
        raise ParameterError(f"diameter must be positive, got {d}")
    return math.pi * d**3 / 6.0


def _unit_ball(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    return v * rng.random(n)[:, None] ** (1.0 / 3.0)


def _tree_points(spec: OrchardSpec, tree_id: int, base_xy):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, tree_id + 1]))
    scale = 1.0 + spec.crown_radius_jitter * rng.uniform(-1.0, 1.0)
    radii = np.asarray(spec.crown_radii) * scale
    center = np.array([base_xy[0], base_xy[1], spec.trunk_height + radii[2]])
    crown = center + _unit_ball(rng, spec.points_per_tree) * radii
    theta = rng.uniform(0.0, 2.0 * math.pi, spec.trunk_points)
    trunk = np.column_stack([
        base_xy[0] + spec.trunk_radius * np.cos(theta),
        base_xy[1] + spec.trunk_radius * np.sin(theta),
        rng.uniform(0.0, spec.trunk_height, spec.trunk_points),
    ])
    return crown, trunk, radii, center


def generate_orchard(spec: OrchardSpec, layout: LayoutParams = LayoutParams()):
    """Sample a labelled orchard. Returns ``(PointCloud, OrchardTruth)``.

    Points are ordered tree by tree (crown, then trunk), ground last.
    """
    ys = (np.arange(spec.rows) - (spec.rows - 1) / 2.0) * spec.row_spacing
    xs = np.arange(spec.trees_per_row) * spec.center_spacing
    chunks, tree_ids, parts = [], [], []
    volumes, centroids, all_radii, rows, index = [], [], [], [], []
    tree_id = 0
    for r, y in enumerate(ys):
        for t, x in enumerate(xs):
            crown, trunk, radii, center = _tree_points(spec, tree_id, (x, y))
            chunks += [crown, trunk]
            tree_ids += [np.full(len(crown), tree_id), np.full(len(trunk), tree_id)]
            parts += [np.full(len(crown), PART_CROWN), np.full(len(trunk), PART_TRUNK)]
            volumes.append(4.0 / 3.0 * math.pi * float(np.prod(radii)))
            centroids.append(center)
            all_radii.append(radii)
            rows.append(r)
            index.append(t)
            tree_id += 1

    big = max(spec.crown_radii) * (1.0 + spec.crown_radius_jitter)
    lo = np.array([xs.min(), ys.min()]) - big - spec.ground_margin
    hi = np.array([xs.max(), ys.max()]) + big + spec.ground_margin
    n_ground = int(round(spec.ground_points_per_m2 * float(np.prod(hi - lo))))
    grng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    ground = np.column_stack([
        grng.uniform(lo[0], hi[0], n_ground),
        grng.uniform(lo[1], hi[1], n_ground),
        grng.normal(0.0, spec.ground_noise_sigma, n_ground) if spec.ground_noise_sigma > 0
        else np.zeros(n_ground),
    ])
    chunks.append(ground)
    tree_ids.append(np.full(n_ground, -1))
    parts.append(np.full(n_ground, PART_GROUND))

    cloud = PointCloud(np.concatenate(chunks), frame_note=f"synthetic orchard seed={spec.seed}")
    centroids = np.array(centroids)
    truth = OrchardTruth(
        volumes=np.array(volumes),
        centroids=centroids,
        radii=np.array(all_radii),
        row=np.array(rows),
        index=np.array(index),
        point_tree=np.concatenate(tree_ids).astype(np.int64),
        point_part=np.concatenate(parts).astype(np.int8),
        labels=tuple(truth_labels(centroids, layout)),
    )
    return cloud, truth


def truth_labels(centroids, layout: LayoutParams = LayoutParams()):
    """Labels the layout stage would give trees standing at ``centroids``."""
    rows = group_rows(list(enumerate(np.asarray(centroids))), layout)
    by_id = dict(label_trees(rows))
    return [by_id[i] for i in range(len(centroids))]


def write_truth_csv(truth: OrchardTruth, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_FIELDS)
        for t in range(truth.n_trees):
            cx, cy, cz = (repr(float(v)) for v in truth.centroids[t])
            label = truth.labels[t] if truth.labels else ""
            w.writerow([t, int(truth.row[t]), int(truth.index[t]), cx, cy, cz,
                        repr(float(truth.volumes[t])), label])


def read_truth_csv(path) -> list:
    """Rows of a truth CSV as dicts with typed values.

    ``label`` is optional; rows without it get ``str(tree_id)``.
    """
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"tree_id", "true_volume_m3"} - set(reader.fieldnames or [])
        if missing:
            raise ParseError(f"{path}: truth CSV lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = {
                    "tree_id": int(row["tree_id"]),
                    "row": int(row["row"]) if row.get("row") not in (None, "") else None,
                    "index": int(row["index"]) if row.get("index") not in (None, "") else None,
                    "centroid": tuple(float(row[k]) for k in ("cx", "cy", "cz"))
                    if all(row.get(k) not in (None, "") for k in ("cx", "cy", "cz")) else None,
                    "true_volume_m3": float(row["true_volume_m3"]),
                }
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            rec["label"] = row.get("label") or str(rec["tree_id"])
            out.append(rec)
    return out
