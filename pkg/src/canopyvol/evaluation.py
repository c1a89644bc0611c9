"""Segmentation and volume scoring against known ground truth."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError, ValidationError
from .io import TreeReport, read_report
from .synth import PART_CROWN, OrchardTruth, read_truth_csv

__all__ = [
    "SegmentationScore",
    "VolumeError",
    "MIN_PURITY",
    "MIN_COVERAGE",
    "percent_error",
    "match_clusters_to_truth",
    "cluster_labels_from_indices",
    "evaluate_run",
    "write_summary",
    "format_table",
]

MIN_PURITY = 0.8
MIN_COVERAGE = 0.8


@dataclass(frozen=True)
class TreeMatch:
    tree_id: int
    cluster_id: Optional[int]
    purity: float
    coverage: float
    success: bool


@dataclass(frozen=True)
class SegmentationScore:
    matched_trees: int
    total_trees: int
    matches: Tuple[TreeMatch, ...] = field(default_factory=tuple)

    @property
    def success_rate(self) -> float:
        return self.matched_trees / self.total_trees if self.total_trees else 0.0

    def to_dict(self) -> dict:
        return {
            "matched_trees": self.matched_trees,
            "total_trees": self.total_trees,
            "success_rate": self.success_rate,
            "matches": [asdict(m) for m in self.matches],
        }


@dataclass(frozen=True)
class VolumeError:
    label: str
    ground_truth: float
    estimate: float
    percent: float


def percent_error(gt: float, est: float) -> float:
    """``|est - gt| / gt * 100``."""
    if not (math.isfinite(gt) and gt > 0):
        raise ParameterError(f"ground-truth volume must be positive, got {gt}")
    return abs(est - gt) / gt * 100.0


def cluster_labels_from_indices(clusters: Sequence, n: int) -> np.ndarray:
    """Per-point cluster ids (``-1`` for unassigned) from index lists."""
    labels = np.full(n, -1, dtype=np.int64)
    for cid, c in enumerate(clusters):
        idx = np.asarray(getattr(c, "point_indices", c), dtype=np.int64)
        if (labels[idx] >= 0).any():
            raise ValidationError(f"cluster {cid} shares points with another cluster")
        labels[idx] = cid
    return labels


def match_clusters_to_truth(cluster_labels, truth: OrchardTruth) -> SegmentationScore:
    """One-to-one greedy matching of clusters to truth trees.

    ``cluster_labels`` gives a cluster id per point of the labelled cloud
    (``-1`` for points in no cluster). Candidate pairs are taken in descending
    order of shared crown points. A tree is correctly segmented when its
    cluster is at least 80% that tree (purity) and holds at least 80% of the
    tree's crown points (coverage).
    """
    labels = np.asarray(cluster_labels, dtype=np.int64)
    tree = np.asarray(truth.point_tree, dtype=np.int64)
    if labels.shape != tree.shape:
        raise ValidationError(
            f"{len(labels)} cluster labels for a cloud of {len(tree)} labelled points"
        )
    n_trees = truth.n_trees
    crown = np.asarray(truth.point_part) == PART_CROWN
    crown_size = np.bincount(tree[crown], minlength=n_trees)

    in_cluster = labels >= 0
    n_clusters = int(labels.max()) + 1 if in_cluster.any() else 0
    cluster_size = np.bincount(labels[in_cluster], minlength=n_clusters)
    owned = in_cluster & (tree >= 0)
    pair = tree[owned] * n_clusters + labels[owned]
    keys, tree_points = np.unique(pair, return_counts=True)
    shared = dict(zip(keys.tolist(), tree_points.tolist()))
    sel = in_cluster & crown
    ckeys, ccounts = np.unique(tree[sel] * n_clusters + labels[sel], return_counts=True)

    candidates = sorted(zip((-ccounts).tolist(), ckeys.tolist()))
    used_trees, used_clusters = set(), set()
    chosen: Dict[int, int] = {}
    for neg, key in candidates:
        t, c = divmod(key, n_clusters)
        if t in used_trees or c in used_clusters:
            continue
        used_trees.add(t)
        used_clusters.add(c)
        chosen[t] = c

    overlap = dict(zip(ckeys.tolist(), ccounts.tolist()))
    matches = []
    for t in range(n_trees):
        c = chosen.get(t)
        if c is None:
            matches.append(TreeMatch(t, None, 0.0, 0.0, False))
            continue
        key = t * n_clusters + c
        purity = shared.get(key, 0) / cluster_size[c]
        coverage = overlap.get(key, 0) / crown_size[t] if crown_size[t] else 0.0
        ok = purity >= MIN_PURITY and coverage >= MIN_COVERAGE
        matches.append(TreeMatch(t, c, float(purity), float(coverage), bool(ok)))
    return SegmentationScore(sum(m.success for m in matches), n_trees, tuple(matches))


def _report_rows(reports) -> List[dict]:
    if isinstance(reports, (str, bytes)) or hasattr(reports, "__fspath__"):
        reports = read_report(reports)
    rows = []
    for r in reports:
        if isinstance(r, TreeReport):
            r = asdict(r)
        rows.append(r)
    return rows


def evaluate_run(reports, truth, segmentation: Optional[SegmentationScore] = None) -> dict:
    """Join reports to truth by label and score both volume estimates.

    ``reports`` is a report file path or a sequence of :class:`TreeReport`
    (or dicts with the same keys); ``truth`` a truth CSV path or a sequence of
    dicts with ``label`` and ``true_volume_m3``. Labels present on one side
    only are listed under ``unmatched`` rather than raising. Rows follow the
    order of the truth table.
    """
    report_rows = _report_rows(reports)
    truth_rows = read_truth_csv(truth) if isinstance(truth, (str, bytes)) or hasattr(truth, "__fspath__") \
        else list(truth)
    by_label = {}
    for r in report_rows:
        by_label[str(r["label"])] = r
    truth_labels = [str(t["label"]) for t in truth_rows]
    if len(set(truth_labels)) != len(truth_labels):
        raise ValidationError("truth table has duplicate labels")

    volumes = []
    for t in truth_rows:
        label = str(t["label"])
        r = by_label.get(label)
        if r is None:
            continue
        gt = float(t["true_volume_m3"])
        convex = float(r["convex_hull_volume"])
        alpha = float(r["alpha_shape_volume"])
        volumes.append({
            "label": label,
            "gt": gt,
            "convex": convex,
            "convex_err_pct": percent_error(gt, convex),
            "alpha": alpha,
            "alpha_err_pct": percent_error(gt, alpha),
        })

    means = {"n": len(volumes)}
    for method in ("convex", "alpha"):
        errs = [v[f"{method}_err_pct"] for v in volumes]
        means[f"{method}_mean_err_pct"] = float(np.mean(errs)) if errs else None
        means[f"{method}_max_err_pct"] = float(np.max(errs)) if errs else None
    truth_set = set(truth_labels)
    return {
        "segmentation": segmentation.to_dict() if segmentation is not None else None,
        "volumes": volumes,
        "means": means,
        "unmatched": {
            "reports": sorted(set(by_label) - truth_set),
            "truth": [l for l in truth_labels if l not in by_label],
        },
    }


def write_summary(summary: dict, path, format: str = "json") -> None:
    if format == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    elif format == "csv":
        cols = ["label", "gt", "convex", "convex_err_pct", "alpha", "alpha_err_pct"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for v in summary["volumes"]:
                w.writerow([v["label"]] + [repr(float(v[c])) for c in cols[1:]])
    else:
        raise ParameterError(f"unknown summary format {format!r}")


def format_table(summary: dict) -> str:
    """Fixed-width text table of per-tree volumes and errors."""
    head = f"{'Tree':<8}{'GT (m3)':>10}{'Convex':>10}{'Err %':>8}{'Alpha':>10}{'Err %':>8}"
    lines = [head, "-" * len(head)]
    for v in summary["volumes"]:
        lines.append(
            f"{v['label']:<8}{v['gt']:>10.2f}{v['convex']:>10.2f}{v['convex_err_pct']:>8.2f}"
            f"{v['alpha']:>10.2f}{v['alpha_err_pct']:>8.2f}"
        )
    m = summary["means"]
    if m["n"]:
        lines.append("-" * len(head))
        lines.append(f"{'mean':<8}{'':>10}{'':>10}{m['convex_mean_err_pct']:>8.2f}"
                     f"{'':>10}{m['alpha_mean_err_pct']:>8.2f}")
    return "\n".join(lines)
