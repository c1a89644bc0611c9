"""Row grouping and sequential tree labels.

Rows are assumed to run roughly along x, separated in y. Trees on the side of
the robot path with ``y < reference_y`` are labelled ``R_*``, the others
``L_*``; indices restart at 0 per side and run row by row (nearest row to the
path first), in ascending x within each row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ParameterError

__all__ = ["LayoutParams", "RowModel", "group_rows", "label_trees"]


@dataclass(frozen=True)
class LayoutParams:
    row_distance_threshold: float = 2.0
    reference_y: float = 0.0

    def __post_init__(self):
        if not self.row_distance_threshold > 0:
            raise ParameterError(
                f"row_distance_threshold must be positive, got {self.row_distance_threshold}"
            )


@dataclass(frozen=True)
class RowModel:
    row_id: str
    side: str
    number: int  # per-side rank by distance from the path
    members: Tuple[int, ...]  # cluster ids in ascending centroid x
    slope: float
    intercept: float
    mean_y: float
    member_x: Tuple[float, ...] = ()

    def predict_y(self, x) -> np.ndarray:
        return self.slope * np.asarray(x, dtype=float) + self.intercept


def _fit_line(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    if np.ptp(x) <= 1e-9:
        return 0.0, float(y.mean())
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def group_rows(centroids: Sequence[Tuple[int, Sequence[float]]], params: LayoutParams = LayoutParams()):
    """Group ``(cluster_id, centroid)`` pairs into rows by gaps in y.

    A new row starts wherever consecutive sorted y values differ by more than
    ``row_distance_threshold``.
    """
    items = [(int(cid), np.asarray(c, dtype=float)) for cid, c in centroids]
    if not items:
        raise ParameterError("group_rows needs at least one centroid")
    items.sort(key=lambda it: (it[1][1], it[0]))
    groups: List[list] = [[items[0]]]
    for prev, cur in zip(items, items[1:]):
        if cur[1][1] - prev[1][1] > params.row_distance_threshold:
            groups.append([])
        groups[-1].append(cur)

    drafts = []
    for g in groups:
        g.sort(key=lambda it: (it[1][0], it[0]))
        x = np.array([it[1][0] for it in g])
        y = np.array([it[1][1] for it in g])
        slope, intercept = _fit_line(x, y)
        mean_y = float(y.mean())
        side = "R" if mean_y < params.reference_y else "L"
        drafts.append((side, abs(mean_y - params.reference_y), mean_y, g, slope, intercept, x))

    rows = []
    for side in ("L", "R"):
        mine = sorted((d for d in drafts if d[0] == side), key=lambda d: (d[1], d[2]))
        for number, (_, _, mean_y, g, slope, intercept, x) in enumerate(mine):
            rows.append(RowModel(
                row_id=f"{side}{number}",
                side=side,
                number=number,
                members=tuple(it[0] for it in g),
                slope=slope,
                intercept=intercept,
                mean_y=mean_y,
                member_x=tuple(float(v) for v in x),
            ))
    return rows


def label_trees(rows: Sequence[RowModel]) -> List[Tuple[int, str]]:
    """``(cluster_id, label)`` pairs such as ``(4, "L_2")``, side by side and
    row by row."""
    out = []
    for side in ("L", "R"):
        idx = 0
        for row in sorted((r for r in rows if r.side == side), key=lambda r: r.number):
            order = sorted(range(len(row.members)),
                           key=lambda i: (row.member_x[i] if row.member_x else i, row.members[i]))
            for i in order:
                out.append((row.members[i], f"{side}_{idx}"))
                idx += 1
    return out


def row_positions(rows: Sequence[RowModel]) -> Dict[int, Tuple[str, int]]:
    """Map cluster id to ``(row_id, index_in_row)``."""
    out = {}
    for row in rows:
        for i, cid in enumerate(row.members):
            out[cid] = (row.row_id, i)
    return out
