"""End-to-end run: read, remove ground and trunks, downsample, segment, label
rows, estimate volumes and write the reports."""

from __future__ import annotations

import json
import logging
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .config import PipelineConfig
from .core import PointCloud, voxel_downsample
from .errors import CanopyError, ParameterError
from .io import TreeReport, ensure_dir, read_cloud, write_cloud, write_report
from .layout import group_rows, label_trees, row_positions
from .preprocess import remove_ground_and_trunk
from .segment import segment_trees
from .volume import estimate_tree_volumes

__all__ = ["StageError", "RunResult", "thread_count", "run_pipeline", "run_on_cloud"]

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FATAL, EXIT_DEGENERATE = 0, 1, 2


class StageError(CanopyError):
    """A fatal error, tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunResult:
    reports: List[TreeReport]
    point_labels: np.ndarray  # cluster id per input point, -1 when unassigned
    timings: Dict[str, float] = field(default_factory=dict)
    degenerate: List[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_DEGENERATE if self.degenerate else EXIT_OK


def thread_count(env=None) -> int:
    """Worker count: ``CANOPY_THREADS`` when set, else the CPU count (max 8)."""
    env = os.environ if env is None else env
    raw = env.get("CANOPY_THREADS")
    if raw is None or raw.strip() == "":
        return max(1, min(8, os.cpu_count() or 1))
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"CANOPY_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ParameterError(f"CANOPY_THREADS must be a positive integer, got {raw!r}")
    return n


class _Stages:
    def __init__(self):
        self.timings: Dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def run_on_cloud(cloud: PointCloud, config: PipelineConfig, executor=None, stages=None) -> RunResult:
    """Everything between reading the input and writing outputs."""
    stage = stages or _Stages()
    pts = cloud.points
    with stage("preprocess"):
        canopy, keep = remove_ground_and_trunk(cloud, config.preprocess_params(), return_mask=True)
    with stage("downsample"):
        if len(canopy) == 0:
            raise ParameterError("no points left above the trunk band")
        down, inverse = voxel_downsample(canopy, config.voxel, return_inverse=True)
    with stage("segment"):
        clusters, _ = segment_trees(down, config.dbscan_params(), config.spectral_params(),
                                    enable_split=config.enable_split, executor=executor)
    with stage("layout"):
        if clusters:
            rows = group_rows([(i, c.centroid) for i, c in enumerate(clusters)], config.layout_params())
            labels = label_trees(rows)
            positions = row_positions(rows)
        else:
            log.warning("no tree clusters found")
            labels, positions = [], {}
    with stage("volumes"):
        # the canopy is already on the voxel grid; a second pass would re-bin
        # it against a per-cluster origin
        volumes = estimate_tree_volumes(down, clusters, alpha=config.alpha,
                                        downsample_resolution=None, seed=config.seed,
                                        executor=executor)
    reports, degenerate = [], []
    for cid, label in labels:
        c, v = clusters[cid], volumes[cid]
        row_id, index = positions[cid]
        if v.degenerate:
            degenerate.append(label)
            log.warning("tree %s: degenerate geometry (%s); volumes set to 0", label, v.error)
        reports.append(TreeReport(
            label=label,
            row_id=row_id,
            index_in_row=index,
            centroid=tuple(float(x) for x in c.centroid),
            point_count=len(c),
            convex_hull_volume=v.convex_hull,
            alpha_shape_volume=v.alpha_shape,
            provenance=c.provenance,
            degenerate=v.degenerate,
        ))

    # map clusters of the downsampled canopy back onto the input points
    down_labels = np.full(len(down), -1, dtype=np.int64)
    for cid, c in enumerate(clusters):
        down_labels[c.point_indices] = cid
    point_labels = np.full(len(pts), -1, dtype=np.int64)
    point_labels[np.flatnonzero(keep)] = down_labels[inverse]
    return RunResult(reports, point_labels, stage.timings, degenerate)


def _versions() -> dict:
    import numba
    import scipy

    return {
        "canopyvol": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def run_pipeline(config: PipelineConfig, threads: Optional[int] = None) -> RunResult:
    """Run on ``config.input`` and write outputs into ``config.out_dir``.

    Writes ``segmented.ply`` (input points with a ``cluster`` property),
    ``trees.json``, ``trees.csv`` and ``manifest.json``. Fatal errors raise
    :class:`StageError`; degenerate trees are reported, not raised.
    """
    stage = _Stages()
    t0 = time.perf_counter()
    threads = thread_count() if threads is None else threads
    with stage("read"):
        if not config.input:
            raise ParameterError("input path is empty")
        cloud = read_cloud(config.input)
        out = ensure_dir(config.out_dir)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        result = run_on_cloud(cloud, config, executor, stage)
    finally:
        if executor is not None:
            executor.shutdown()
    with stage("reports"):
        write_cloud(cloud, out / "segmented.ply", labels=result.point_labels)
        write_report(result.reports, out / "trees.json", "json")
        write_report(result.reports, out / "trees.csv", "csv")
    total = time.perf_counter() - t0
    manifest = {
        "config": config.to_dict(),
        "versions": _versions(),
        "threads": threads,
        "input_points": len(cloud),
        "trees": len(result.reports),
        "degenerate_trees": result.degenerate,
        "timings_s": result.timings,
        "total_s": total,
    }
    with open(Path(out) / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return result
