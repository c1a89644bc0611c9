"""Command-line front end: ``canopyvol run | synth | eval``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import load_config, parse_config_text
from .errors import CanopyError, ParameterError
from .io import ensure_dir, read_vertex_properties, write_cloud
from .pipeline import EXIT_DEGENERATE, EXIT_FATAL, EXIT_OK, StageError, run_pipeline
from .synth import PRESETS, OrchardSpec, OrchardTruth, generate_orchard, read_truth_csv, write_truth_csv

log = logging.getLogger("canopyvol")

# flag -> config key, for the run subcommand
RUN_FLAGS = {
    "input": str,
    "out_dir": str,
    "epsilon": float,
    "min_points": int,
    "voxel": float,
    "alpha": float,
    "max_cluster_size": int,
    "knn_k": int,
    "trunk_band": float,
    "ransac_iters": int,
    "ransac_threshold": float,
    "row_threshold": float,
    "reference_y": float,
    "seed": int,
}

SYNTH_FLAGS = {
    "rows": int,
    "trees_per_row": int,
    "row_spacing": float,
    "tree_spacing": float,
    "crown": str,
    "crown_radius_jitter": float,
    "crown_overlap_fraction": float,
    "trunk_height": float,
    "trunk_radius": float,
    "points_per_tree": int,
    "trunk_points": int,
    "ground_points_per_m2": float,
    "ground_margin": float,
    "ground_noise_sigma": float,
    "seed": int,
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canopyvol", description="Orchard canopy volumes from LiDAR point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="segment trees and estimate canopy volumes")
    run.add_argument("--config", help="flat 'key = value' config file; flags override it")
    for name, typ in RUN_FLAGS.items():
        run.add_argument(_flag(name), dest=name, type=typ, default=None)
    run.add_argument("--enable-split", dest="enable_split", action=argparse.BooleanOptionalAction, default=None)

    synth = sub.add_parser("synth", help="generate a labelled synthetic orchard")
    synth.add_argument("--out-dir", required=True)
    synth.add_argument("--preset", choices=sorted(PRESETS))
    synth.add_argument("--spec", help="flat 'key = value' file of orchard fields; flags override it")
    for name, typ in SYNTH_FLAGS.items():
        synth.add_argument(_flag(name), dest=name, type=typ, default=None)
    synth.add_argument("--overlap", dest="crown_overlap_fraction", type=float, default=None)
    synth.add_argument("--crown-radii", type=float, nargs="+", default=None, metavar="R")
    synth.add_argument("--format", default="ply_binary_le", choices=["ply_binary_le", "ply_ascii"])

    ev = sub.add_parser("eval", help="score a run against synthetic truth")
    ev.add_argument("--reports", required=True, help="trees.json or trees.csv from a run")
    ev.add_argument("--truth", required=True, help="truth CSV")
    ev.add_argument("--output", required=True, help="summary JSON path")
    ev.add_argument("--segmented", help="segmented.ply from the run, for segmentation scoring")
    ev.add_argument("--labels", help="labelled synthetic cloud (tree_id and part properties)")
    return parser


def cmd_run(args) -> int:
    overrides = {name: getattr(args, name) for name in [*RUN_FLAGS, "enable_split"]}
    try:
        config = load_config(args.config, overrides)
    except (ParameterError, OSError) as exc:
        print(f"canopyvol run: config: {exc}", file=sys.stderr)
        return EXIT_FATAL
    try:
        result = run_pipeline(config)
    except StageError as exc:
        print(f"canopyvol run: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(f"{len(result.reports)} trees written to {config.out_dir}")
    if result.degenerate:
        print(f"degenerate geometry: {', '.join(result.degenerate)}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def _spec_from_args(args) -> OrchardSpec:
    values = {}
    if args.preset:
        values.update(PRESETS[args.preset])
    if args.spec:
        text = Path(args.spec).read_text(encoding="utf-8")
        values.update(parse_config_text(text, args.spec))
    for name in SYNTH_FLAGS:
        if getattr(args, name) is not None:
            values[name] = getattr(args, name)
    if args.crown_radii is not None:
        values["crown_radii"] = args.crown_radii
    known = {f.name: f.type for f in dataclasses.fields(OrchardSpec)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ParameterError(f"unknown orchard key(s): {', '.join(unknown)}")
    typed = {}
    for key, val in values.items():
        if isinstance(val, str):
            if key == "crown_radii":
                val = tuple(float(v) for v in val.replace(",", " ").split())
            elif key in SYNTH_FLAGS:
                try:
                    val = SYNTH_FLAGS[key](val)
                except ValueError:
                    raise ParameterError(f"{key}: cannot parse {val!r}") from None
        typed[key] = val
    if "crown_radii" in typed and len(typed["crown_radii"]) == 1:
        typed["crown_radii"] = tuple(typed["crown_radii"]) * 3
    return OrchardSpec(**typed)


def cmd_synth(args) -> int:
    try:
        spec = _spec_from_args(args)
        out = ensure_dir(args.out_dir)
        cloud, truth = generate_orchard(spec)
        write_cloud(cloud, out / "orchard.ply", args.format,
                    extra={"tree_id": truth.point_tree, "part": truth.point_part})
        write_truth_csv(truth, out / "truth.csv")
    except (CanopyError, OSError, ValueError) as exc:
        print(f"canopyvol synth: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(f"{len(cloud)} points, {truth.n_trees} trees written to {out}")
    return EXIT_OK


def _segmentation(args, truth_rows):
    from .evaluation import match_clusters_to_truth

    seg = read_vertex_properties(args.segmented)
    lab = read_vertex_properties(args.labels)
    for name, props, path in (("cluster", seg, args.segmented), ("tree_id", lab, args.labels),
                              ("part", lab, args.labels)):
        if name not in props:
            raise ParameterError(f"{path}: no '{name}' property")
    n_trees = max([r["tree_id"] for r in truth_rows], default=-1) + 1
    truth = OrchardTruth(
        volumes=np.zeros(n_trees), centroids=np.zeros((n_trees, 3)), radii=np.zeros((n_trees, 3)),
        row=np.zeros(n_trees, int), index=np.zeros(n_trees, int),
        point_tree=lab["tree_id"].astype(np.int64), point_part=lab["part"].astype(np.int8),
    )
    return match_clusters_to_truth(seg["cluster"].astype(np.int64), truth)


def cmd_eval(args) -> int:
    from .evaluation import evaluate_run, format_table, write_summary

    try:
        truth_rows = read_truth_csv(args.truth)
        segmentation = None
        if args.segmented or args.labels:
            if not (args.segmented and args.labels):
                raise ParameterError("--segmented and --labels must be given together")
            segmentation = _segmentation(args, truth_rows)
        summary = evaluate_run(args.reports, truth_rows, segmentation)
        write_summary(summary, args.output)
    except (CanopyError, OSError) as exc:
        print(f"canopyvol eval: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(format_table(summary))
    if segmentation is not None:
        print(f"segmentation success rate: {segmentation.success_rate:.3f} "
              f"({segmentation.matched_trees}/{segmentation.total_trees})")
    missing = summary["unmatched"]
    if missing["reports"] or missing["truth"]:
        for label in missing["truth"]:
            print(f"no report for truth label {label}", file=sys.stderr)
        for label in missing["reports"]:
            print(f"no truth for report label {label}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "synth": cmd_synth, "eval": cmd_eval}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
