"""Command line front ends.

``maptag`` runs the localization pipeline (or the single-projection
baseline with --baseline).  Options may come from a JSON config file,
from flags, or both; flags win.  ``maptag-scene`` generates synthetic
scenes and scores reports against their ground truth.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .cloud import save_pcd
from .decoder import builtin_dictionary, TagDictionary
from .pipeline import (PipelineConfig, load_config, report_to_detections,
                       run_baseline, run_pipeline)
from .synth import (evaluate, load_scene_spec, load_truth, save_truth,
                    synth_scene)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="maptag",
        description="Locate square fiducial tags in an intensity point "
                    "cloud map and report their vertices and poses.")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--input", help="input .pcd map (x y z intensity)")
    p.add_argument("--tag-size", type=float, help="tag sheet side in meters")
    p.add_argument("--thickness", type=float,
                   help="assumed surface thickness in meters")
    p.add_argument("--dict", dest="dict_path",
                   help="dictionary file, or 'builtin'")
    p.add_argument("--gradient-n", type=int,
                   help="neighborhood size for intensity gradients")
    p.add_argument("--gradient-tau", type=float,
                   help="absolute gradient threshold (overrides quantile)")
    p.add_argument("--gradient-quantile", type=float,
                   help="keep points above this gradient quantile")
    p.add_argument("--cluster-tol", type=float,
                   help="clustering distance tolerance in meters")
    p.add_argument("--min-cluster", type=int,
                   help="minimum cluster size in points")
    p.add_argument("--buffer-mode", choices=("floor", "scale"),
                   help="buffered extraction sizing rule")
    p.add_argument("--buffer-scale", type=float,
                   help="multiplier for buffer-mode=scale")
    p.add_argument("--max-correction", type=int,
                   help="payload bits the decoder may correct")
    p.add_argument("--output", help="report path (JSON)")
    p.add_argument("--debug-dir", help="directory for stage dumps")
    p.add_argument("--threads", type=int, help="worker thread count")
    p.add_argument("--baseline", action="store_true", default=None,
                   help="run the single global projection instead")
    return p


_FLAG_FIELDS = ("input", "tag_size", "thickness", "dict_path", "gradient_n",
                "gradient_tau", "gradient_quantile", "cluster_tol",
                "min_cluster", "buffer_mode", "buffer_scale",
                "max_correction", "output", "debug_dir", "threads",
                "baseline")


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    for name in _FLAG_FIELDS:
        val = getattr(args, name)
        if val is not None:
            setattr(cfg, name, val)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        cfg.validate()
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    runner = run_baseline if cfg.baseline else run_pipeline
    try:
        report, detections = runner(cfg)
    except Exception as e:  # noqa: BLE001  - anything fatal means no report
        print(f"error: {e}", file=sys.stderr)
        return 1
    for det in detections:
        c = det.center()
        print(f"id {det.tag_id:3d}  mirrored={str(det.mirrored):5s}  "
              f"center ({c[0]:.3f}, {c[1]:.3f}, {c[2]:.3f})  "
              f"rms {det.rms_residual * 1000.0:.2f} mm")
    print(f"{len(detections)} tag(s); report "
          f"{'written to ' + cfg.output if cfg.output else 'not written '}"
          f"{'' if cfg.output else '(no --output)'}")
    return 0


# scene tool


def _scene_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="maptag-scene",
        description="Synthetic scene generation and report scoring.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a scene spec to a map")
    g.add_argument("--spec", required=True, help="scene spec JSON")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", required=True, help="output .pcd path")
    g.add_argument("--truth", help="also write ground truth JSON here")
    g.add_argument("--dict", dest="dict_path", default="builtin")

    e = sub.add_parser("evaluate", help="score a report against truth")
    e.add_argument("--report", required=True, help="pipeline report JSON")
    e.add_argument("--truth", required=True, help="ground truth JSON")
    return p


def scene_main(argv=None) -> int:
    args = _scene_parser().parse_args(argv)
    if args.command == "generate":
        spec = load_scene_spec(args.spec)
        dictionary = (builtin_dictionary() if args.dict_path == "builtin"
                      else TagDictionary.load(args.dict_path))
        cloud, truth = synth_scene(spec, seed=args.seed,
                                   dictionary=dictionary)
        save_pcd(cloud, args.output)
        print(f"{len(cloud)} points -> {args.output}")
        if args.truth:
            save_truth(truth, args.truth)
            print(f"{len(truth.tags)} tag(s) -> {args.truth}")
        return 0

    import json
    with open(args.report, "r", encoding="utf-8") as f:
        report = json.load(f)
    detections = report_to_detections(report)
    truth = load_truth(args.truth)
    ev = evaluate(detections, truth)
    print(f"detected {ev.counts()}")
    for s in ev.scores:
        if not s.detected:
            print(f"id {s.tag_id:3d}  missed")
            continue
        terr = np.abs(s.translation_error) * 1000.0
        print(f"id {s.tag_id:3d}  |t| err ({terr[0]:.1f}, {terr[1]:.1f}, "
              f"{terr[2]:.1f}) mm  rot ({s.rotation_error_deg[0]:.2f}, "
              f"{s.rotation_error_deg[1]:.2f}, "
              f"{s.rotation_error_deg[2]:.2f}) deg  "
              f"vert rms {s.vertex_rms * 1000.0:.1f} mm")
    if ev.duplicates:
        print(f"duplicate ids: {ev.duplicates}")
    if ev.spurious:
        print(f"spurious ids: {ev.spurious}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
