"""Command line interface.

Subcommands: build-vocab, build-db, gen-scene, run, eval, bench-query and
print-config. Errors exit nonzero with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .backend import read_map_dump, write_map_dump
from .config import Config, config_text, read_config
from .database import (
    ObjectDatabase,
    build_object_model,
    load_database,
    read_model_file,
    save_database,
)
from .errors import ObjSlamError
from .evaluate import evaluate, read_detections, write_report
from .pipeline import run_pipeline, write_timings
from .recognition import read_frames_file, write_detections
from .scene import (
    generate_scene,
    read_ground_truth,
    read_scene_config,
    read_scene_frames,
    read_vocab_corpus,
    write_scene,
)
from .vocab import build_vocabulary, load_vocabulary, save_vocabulary


def _cmd_build_vocab(args):
    images = read_vocab_corpus(args.corpus)
    tree = build_vocabulary(images, k=args.k, depth=args.L, seed=args.seed)
    save_vocabulary(tree, args.output)
    informative = int((tree.idf > 0).sum())
    print(
        f"vocabulary: {tree.n_words} words ({informative} with nonzero idf, "
        f"{tree.n_nodes} nodes) -> {args.output}"
    )
    if informative == 0:
        print(
            "warning: every word occurs in every training image, so all idf "
            "weights are zero and bag-of-words vectors will be empty; "
            "increase -k/-L or use a larger corpus",
            file=sys.stderr,
        )
    return 0


def _cmd_build_db(args):
    tree = load_vocabulary(args.vocab)
    db = ObjectDatabase(tree)
    for path in args.models:
        mid, points, descs = read_model_file(path)
        db.add_model(build_object_model(mid, points, descs, tree))
    save_database(db, args.output)
    print(f"database: {len(db)} models -> {args.output}")
    return 0


def _cmd_gen_scene(args):
    cfg = read_config(args.config) if args.config else Config().validate()
    scene = generate_scene(cfg)
    write_scene(scene, args.output)
    n_feats = sum(len(fr) for fr in scene.frames)
    print(
        f"scene: {len(scene.models)} models, {cfg.n_instances} instances, "
        f"{len(scene.frames)} frames ({n_feats} features) -> {args.output}"
    )
    return 0


def _cmd_run(args):
    tree = load_vocabulary(args.vocab)
    db = load_database(args.db, tree)
    cfg = read_scene_config(args.scene_dir)
    frames = read_scene_frames(args.scene_dir)
    result = run_pipeline(tree, db, frames, cfg)
    os.makedirs(args.output, exist_ok=True)
    write_map_dump(result.map_state, os.path.join(args.output, "map.txt"))
    write_detections(
        os.path.join(args.output, "detections.txt"),
        [obs for obs, _ in result.observations],
        [iid for _, iid in result.observations],
    )
    write_timings(
        os.path.join(args.output, "timings.txt"), result.timings, result.n_frames
    )
    n_tri = sum(1 for i in result.map_state.instances.values() if i.is_triangulated)
    scale = result.map_state.scale
    print(
        f"run: {len(result.observations)} detections, "
        f"{len(result.map_state.instances)} instances ({n_tri} triangulated), "
        f"scale={'none' if scale is None else f'{scale:.6f}'} -> {args.output}"
    )
    return 0


def _cmd_eval(args):
    map_dump = read_map_dump(os.path.join(args.out_dir, "map.txt"))
    detections = read_detections(os.path.join(args.out_dir, "detections.txt"))
    gt = read_ground_truth(args.scene_dir)
    report = evaluate(map_dump, detections, gt)
    write_report(report, args.report)
    print(
        f"eval: ate={report.ate_trans_rmse:.6g} map units, "
        f"scale_error={'n/a' if report.scale_error is None else f'{report.scale_error:.6g}'}, "
        f"recall={report.recall:.3f}, precision={report.precision:.3f} -> {args.report}"
    )
    return 0


def _cmd_bench_query(args):
    from .backend import MapState
    from .pipeline import StageTimer, process_frame

    db = load_database(args.db)
    tree = db.tree
    frames = read_frames_file(args.frames)
    cfg = read_config(args.config) if args.config else Config().validate()
    from .geometry import Pose

    rng = np.random.default_rng(cfg.rng_seed)
    latencies = []
    for frame in frames:
        if frame.pose_wc is None:
            frame.pose_wc = Pose.identity()
        timer = StageTimer()
        t0 = time.perf_counter()
        process_frame(frame, tree, db, MapState(), cfg, rng, timer)
        latencies.append((time.perf_counter() - t0) * 1000.0)
    lat = np.array(latencies)
    p50, p90, p99 = (float(np.percentile(lat, q)) for q in (50, 90, 99))
    print(
        f"bench-query: {len(lat)} frames against {len(db)} models: "
        f"mean={lat.mean():.1f} ms p50={p50:.1f} p90={p90:.1f} p99={p99:.1f}"
    )
    if p50 > 300.0:
        print(
            f"warning: median latency {p50:.1f} ms exceeds the 300 ms target",
            file=sys.stderr,
        )
    return 0


def _cmd_print_config(args):
    sys.stdout.write(config_text(Config()))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="objslam",
        description="Monocular object SLAM: recognition database tools, "
        "synthetic scenes, the end-to-end pipeline and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="cluster a descriptor corpus into a word tree")
    p.add_argument("corpus")
    p.add_argument("-k", type=int, default=32, help="branching factor")
    p.add_argument("-L", type=int, default=3, help="depth levels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_build_vocab)

    p = sub.add_parser("build-db", help="index object model files")
    p.add_argument("vocab")
    p.add_argument("models", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_build_db)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("run", help="run the pipeline on a scene")
    p.add_argument("vocab")
    p.add_argument("db")
    p.add_argument("scene_dir")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="evaluate a run against scene ground truth")
    p.add_argument("out_dir")
    p.add_argument("scene_dir")
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench-query", help="per-frame query+verification latency")
    p.add_argument("db")
    p.add_argument("frames")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_bench_query)

    p = sub.add_parser("print-config", help="dump the default configuration")
    p.set_defaults(func=_cmd_print_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ObjSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
