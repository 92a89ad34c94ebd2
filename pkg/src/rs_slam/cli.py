"""Command-line entry point: ``rs-slam {run,extract,match,eval,bench,synth}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .evaluation import ate_rmse, plot_trajectory
from .geometry import GeometryError
from .imaging import build_pyramid
from .matcher import match_arrays
from .orb import CANONICAL_SEED, canonical_pattern, descriptor_from_hex, descriptor_to_hex, extract, generate_pattern
from .pipeline import collect_stats, format_report, run_sequence, write_timings
from .trajectory import TrajectoryFormatError, read_trajectory, write_trajectory
from .tum import DatasetError, iter_sequence, load_gray

log = logging.getLogger("rs_slam")

KEYPOINT_HEADER = ["x", "y", "layer", "score", "orientation", "descriptor_hex"]


def _frames(args, cfg):
    return iter_sequence(args.dataset, limit=args.limit, prefetch=cfg.prefetch, depth_scale=cfg.depth_scale)


def _load_cfg(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    K = cfg.intrinsics(str(Path(args.dataset).resolve()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(r):
        if r.frame_index % 50 == 0:
            log.info("frame %d  matches %d  inliers %d  map %d", r.frame_index, r.n_matches, r.n_inliers, r.map_size)

    run = run_sequence(_frames(args, cfg), cfg, K, sequential=args.sequential, on_frame=progress)
    write_trajectory(run.trajectory, out / "trajectory.txt")
    write_timings(run.results, out / "timings.csv")
    if args.dump_map:
        run.global_map.dump_csv(out / "map.csv")
    stats = collect_stats(run.results, run.wall_time_s)
    summary = [f"dataset = {args.dataset}", f"mode = {'sequential' if args.sequential else 'pipelined'}",
               f"seed = {cfg.seed}", f"frames = {stats.n_frames}", f"keyframes = {stats.n_keyframes}",
               f"tracked = {stats.n_tracked}", f"map_points = {len(run.global_map)}",
               f"wall_time_s = {run.wall_time_s:.3f}"]
    gt_path = Path(args.dataset) / "groundtruth.txt"
    if gt_path.is_file():
        try:
            summary.append(f"ATE_RMSE_m = {ate_rmse(run.trajectory, read_trajectory(gt_path)):.6f}")
        except GeometryError as exc:
            summary.append(f"ATE_RMSE_m = n/a ({exc})")
    text = "\n".join(summary) + "\n\n" + format_report(stats)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_cfg(args)
    gray = load_gray(args.image)
    pattern = canonical_pattern() if cfg.pattern_seed == CANONICAL_SEED else generate_pattern(cfg.pattern_seed)
    feats = extract(build_pyramid(gray, cfg.n_layers, cfg.scale_factor), cfg.extractor(), pattern)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(KEYPOINT_HEADER)
        for f in feats:
            w.writerow([f.x, f.y, f.layer, repr(f.score), f.orientation, descriptor_to_hex(f.descriptor)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    log.info("%d features", len(feats))
    return 0


def read_keypoint_descriptors(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "descriptor_hex" not in rows[0]:
        raise ValueError(f"{path}: no descriptor_hex column")
    try:
        return np.stack([descriptor_from_hex(r["descriptor_hex"]) for r in rows]) if rows \
            else np.zeros((0, 32), np.uint8)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def cmd_match(args) -> int:
    a = read_keypoint_descriptors(args.a)
    b = read_keypoint_descriptors(args.b)
    fi, mi, d = match_arrays(a, b, args.threshold)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["a_index", "b_index", "distance"])
        w.writerows(zip(fi.tolist(), mi.tolist(), d.tolist()))
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_eval(args) -> int:
    est, gt = read_trajectory(args.est), read_trajectory(args.gt)
    print(f"ATE_RMSE_m={ate_rmse(est, gt):.6f}")
    if args.plot:
        plot_trajectory(est, gt, args.plot, title=Path(args.est).name)
    return 0


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    K = cfg.intrinsics(str(Path(args.dataset).resolve()))
    run = run_sequence(_frames(args, cfg), cfg, K, sequential=args.sequential)
    print(format_report(collect_stats(run.results, run.wall_time_s)), end="")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import write_sequence
    write_sequence(args.out, n_frames=args.frames, width=args.width, height=args.height, seed=args.seed)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rs-slam", description="RGB-D visual odometry with rotation-symmetric BRIEF")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="track a TUM-format sequence")
    r.add_argument("--dataset", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--sequential", action="store_true", help="disable front/back-end overlap")
    r.add_argument("--seed", type=int)
    r.add_argument("--limit", type=int, help="only the first N frames")
    r.add_argument("--dump-map", action="store_true", help="also write map.csv")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("extract", help="features of one image as CSV")
    e.add_argument("--image", required=True)
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_extract)

    m = sub.add_parser("match", help="brute-force Hamming matching of two keypoint CSVs")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--threshold", type=int, default=64)
    m.add_argument("--out")
    m.set_defaults(func=cmd_match)

    v = sub.add_parser("eval", help="ATE RMSE of an estimate against ground truth")
    v.add_argument("--est", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--plot", help="write an SVG of the aligned XY paths")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="stage timing breakdown and frame rates")
    b.add_argument("--dataset", required=True)
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--limit", type=int)
    b.add_argument("--sequential", action="store_true")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="write a synthetic TUM-format sequence")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--width", type=int, default=640)
    s.add_argument("--height", type=int, default=480)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, TrajectoryFormatError, GeometryError, ValueError, OSError) as exc:
        print(f"rs-slam: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
