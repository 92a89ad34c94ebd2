"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The verdict lines are printed in the "acceptance criteria" section at the end
of the pytest run. Criteria that need the TUM RGB-D benchmark read it from
``$RS_SLAM_TUM_ROOT``; without it they are reported as NOT RUN and a synthetic
proxy of the same check runs instead (reported separately, never as the
criterion itself).
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from acceptance_report import record
from conftest import structured_images, textured_image
from rs_slam import cli, evaluation, geometry as G, imaging, orb, pipeline
from rs_slam.config import SlamConfig
from rs_slam.synthetic import make_frames, write_sequence
from rs_slam.trajectory import Trajectory, format_line
from rs_slam.tum import iter_sequence, load_ground_truth

K = G.FR1
SEQUENCES = ["fr1/xyz", "fr1/desk", "fr1/room", "fr2/xyz", "fr2/rpy"]


def tum_sequence(name):
    root = os.environ.get("RS_SLAM_TUM_ROOT")
    if not root:
        return None
    cam, seq = name.split("/")
    for cand in (f"rgbd_dataset_freiburg{cam[-1]}_{seq}", f"{cam}_{seq}", f"{cam}/{seq}"):
        p = Path(root) / cand
        if (p / "rgb.txt").is_file():
            return p
    return None


def traj_lines(traj):
    return [format_line(t, p) for t, p in traj]


# ----------------------------------------------------------------------- 1

def test_criterion_1_tum_accuracy():
    xyz = tum_sequence("fr1/xyz")
    if xyz is None:
        record("1", None, "TUM data not found (set RS_SLAM_TUM_ROOT); see criterion 1-proxy")
        pytest.skip("TUM RGB-D sequences not available")
    errors = {}
    for name in SEQUENCES:
        path = tum_sequence(name)
        if path is None:
            continue
        cfg = SlamConfig(seed=0)
        run = pipeline.run_sequence(iter_sequence(path), cfg, cfg.intrinsics(str(path)))
        errors[name] = evaluation.ate_rmse(run.trajectory, load_ground_truth(path / "groundtruth.txt"))
    ok = errors["fr1/xyz"] <= 0.10
    detail = ", ".join(f"{k} {100 * v:.2f} cm" for k, v in errors.items())
    if len(errors) == len(SEQUENCES):
        mean = float(np.mean(list(errors.values())))
        ok = ok and mean <= 0.12
        detail += f"; mean {100 * mean:.2f} cm (limit 12 cm)"
    else:
        detail += "; five-sequence mean NOT RUN (sequences missing)"
    record("1", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_1_proxy_synthetic_accuracy():
    frames, gt = make_frames(100, 640, 480, seed=21)
    run = pipeline.run_sequence(frames, SlamConfig(seed=0), K)
    ate = evaluation.ate_rmse(run.trajectory, gt)
    tracked = sum(r.tracked for r in run.results)
    ok = ate <= 0.10
    record("1-proxy", ok, f"synthetic room, 100 frames 640x480: ATE {100 * ate:.2f} cm (limit 10 cm), "
                          f"{tracked}/100 tracked")
    assert ok


# ----------------------------------------------------------------------- 2

def _explicit_rotation_tables(pattern):
    """Sampling offsets for all 32 labels, built from the seeds with explicit trig."""
    tabs = []
    for n in range(32):
        s = np.floor(np.array(oracles.rotated_locations(pattern.seed_s, n)) + 0.5).astype(int)
        d = np.floor(np.array(oracles.rotated_locations(pattern.seed_d, n)) + 0.5).astype(int)
        tabs.append((s, d))
    return tabs


def test_criterion_2_shift_equivalence():
    rng = np.random.default_rng(2019)
    pattern = orb.canonical_pattern()
    tabs = _explicit_rotation_tables(pattern)
    patches = rng.integers(0, 256, (1000, 37, 37)).astype(np.uint8)
    failures = 0
    for img in patches:
        base = orb.compute_descriptor(img, 18, 18, pattern)
        for n, (s, d) in enumerate(tabs):
            bits = img[18 + s[:, 1], 18 + s[:, 0]] > img[18 + d[:, 1], 18 + d[:, 0]]
            want = np.packbits(bits, bitorder="little")
            failures += not np.array_equal(orb.rotate_descriptor(base, n), want)
    record("2", failures == 0, f"1000 patches x 32 labels, {failures} mismatches")
    assert failures == 0


# ----------------------------------------------------------------------- 3

def test_criterion_3_extraction_oracles():
    rng = np.random.default_rng(33)
    images = []
    for i in range(100):
        if i % 2:
            images.append(rng.integers(0, 256, (48, 56)).astype(np.uint8))
        else:
            images.append(imaging.smooth(textured_image(rng, 60, 64, int(rng.integers(3, 9)))))
    images += structured_images()
    pattern = orb.canonical_pattern()
    fast_bad = desc_bad = top_bad = n_desc = 0
    for img in images:
        for thr in (10, 20, 40):
            got = [tuple(p) for p in orb.detect_fast(img, thr)]
            fast_bad += got != oracles.fast_naive(img, thr)
        kps = orb.detect_fast(img, 20)
        inside = [(x, y) for x, y in kps if 18 <= x < img.shape[1] - 18 and 18 <= y < img.shape[0] - 18]
        for x, y in inside[:8]:
            n_desc += 1
            desc_bad += not np.array_equal(orb.compute_descriptor(img, int(x), int(y), pattern),
                                           oracles.descriptor_rotated_naive(img, int(x), int(y), pattern, 0))
        valid = [(x, y) for x, y in kps if 4 <= x < img.shape[1] - 4 and 4 <= y < img.shape[0] - 4]
        scores = [orb.harris_score(img, int(x), int(y)) for x, y in valid]
        for cap in (1, 5, 50):
            kept = orb.filter_top_n(scores, cap, key=lambda s: s)
            top_bad += sorted(kept) != sorted(oracles.top_n_scores_naive(scores, cap)[0])
    ok = fast_bad == desc_bad == top_bad == 0
    record("3", ok, f"{len(images)} images: FAST mismatches {fast_bad}/{3 * len(images)}, "
                    f"descriptor mismatches {desc_bad}/{n_desc}, top-N mismatches {top_bad}/{3 * len(images)}")
    assert ok


# ----------------------------------------------------------------------- 4

def _fd_jacobian(pose, pts, px, step=1e-6):
    cols = []
    for k in range(6):
        d = np.zeros(6)
        d[k] = step
        rp = G.residuals(G.se3_exp(d) @ pose, K, pts, px)
        rm = G.residuals(G.se3_exp(-d) @ pose, K, pts, px)
        cols.append(((rp - rm) / (2 * step)).reshape(-1))
    return np.stack(cols, axis=1)


def test_criterion_4_pose_backend():
    rng = np.random.default_rng(44)
    worst_jac, non_monotone = 0.0, 0
    for _ in range(100):
        pose = G.random_pose(rng)
        pts, px = G.synthetic_scene(rng, 30, K, pose)
        px = px + rng.normal(0, 1.0, px.shape)
        _, J = G.residuals_and_jacobian(pose, K, pts, px)
        num = _fd_jacobian(pose, pts, px)
        worst_jac = max(worst_jac, float((np.abs(J.reshape(-1, 6) - num) / np.maximum(np.abs(num), 1.0)).max()))
        p0 = G.se3_exp(rng.normal(0, 0.03, 6)) @ pose
        res = G.optimize_pose(p0, K, (pts, px))
        non_monotone += any(b > a for a, b in zip(res.costs, res.costs[1:])) or res.cost > res.costs[0]

    worst_pnp = 0.0
    for _ in range(100):
        pose = G.random_pose(rng)
        pts, px = G.synthetic_scene(rng, 50, K, pose)
        r = G.pnp_ransac((pts, px), K, rng_seed=int(rng.integers(1 << 31)))
        worst_pnp = max(worst_pnp, *G.pose_difference(r.pose, pose))

    clean = 0
    for trial in range(100):
        pose = G.random_pose(rng)
        pts, px = G.synthetic_scene(rng, 50, K, pose)
        out = rng.choice(50, 15, replace=False)
        px[out] = rng.uniform([0, 0], [640, 480], (15, 2))
        try:
            r = G.pnp_ransac((pts, px), K, rng_seed=trial)
            clean += not set(out.tolist()) & set(r.inliers.tolist())
        except G.PoseEstimationError:
            pass
    ok = worst_jac < 1e-4 and non_monotone == 0 and worst_pnp < 1e-6 and clean >= 99
    record("4", ok, f"Jacobian rel err {worst_jac:.1e} (<1e-4), non-monotone LM runs {non_monotone}/100, "
                    f"noiseless PnP err {worst_pnp:.1e} (<1e-6), outlier-free inlier sets {clean}/100 (>=99)")
    assert ok


# ----------------------------------------------------------------------- 5

def test_criterion_5_evaluation_numerics():
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(50):
        n = 40
        ts = np.cumsum(rng.uniform(0.02, 0.05, n)).tolist()
        gt = Trajectory(ts, [G.random_pose(rng, 2.0, 2.0) for _ in range(n)])
        T = G.random_pose(rng, 3.0, 5.0)
        est = evaluation.transform_trajectory(gt, T.inverse())
        S = evaluation.align_umeyama(est, gt)
        resid = np.abs(gt.positions() - S.apply(est.positions())).max()
        worst = max(worst, float(resid), *G.pose_difference(S, T))
    same = evaluation.ate_rmse(gt, gt)

    n, sigma = 10_000, 0.01
    ts = (np.arange(n) * 0.05).tolist()
    gtm = Trajectory(ts, [G.PoseSE3(np.eye(3), rng.uniform(-2, 2, 3)) for _ in range(n)])
    estm = Trajectory(ts, [G.PoseSE3(np.eye(3), p.translation + rng.normal(0, sigma, 3)) for p in gtm.poses])
    mc = evaluation.ate_rmse(estm, gtm)
    rel = abs(mc / (math.sqrt(3) * sigma) - 1)
    ok = worst < 1e-9 and same == 0.0 and rel <= 0.10
    record("5", ok, f"alignment residual {worst:.1e} (<1e-9), ATE(T,T) = {same!r}, "
                    f"Monte Carlo {1000 * mc:.2f} mm vs {1000 * math.sqrt(3) * sigma:.2f} mm ({100 * rel:.1f}% off)")
    assert ok


# ----------------------------------------------------------------------- 6

def _determinism(frames, K_):
    cfg = SlamConfig(seed=7)
    seq = pipeline.run_sequence(frames, cfg, K_, sequential=True)
    pipe = pipeline.run_sequence(frames, cfg, K_, sequential=False)
    keys = [r.frame_index for r in pipe.results if r.is_keyframe]
    violations = pipeline.keyframe_order_violations(pipe.trace, keys)
    same = traj_lines(seq.trajectory) == traj_lines(pipe.trajectory)
    return same, keys, violations


def test_criterion_6_tum_determinism():
    path = tum_sequence("fr1/xyz")
    if path is None:
        record("6", None, "TUM data not found (set RS_SLAM_TUM_ROOT); see criterion 6-proxy")
        pytest.skip("TUM RGB-D sequences not available")
    frames = list(iter_sequence(path, limit=50))
    same, keys, violations = _determinism(frames, SlamConfig().intrinsics(str(path)))
    ok = same and not violations
    record("6", ok, f"fr1/xyz 50 frames: trajectories identical={same}, {len(keys)} keyframes, "
                    f"ordering violations {violations}")
    assert ok


@pytest.mark.slow
def test_criterion_6_proxy_synthetic_determinism():
    frames, _ = make_frames(50, 640, 480, seed=6)
    same, keys, violations = _determinism(frames, K)
    ok = same and not violations and len(keys) > 1
    record("6-proxy", ok, f"synthetic room 50 frames 640x480: trajectories identical={same}, "
                          f"{len(keys)} keyframes, ordering violations {violations}")
    assert ok


# ----------------------------------------------------------------------- 7

def test_criterion_7_bench_harness(tmp_path, capsys):
    write_sequence(tmp_path / "seq", n_frames=10, seed=8)
    assert cli.main(["bench", "--dataset", str(tmp_path / "seq")]) == 0
    out = capsys.readouterr().out
    rows = ["Feature Extraction", "Feature Matching", "Pose Estimation", "Pose Optimization", "Map Updating",
            "Runtime N-frame", "Runtime K-frame", "Frame rate N-frame", "Frame rate K-frame", "keyframes"]
    missing = [r for r in rows if r not in out]

    frames, _ = make_frames(3, 640, 480, seed=9)
    cfg = SlamConfig()
    tracker = pipeline.Tracker(cfg, K)
    tracker.feature_extraction(frames[0])  # warm caches
    t0 = time.perf_counter()
    for f in frames * 2:
        tracker.feature_extraction(f)
    fe_ms = (time.perf_counter() - t0) * 1e3 / 6
    ok = not missing
    record("7", ok, f"report rows missing: {missing or 'none'}; single-thread extraction "
                    f"{fe_ms:.1f} ms per 640x480 frame (soft target 50 ms, not gating)")
    assert ok, missing
