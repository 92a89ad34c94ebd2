import csv

import numpy as np
import pytest

from rs_slam import pipeline as P
from rs_slam.config import SlamConfig
from rs_slam.evaluation import ate_rmse
from rs_slam.geometry import FR1, PoseSE3
from rs_slam.trajectory import format_line
from rs_slam.tum import RgbdFrame
from rs_slam.synthetic import make_frames

# half resolution keeps the suite fast; intrinsics scaled to match
K_HALF = type(FR1)(FR1.fx / 2, FR1.fy / 2, FR1.cx / 2, FR1.cy / 2)


@pytest.fixture(scope="module")
def scene():
    return make_frames(14, 320, 240, K=K_HALF, seed=3)


@pytest.fixture(scope="module")
def runs(scene):
    frames, _ = scene
    cfg = SlamConfig(seed=11)
    return (P.run_sequence(frames, cfg, K_HALF, sequential=True),
            P.run_sequence(frames, cfg, K_HALF, sequential=False))


def _lines(run):
    return [format_line(t, p) for t, p in run.trajectory]


def test_single_frame(scene):
    frames, _ = scene
    out = P.run_sequence(frames[:1], SlamConfig(), K_HALF)
    (r,) = out.results
    assert r.is_keyframe and r.tracked and r.pose == PoseSE3.identity()
    assert len(out.global_map) > 100
    assert out.trajectory.poses[0] == PoseSE3.identity()


def test_empty_stream():
    with pytest.raises(ValueError):
        P.run_sequence([], SlamConfig(), K_HALF)


def test_pipelined_equals_sequential(runs):
    seq, pipe = runs
    assert _lines(seq) == _lines(pipe)
    assert [(r.is_keyframe, r.tracked, r.n_matches, r.n_inliers, r.map_size) for r in seq.results] == \
           [(r.is_keyframe, r.tracked, r.n_matches, r.n_inliers, r.map_size) for r in pipe.results]


def test_tracks_synthetic_scene(runs, scene):
    _, gt = scene
    for run in runs:
        assert all(r.tracked for r in run.results)
        assert ate_rmse(run.trajectory, gt) < 0.02


def test_keyframe_ordering_in_trace(runs):
    _, pipe = runs
    keys = [r.frame_index for r in pipe.results if r.is_keyframe]
    assert keys[0] == 0 and len(keys) >= 2
    assert P.keyframe_order_violations(pipe.trace, keys) == []


def test_trace_complete(runs):
    for run in runs:
        for r in run.results:
            for s in ("FE", "FM", "PE", "PO"):
                assert run.trace.find(s, "start", r.frame_index) < run.trace.find(s, "end", r.frame_index)
            assert (run.trace.find("MU", "end", r.frame_index) is not None) == r.is_keyframe


def test_frontend_overlaps_backend(runs):
    _, pipe = runs
    tr = pipe.trace
    n = len(pipe.results)
    overlapped = sum(tr.find("FE", "start", k + 1) < tr.find("PO", "end", k) for k in range(1, n - 1))
    assert overlapped > 0


def test_sequential_has_no_overlap(runs):
    seq, _ = runs
    tr = seq.trace
    for k in range(len(seq.results) - 1):
        last = tr.find("MU", "end", k) or tr.find("PO", "end", k)
        assert tr.find("FE", "start", k + 1) > last


def test_result_invariants(runs):
    for run in runs:
        ts = [r.timestamp for r in run.results]
        assert ts == sorted(set(ts))
        assert [r.frame_index for r in run.results] == list(range(len(ts)))
        for r in run.results:
            assert all(v >= 0 for v in r.stage_timings.values())
            assert set(r.stage_timings) == set(P.STAGES)
            assert (r.pose is not None) == r.tracked


def test_tracking_failure_propagates_pose(scene):
    frames, _ = scene
    blank = RgbdFrame(frames[3].timestamp + 0.001, np.full_like(frames[3].gray, 128), frames[3].depth)
    stream = frames[:4] + [blank] + [f for f in frames[4:8]]
    for seq in (True, False):
        out = P.run_sequence(stream, SlamConfig(), K_HALF, sequential=seq)
        r = out.results[4]
        assert not r.tracked and r.pose is None and not r.is_keyframe
        assert out.trajectory.poses[4] == out.trajectory.poses[3]
        assert out.results[5].tracked


def test_frontend_error_surfaces(scene):
    frames, _ = scene

    def stream():
        yield frames[0]
        raise RuntimeError("decode failed")

    with pytest.raises(RuntimeError, match="decode failed"):
        P.run_sequence(stream(), SlamConfig(), K_HALF)


def test_ransac_seed():
    assert P.ransac_seed(1, 5) == P.ransac_seed(1, 5)
    assert len({P.ransac_seed(1, k) for k in range(100)}) == 100
    assert P.ransac_seed(1, 5) != P.ransac_seed(2, 5)


# --------------------------------------------------------------------- stats

def _result(k, t, key=False):
    return P.FrameResult(k, float(k), PoseSE3.identity(), key, dict(t), True)


def test_pipelined_model_normal_frame():
    t = dict.fromkeys(P.STAGES, 10.0)
    assert P.pipelined_frame_ms(t, False) == 20.0
    assert P.sequential_frame_ms(t) == 50.0


def test_pipelined_model_reference_figures():
    t = {"FE": 9.1, "FM": 4.0, "PE": 9.2, "PO": 8.7, "MU": 9.9}
    assert P.pipelined_frame_ms(t, False) == pytest.approx(17.9)
    assert P.pipelined_frame_ms(t, True) == pytest.approx(31.8)


def test_collect_stats_hand_computed():
    rng = np.random.default_rng(0)
    results = []
    for k in range(100):
        t = {s: float(v) for s, v in zip(P.STAGES, rng.uniform(0, 30, 5))}
        key = k % 4 == 0
        if not key:
            t["MU"] = 0.0
        results.append(_result(k, t, key))
    st = P.collect_stats(results, wall_time_s=4.0)
    for s in P.STAGES:
        assert st.stage_mean_ms[s] == pytest.approx(np.mean([r.stage_timings[s] for r in results]))
    normal = [r.stage_timings for r in results if not r.is_keyframe]
    keys = [r.stage_timings for r in results if r.is_keyframe]
    assert st.normal_pipelined_ms == pytest.approx(np.mean([max(t["FE"] + t["FM"], t["PE"] + t["PO"]) for t in normal]))
    assert st.keyframe_pipelined_ms == pytest.approx(
        np.mean([max(t["FE"], t["PE"] + t["PO"] + t["MU"]) + t["FM"] for t in keys]))
    assert st.normal_sequential_ms == pytest.approx(np.mean([sum(t.values()) for t in normal]))
    assert st.keyframe_fraction == 0.25 and st.n_frames == 100 and st.wall_fps == 25.0


def test_collect_stats_empty():
    with pytest.raises(ValueError):
        P.collect_stats([])


def test_report_shape():
    results = [_result(0, dict.fromkeys(P.STAGES, 10.0), True),
               _result(1, {**dict.fromkeys(P.STAGES, 10.0), "MU": 0.0})]
    text = P.format_report(P.collect_stats(results, 1.0))
    for name in P.STAGE_NAMES.values():
        assert name in text
    for row in ("Runtime N-frame", "Runtime K-frame", "Frame rate N-frame", "Frame rate K-frame"):
        assert row in text
    assert "keyframes 1 (50.0%)" in text


def test_write_timings(tmp_path, runs):
    seq, _ = runs
    P.write_timings(seq.results, tmp_path / "t.csv")
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert rows[0] == "frame,timestamp,FE_ms,FM_ms,PE_ms,PO_ms,MU_ms,keyframe,tracked".split(",")
    assert len(rows) == len(seq.results) + 1
    assert rows[1][7] == "1" and rows[1][8] == "1"
