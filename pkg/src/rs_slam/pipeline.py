"""Frame-by-frame tracking with a two-stage front-end / back-end pipeline.

Front-end: FE (pyramid + extraction) and FM (matching against a map snapshot).
Back-end:  PE (PnP + RANSAC), PO (LM refinement) and, on keyframes, MU.

In pipelined mode the front-end runs in its own thread. FE of frame k+1 may
overlap the back-end of frame k; FM of frame k+1 waits until frame k's map
state is final, i.e. until PO(k) on a normal frame and MU(k) on a keyframe.
Matching therefore always sees the same map as in sequential mode, which keeps
the two modes bit-identical.
"""
from __future__ import annotations

import csv
import itertools
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .config import SlamConfig
from .geometry import (CameraIntrinsics, InsufficientDataError, PoseEstimationError, PoseSE3,
                       optimize_pose, pnp_ransac)
from .imaging import build_pyramid
from .matcher import match_arrays
from .orb import CANONICAL_SEED, canonical_pattern, extract, generate_pattern, stack_descriptors
from .trajectory import Trajectory
from .world_map import GlobalMap, is_keyframe

log = logging.getLogger(__name__)

STAGES = ("FE", "FM", "PE", "PO", "MU")


@dataclass
class FrameResult:
    frame_index: int
    timestamp: float
    pose: PoseSE3 | None          # world-to-camera; None when tracking failed
    is_keyframe: bool
    stage_timings: dict = field(default_factory=dict)  # ms per stage
    tracked: bool = True
    n_features: int = 0
    n_matches: int = 0
    n_inliers: int = 0
    map_size: int = 0


class Event(NamedTuple):
    seq: int
    stage: str
    kind: str       # "start" | "end"
    frame: int


class EventTrace:
    """Thread-safe, totally ordered log of stage start/end events."""

    def __init__(self):
        self._lock = threading.Lock()
        self._seq = itertools.count()
        self.events: list[Event] = []

    def record(self, stage: str, kind: str, frame: int) -> None:
        with self._lock:
            self.events.append(Event(next(self._seq), stage, kind, frame))

    def find(self, stage: str, kind: str, frame: int) -> int | None:
        for e in self.events:
            if e.stage == stage and e.kind == kind and e.frame == frame:
                return e.seq
        return None


def keyframe_order_violations(trace: EventTrace, keyframes) -> list[int]:
    """Keyframes k for which FM(k+1) started before MU(k) ended."""
    bad = []
    for k in keyframes:
        mu_end = trace.find("MU", "end", k)
        fm_next = trace.find("FM", "start", k + 1)
        if fm_next is not None and (mu_end is None or fm_next < mu_end):
            bad.append(k)
    return bad


@dataclass
class RunOutput:
    results: list
    trajectory: Trajectory       # camera-to-world, TUM convention
    trace: EventTrace
    global_map: GlobalMap
    wall_time_s: float


class _Timer:
    def __init__(self, timings, trace, stage, frame):
        self.timings, self.trace, self.stage, self.frame = timings, trace, stage, frame

    def __enter__(self):
        self.trace.record(self.stage, "start", self.frame)
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.timings[self.stage] = (time.perf_counter() - self.t0) * 1e3
        self.trace.record(self.stage, "end", self.frame)
        return False


def ransac_seed(seed: int, frame_index: int) -> int:
    return int(np.random.SeedSequence([seed, frame_index]).generate_state(1)[0])


class _Packet(NamedTuple):
    index: int
    frame: object
    features: list
    matches: tuple          # (feature_idx, map_idx, distance) arrays
    points: np.ndarray      # world positions of the matched map points
    point_ids: np.ndarray
    timings: dict


class Tracker:
    """Holds the map and the per-frame state shared by both execution modes."""

    def __init__(self, config: SlamConfig, K: CameraIntrinsics):
        self.config = config
        self.K = K
        self.extractor = config.extractor()
        self.policy = config.keyframe_policy()
        self.pattern = (canonical_pattern() if config.pattern_seed == CANONICAL_SEED
                        else generate_pattern(config.pattern_seed))
        self.map = GlobalMap()
        self.map_lock = threading.Lock()
        self.last_pose: PoseSE3 | None = None
        self.last_keyframe_pose: PoseSE3 | None = None

    # ---------------------------------------------------------------- front end
    def feature_extraction(self, frame):
        pyr = build_pyramid(frame.gray, self.config.n_layers, self.config.scale_factor)
        return extract(pyr, self.extractor, self.pattern)

    def feature_matching(self, features):
        with self.map_lock:
            snap = self.map.snapshot()
        fi, mi, d = match_arrays(stack_descriptors(features), snap.descriptors, self.config.match_threshold)
        return (fi, mi, d), snap.positions[mi], snap.ids[mi]

    def front_end(self, k, frame, trace) -> _Packet:
        timings = {}
        with _Timer(timings, trace, "FE", k):
            feats = self.feature_extraction(frame)
        return self._match(k, frame, feats, timings, trace)

    def _match(self, k, frame, feats, timings, trace) -> _Packet:
        with _Timer(timings, trace, "FM", k):
            matches, pts, ids = self.feature_matching(feats)
        return _Packet(k, frame, feats, matches, pts, ids, timings)

    # ----------------------------------------------------------------- back end
    def estimate(self, pkt: _Packet, trace) -> tuple[FrameResult, np.ndarray | None]:
        """PE and PO. Returns the result so far and the matched map ids of the inliers."""
        k, frame, timings = pkt.index, pkt.frame, pkt.timings
        res = FrameResult(k, frame.timestamp, None, False, timings, False,
                          n_features=len(pkt.features), n_matches=int(pkt.matches[0].size))
        if self.last_pose is None:
            # bootstrap: the first frame defines the world frame
            timings["PE"] = timings["PO"] = 0.0
            trace.record("PE", "start", k), trace.record("PE", "end", k)
            trace.record("PO", "start", k), trace.record("PO", "end", k)
            res.pose, res.tracked = PoseSE3.identity(), True
            return res, np.zeros(0, np.int64)

        fi = pkt.matches[0]
        pixels = np.array([pkt.features[i].pt for i in fi], dtype=np.float64).reshape(-1, 2)
        inliers = None
        with _Timer(timings, trace, "PE", k):
            try:
                pnp = pnp_ransac((pkt.points, pixels), self.K, rng_seed=ransac_seed(self.config.seed, k),
                                 iterations=self.config.ransac_iterations, inlier_px=self.config.inlier_px,
                                 initial=self.last_pose)
                if len(pnp.inliers) >= self.config.min_inliers:
                    inliers = pnp.inliers
                else:
                    log.info("frame %d: only %d inliers", k, len(pnp.inliers))
            except (InsufficientDataError, PoseEstimationError) as exc:
                log.info("frame %d: tracking lost (%s)", k, exc)
        with _Timer(timings, trace, "PO", k):
            if inliers is not None:
                opt = optimize_pose(pnp.pose, self.K, (pkt.points[inliers], pixels[inliers]),
                                    max_iterations=self.config.lm_max_iterations)
                res.pose, res.tracked, res.n_inliers = opt.pose, True, int(inliers.size)
        if inliers is None:
            return res, None
        return res, pkt.point_ids[inliers]

    def update(self, res: FrameResult, pkt: _Packet, inlier_ids, trace) -> None:
        """Keyframe decision and, on keyframes, MU."""
        k = res.frame_index
        if res.tracked:
            with self.map_lock:
                self.map.touch_ids(inlier_ids, k)
            res.is_keyframe = is_keyframe(res.pose, self.last_keyframe_pose, self.policy)
            self.last_pose = res.pose
        if res.is_keyframe:
            with _Timer(res.stage_timings, trace, "MU", k):
                with self.map_lock:
                    self.map.insert_keyframe(pkt.features, pkt.frame.depth, res.pose, self.K, k, self.policy)
                    self.map.prune(k, self.policy)
            self.last_keyframe_pose = res.pose
        else:
            res.stage_timings["MU"] = 0.0
        res.map_size = len(self.map)

    def back_end(self, pkt: _Packet, trace) -> FrameResult:
        res, ids = self.estimate(pkt, trace)
        self.update(res, pkt, ids, trace)
        return res


def _trajectory(results, tracker_poses) -> Trajectory:
    traj = Trajectory()
    for r, pose in zip(results, tracker_poses):
        traj.append(r.timestamp, pose.inverse())
    return traj


def run_sequence(frames: Iterable, config: SlamConfig | None = None, K: CameraIntrinsics | None = None,
                 sequential: bool = False, on_frame=None) -> RunOutput:
    """Track a stream of :class:`~rs_slam.tum.RgbdFrame`.

    Untracked frames keep the previous pose in the trajectory (constant-pose
    propagation) and are flagged in their :class:`FrameResult`.
    """
    config = config or SlamConfig()
    K = K or config.intrinsics()
    tracker = Tracker(config, K)
    trace = EventTrace()
    results, poses = [], []
    t0 = time.perf_counter()

    def finish(res):
        pose = res.pose if res.tracked else (poses[-1] if poses else PoseSE3.identity())
        if results and not res.timestamp > results[-1].timestamp:
            raise ValueError(f"frame {res.frame_index}: timestamps must strictly increase")
        results.append(res)
        poses.append(pose)
        if on_frame:
            on_frame(res)

    if sequential:
        for k, frame in enumerate(frames):
            finish(tracker.back_end(tracker.front_end(k, frame, trace), trace))
    else:
        _run_pipelined(frames, tracker, trace, finish)

    if not results:
        raise ValueError("run_sequence needs at least one frame")
    return RunOutput(results, _trajectory(results, poses), trace, tracker.map, time.perf_counter() - t0)


_DONE = object()


def _run_pipelined(frames, tracker: Tracker, trace: EventTrace, finish) -> None:
    handoff = queue.Queue(maxsize=1)     # one frame in each stage
    ready = {}                           # frame index -> Event set once its map state is final
    ready_lock = threading.Lock()
    stop = threading.Event()
    errors = []

    def gate(k):
        with ready_lock:
            return ready.setdefault(k, threading.Event())

    def put(item):
        while not stop.is_set():
            try:
                handoff.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def front():
        try:
            for k, frame in enumerate(frames):
                timings = {}
                with _Timer(timings, trace, "FE", k):
                    feats = tracker.feature_extraction(frame)
                if k > 0:
                    while not gate(k - 1).wait(0.1):
                        if stop.is_set():
                            return
                if not put(tracker._match(k, frame, feats, timings, trace)):
                    return
        except BaseException as exc:  # surfaced on the main thread
            errors.append(exc)
        finally:
            put(_DONE)

    worker = threading.Thread(target=front, name="rs-slam-frontend", daemon=True)
    worker.start()
    try:
        while True:
            pkt = handoff.get()
            if pkt is _DONE:
                break
            res, ids = tracker.estimate(pkt, trace)
            # after PO on normal frames, after MU on keyframes
            tracker.update(res, pkt, ids, trace)
            gate(pkt.index).set()
            finish(res)
    finally:
        stop.set()
        worker.join()
    if errors:
        raise errors[0]


# --------------------------------------------------------------------- stats

def pipelined_frame_ms(t: dict, keyframe: bool) -> float:
    """Modelled per-frame time when front-end and back-end overlap.

    Normal frame: FE+FM of the next frame hide behind PE+PO.
    Keyframe: FE hides behind PE+PO+MU, FM must wait for MU.
    """
    fe, fm, pe, po, mu = (t.get(s, 0.0) for s in STAGES)
    if keyframe:
        return max(fe, pe + po + mu) + fm
    return max(fe + fm, pe + po)


def sequential_frame_ms(t: dict) -> float:
    return sum(t.get(s, 0.0) for s in STAGES)


@dataclass
class RunStats:
    n_frames: int
    n_keyframes: int
    n_tracked: int
    stage_mean_ms: dict
    normal_sequential_ms: float
    keyframe_sequential_ms: float
    normal_pipelined_ms: float
    keyframe_pipelined_ms: float
    mean_pipelined_ms: float
    wall_fps: float | None = None

    @property
    def keyframe_fraction(self) -> float:
        return self.n_keyframes / self.n_frames

    def fps(self, ms: float) -> float:
        return 1e3 / ms if ms > 0 else float("inf")


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else float("nan")


def collect_stats(results, wall_time_s: float | None = None) -> RunStats:
    if not results:
        raise ValueError("collect_stats needs at least one frame result")
    stage = {s: _mean([r.stage_timings.get(s, 0.0) for r in results]) for s in STAGES}
    normal = [r for r in results if not r.is_keyframe]
    keys = [r for r in results if r.is_keyframe]
    pipe = [pipelined_frame_ms(r.stage_timings, r.is_keyframe) for r in results]
    return RunStats(
        n_frames=len(results),
        n_keyframes=len(keys),
        n_tracked=sum(r.tracked for r in results),
        stage_mean_ms=stage,
        normal_sequential_ms=_mean([sequential_frame_ms(r.stage_timings) for r in normal]),
        keyframe_sequential_ms=_mean([sequential_frame_ms(r.stage_timings) for r in keys]),
        normal_pipelined_ms=_mean([pipelined_frame_ms(r.stage_timings, False) for r in normal]),
        keyframe_pipelined_ms=_mean([pipelined_frame_ms(r.stage_timings, True) for r in keys]),
        mean_pipelined_ms=_mean(pipe),
        wall_fps=(len(results) / wall_time_s) if wall_time_s else None,
    )


STAGE_NAMES = {"FE": "Feature Extraction", "FM": "Feature Matching", "PE": "Pose Estimation",
               "PO": "Pose Optimization", "MU": "Map Updating"}

# reference figures for the FPGA-accelerated system, printed for context only
REFERENCE_STAGE_MS = {"FE": 9.1, "FM": 4.0, "PE": 9.2, "PO": 8.7, "MU": 9.9}
REFERENCE_FRAME_MS = {"normal": 17.9, "key": 31.8}


def format_report(stats: RunStats) -> str:
    """Stage breakdown plus per-frame runtime and frame rate, as plain text tables."""
    mu_key = stats.stage_mean_ms["MU"] * stats.n_frames / max(stats.n_keyframes, 1)
    lines = ["Runtime breakdown (mean per frame)",
             f"{'Stage':<20}{'this run':>12}{'reference':>12}"]
    for s in STAGES:
        v = mu_key if s == "MU" else stats.stage_mean_ms[s]
        lines.append(f"{STAGE_NAMES[s]:<20}{v:>9.1f} ms{REFERENCE_STAGE_MS[s]:>9.1f} ms")
    lines.append("(Map Updating is averaged over keyframes only; reference column is the")
    lines.append(" FPGA-accelerated design and is not expected to be reproduced in software)")
    lines.append("")
    lines.append("Frame runtime and rate")
    lines.append(f"{'':<22}{'sequential':>14}{'pipelined':>14}{'reference':>14}")
    for label, seq, pipe, ref in (("N-frame", stats.normal_sequential_ms, stats.normal_pipelined_ms,
                                   REFERENCE_FRAME_MS["normal"]),
                                  ("K-frame", stats.keyframe_sequential_ms, stats.keyframe_pipelined_ms,
                                   REFERENCE_FRAME_MS["key"])):
        lines.append(f"{'Runtime ' + label:<22}{seq:>11.1f} ms{pipe:>11.1f} ms{ref:>11.1f} ms")
        lines.append(f"{'Frame rate ' + label:<22}{stats.fps(seq):>10.2f} fps{stats.fps(pipe):>10.2f} fps"
                     f"{1e3 / ref:>10.2f} fps")
    lines.append("")
    lines.append(f"frames {stats.n_frames}, keyframes {stats.n_keyframes} "
                 f"({100 * stats.keyframe_fraction:.1f}%), tracked {stats.n_tracked}")
    lines.append(f"modelled pipelined mean {stats.mean_pipelined_ms:.1f} ms/frame "
                 f"({stats.fps(stats.mean_pipelined_ms):.2f} fps)")
    if stats.wall_fps is not None:
        lines.append(f"measured wall-clock rate {stats.wall_fps:.2f} fps")
    return "\n".join(lines) + "\n"


TIMINGS_HEADER = ["frame", "timestamp", "FE_ms", "FM_ms", "PE_ms", "PO_ms", "MU_ms", "keyframe", "tracked"]


def write_timings(results, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TIMINGS_HEADER)
        for r in results:
            out.writerow([r.frame_index, repr(r.timestamp)]
                         + [f"{r.stage_timings.get(s, 0.0):.3f}" for s in STAGES]
                         + [int(r.is_keyframe), int(r.tracked)])
