"""Global landmark map, keyframe test and staleness pruning."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, back_project
from .orb import N_BYTES, descriptor_to_hex

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KeyframePolicy:
    translation_threshold: float = 0.1   # m
    rotation_threshold: float = math.radians(10.0)
    stale_after: int = 30                # frames
    max_depth: float = 8.0               # m
    soft_cap: int = 50_000               # map points; exceeding it only warns

    def __post_init__(self):
        if min(self.translation_threshold, self.rotation_threshold, self.stale_after, self.max_depth) <= 0:
            raise ValueError("keyframe thresholds must be positive")


class MapPoint(NamedTuple):
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    last_matched_frame: int
    created_frame: int


class MapSnapshot(NamedTuple):
    """Read-only view handed to the matcher."""
    ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray
    version: int


def is_keyframe(current: PoseSE3, last_keyframe: PoseSE3 | None, policy: KeyframePolicy) -> bool:
    if last_keyframe is None:
        return True
    rel = current @ last_keyframe.inverse()
    # |rel.t| equals the distance between the two camera centres
    shift = float(np.linalg.norm(rel.translation))
    return bool(shift > policy.translation_threshold or rel.rotation_angle() > policy.rotation_threshold)


def _readonly(a):
    a = np.array(a)
    a.flags.writeable = False
    return a


class GlobalMap:
    """Column store of landmarks. Only the back end writes; readers use :meth:`snapshot`."""

    def __init__(self):
        self.ids = np.zeros(0, np.int64)
        self.positions = np.zeros((0, 3))
        self.descriptors = np.zeros((0, N_BYTES), np.uint8)
        self.last_matched = np.zeros(0, np.int64)
        self.created = np.zeros(0, np.int64)
        self._next_id = 0
        self.version = 0

    def __len__(self):
        return self.ids.size

    def __getitem__(self, i) -> MapPoint:
        return MapPoint(int(self.ids[i]), self.positions[i].copy(), self.descriptors[i].copy(),
                        int(self.last_matched[i]), int(self.created[i]))

    def snapshot(self) -> MapSnapshot:
        return MapSnapshot(_readonly(self.ids), _readonly(self.positions), _readonly(self.descriptors), self.version)

    def add_points(self, positions, descriptors, frame_index: int) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        descriptors = np.asarray(descriptors, dtype=np.uint8).reshape(-1, N_BYTES)
        if not np.all(np.isfinite(positions)):
            raise ValueError("map points must be finite")
        n = len(positions)
        new_ids = np.arange(self._next_id, self._next_id + n, dtype=np.int64)
        self._next_id += n
        self.ids = np.concatenate([self.ids, new_ids])
        self.positions = np.concatenate([self.positions, positions])
        self.descriptors = np.concatenate([self.descriptors, descriptors])
        self.last_matched = np.concatenate([self.last_matched, np.full(n, frame_index, np.int64)])
        self.created = np.concatenate([self.created, np.full(n, frame_index, np.int64)])
        self.version += 1
        return new_ids

    def insert_keyframe(self, features, depth, pose: PoseSE3, K: CameraIntrinsics, frame_index: int,
                        policy: KeyframePolicy = KeyframePolicy()) -> int:
        """Back-project features with valid depth into world points; returns how many were added."""
        if not features:
            return 0
        depth = np.asarray(depth)
        h, w = depth.shape
        pts = np.array([f.pt for f in features], dtype=np.float64)
        col = np.clip(np.floor(pts[:, 0] + 0.5).astype(np.intp), 0, w - 1)
        row = np.clip(np.floor(pts[:, 1] + 0.5).astype(np.intp), 0, h - 1)
        d = depth[row, col].astype(np.float64)
        ok = (d > 0) & (d < policy.max_depth)
        if not ok.any():
            return 0
        cam = back_project(K, pts[ok], d[ok])
        world = pose.inverse().apply(cam)
        descs = np.stack([f.descriptor for f, good in zip(features, ok) if good])
        self.add_points(world, descs, frame_index)
        if len(self) > policy.soft_cap:
            log.warning("global map holds %d points (soft cap %d)", len(self), policy.soft_cap)
        return int(ok.sum())

    def touch_matches(self, map_indices, frame_index: int) -> None:
        idx = np.asarray(map_indices, dtype=np.intp)
        if idx.size:
            self.last_matched[idx] = np.maximum(self.last_matched[idx], frame_index)

    def touch_ids(self, ids, frame_index: int) -> None:
        """Like :meth:`touch_matches` but addressed by point id, robust to earlier pruning."""
        ids = np.asarray(ids, dtype=np.int64)
        if self.ids.size == 0 or ids.size == 0:
            return
        # ids stay sorted: they are appended in increasing order and pruning keeps order
        pos = np.minimum(np.searchsorted(self.ids, ids), self.ids.size - 1)
        self.touch_matches(pos[self.ids[pos] == ids], frame_index)

    def prune(self, frame_index: int, policy: KeyframePolicy) -> int:
        """Drop points unmatched for more than ``stale_after`` frames; returns how many went."""
        keep = (frame_index - self.last_matched) <= policy.stale_after
        removed = int((~keep).sum())
        if removed:
            self.ids = self.ids[keep]
            self.positions = self.positions[keep]
            self.descriptors = self.descriptors[keep]
            self.last_matched = self.last_matched[keep]
            self.created = self.created[keep]
            self.version += 1
        return removed

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["id", "x", "y", "z", "descriptor_hex", "last_matched"])
            for i in range(len(self)):
                x, y, z = self.positions[i]
                out.writerow([int(self.ids[i]), repr(float(x)), repr(float(y)), repr(float(z)),
                              descriptor_to_hex(self.descriptors[i]), int(self.last_matched[i])])
