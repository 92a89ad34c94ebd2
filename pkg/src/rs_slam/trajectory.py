"""Timestamped pose sequences and their TUM text format.

Poses in a :class:`Trajectory` are camera-to-world, the convention of the TUM
ground-truth files. The tracker works with world-to-camera poses and inverts
them on the way out.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PoseSE3


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("trajectory timestamps must strictly increase")

    def __len__(self):
        return len(self.timestamps)

    def __iter__(self):
        return iter(zip(self.timestamps, self.poses))

    def append(self, t: float, pose: PoseSE3) -> None:
        if self.timestamps and not t > self.timestamps[-1]:
            raise ValueError(f"timestamp {t!r} does not follow {self.timestamps[-1]!r}")
        self.timestamps.append(float(t))
        self.poses.append(pose)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    def times(self) -> np.ndarray:
        return np.asarray(self.timestamps, dtype=np.float64)


def pose_from_tum(values) -> PoseSE3:
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in values)
    q = np.array([qx, qy, qz, qw])
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("degenerate quaternion")
    return PoseSE3(Rotation.from_quat(q / n).as_matrix(), [tx, ty, tz])


def pose_to_tum(pose: PoseSE3) -> list:
    q = Rotation.from_matrix(pose.rotation).as_quat()
    if q[3] < 0:
        q = -q
    return [*pose.translation.tolist(), *q.tolist()]


def format_line(t: float, pose: PoseSE3) -> str:
    return " ".join(repr(float(v)) for v in [t, *pose_to_tum(pose)])


def write_trajectory(traj: Trajectory, path) -> None:
    """Write ``timestamp tx ty tz qx qy qz qw`` lines with full float precision."""
    text = "".join(format_line(t, p) + "\n" for t, p in traj)
    try:
        Path(path).write_text("# timestamp tx ty tz qx qy qz qw\n" + text)
    except OSError as exc:
        raise OSError(f"cannot write trajectory to {path}: {exc}") from exc


def parse_trajectory(text: str, source: str = "<string>") -> Trajectory:
    traj = Trajectory()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"{source}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            t = float(parts[0])
            pose = pose_from_tum(parts[1:])
            traj.append(t, pose)
        except ValueError as exc:
            raise TrajectoryFormatError(f"{source}:{lineno}: {exc}") from exc
    return traj


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read trajectory {path}: {exc}") from exc
    return parse_trajectory(text, str(path))
