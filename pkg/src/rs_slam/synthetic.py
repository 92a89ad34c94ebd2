"""Ray-cast RGB-D sequences of a textured box room, written in TUM layout.

Used by the tests and as a stand-in when the real benchmark data is not
available. Every wall carries a random blocky texture so that FAST finds
plenty of corners; the depth channel is exact z-depth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import FR1, CameraIntrinsics, PoseSE3, so3_exp
from .trajectory import Trajectory, write_trajectory
from .tum import DEPTH_SCALE, RgbdFrame, depth_to_metres, rgb_to_gray


@dataclass(frozen=True)
class Room:
    lo: tuple = (-2.5, -1.5, -1.5)
    hi: tuple = (2.5, 1.5, 3.5)
    cell: float = 0.08     # texture block size in metres
    seed: int = 0

    def textures(self):
        rng = np.random.default_rng(self.seed)
        lo, hi = np.array(self.lo), np.array(self.hi)
        out = []
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            n_a = int(math.ceil((hi[a] - lo[a]) / self.cell)) + 1
            n_b = int(math.ceil((hi[b] - lo[b]) / self.cell)) + 1
            for _side in range(2):
                out.append(rng.integers(20, 236, (n_a, n_b, 3)).astype(np.uint8))
        return out


def render(room: Room, K: CameraIntrinsics, cam_to_world: PoseSE3, width: int, height: int,
           textures=None):
    """Return (rgb uint8 HxWx3, z-depth float64 HxW) seen from ``cam_to_world``."""
    textures = textures if textures is not None else room.textures()
    lo, hi = np.array(room.lo), np.array(room.hi)
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    rays_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    d = rays_cam @ cam_to_world.rotation.T
    o = cam_to_world.translation
    if np.any(o <= lo) or np.any(o >= hi):
        raise ValueError("camera must be inside the room")
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(d > 0, hi, lo)
        t_axis = np.where(d != 0, (bound - o) / d, np.inf)
    axis = np.argmin(t_axis, axis=-1)
    t = np.take_along_axis(t_axis, axis[..., None], -1)[..., 0]
    p = o + t[..., None] * d
    side = np.take_along_axis(d, axis[..., None], -1)[..., 0] > 0
    rgb = np.zeros((height, width, 3), np.uint8)
    for ax in range(3):
        a, b = [i for i in range(3) if i != ax]
        for s in range(2):
            m = (axis == ax) & (side == bool(s))
            if not m.any():
                continue
            tex = textures[2 * ax + s]
            ia = np.clip(((p[m, a] - lo[a]) / room.cell).astype(np.intp), 0, tex.shape[0] - 1)
            ib = np.clip(((p[m, b] - lo[b]) / room.cell).astype(np.intp), 0, tex.shape[1] - 1)
            rgb[m] = tex[ia, ib]
    z = t * rays_cam[..., 2]  # ray z component is 1 in the camera frame
    return rgb, z


def default_motion(n: int, rate: float = 30.0, amplitude: float = 0.25, seed: int = 0):
    """Smooth hand-held-like camera-to-world poses around the room centre."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * math.pi, 6)
    freq = rng.uniform(0.15, 0.35, 6)
    poses = []
    for k in range(n):
        s = k / rate
        w = 0.12 * np.sin(2 * math.pi * freq[:3] * s + phase[:3])
        c = amplitude * np.sin(2 * math.pi * freq[3:] * s + phase[3:])
        poses.append(PoseSE3(so3_exp(w), c))
    return poses


def _raw_depth(z):
    return np.clip(np.floor(z * DEPTH_SCALE + 0.5), 0, 65535).astype(np.uint16)


def make_frames(n_frames: int = 20, width: int = 640, height: int = 480, K: CameraIntrinsics | None = None,
                room: Room | None = None, seed: int = 0, rate: float = 30.0, t0: float = 0.0, poses=None):
    """In-memory frames, identical to what :func:`write_sequence` produces after decoding."""
    K = K or FR1
    room = room or Room(seed=seed)
    poses = poses if poses is not None else default_motion(n_frames, rate, seed=seed)
    tex = room.textures()
    frames, gt = [], Trajectory()
    for k, pose in enumerate(poses):
        t = round(t0 + k / rate, 6)
        rgb, z = render(room, K, pose, width, height, tex)
        frames.append(RgbdFrame(t, rgb_to_gray(rgb), depth_to_metres(_raw_depth(z))))
        gt.append(t, pose)
    return frames, gt


def write_sequence(root, n_frames: int = 30, width: int = 640, height: int = 480,
                   K: CameraIntrinsics | None = None, room: Room | None = None, seed: int = 0,
                   rate: float = 30.0, t0: float = 1305031102.175304, depth_offset: float = 0.004,
                   poses=None) -> Trajectory:
    """Write rgb/, depth/, rgb.txt, depth.txt and groundtruth.txt; return the ground truth."""
    K = K or FR1
    room = room or Room(seed=seed)
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    poses = poses if poses is not None else default_motion(n_frames, rate, seed=seed)
    tex = room.textures()
    gt = Trajectory()
    rgb_lines, depth_lines = ["# color images"], ["# depth maps"]
    for k, pose in enumerate(poses):
        t = round(t0 + k / rate, 6)
        rgb, z = render(room, K, pose, width, height, tex)
        raw = _raw_depth(z)
        name = f"{t:.6f}.png"
        td = round(t + depth_offset, 6)
        dname = f"{td:.6f}.png"
        Image.fromarray(rgb, "RGB").save(root / "rgb" / name)
        Image.fromarray(raw).save(root / "depth" / dname)
        rgb_lines.append(f"{t:.6f} rgb/{name}")
        depth_lines.append(f"{td:.6f} depth/{dname}")
        gt.append(t, pose)
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    write_trajectory(gt, root / "groundtruth.txt")
    return gt
