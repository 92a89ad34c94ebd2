"""TUM RGB-D directory ingestion: index files, association, decoding."""
from __future__ import annotations

import collections
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .trajectory import Trajectory, read_trajectory

ASSOCIATION_WINDOW = 0.02  # s
DEPTH_SCALE = 5000.0       # raw units per metre


class DatasetError(ValueError):
    pass


@dataclass
class RgbdFrame:
    timestamp: float
    gray: np.ndarray   # uint8 HxW
    depth: np.ndarray  # float32 metres, 0 where missing
    rgb_file: str = ""
    depth_file: str = ""


@dataclass(frozen=True)
class FrameIndex:
    """An associated rgb/depth pair that has not been decoded yet."""
    timestamp: float
    rgb_path: Path
    depth_path: Path
    depth_timestamp: float


def read_index(path) -> list[tuple[float, str]]:
    """Parse an rgb.txt / depth.txt style list of ``timestamp filename`` lines."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing index file {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            out.append((float(parts[0]), parts[1]))
        except (ValueError, IndexError):
            raise DatasetError(f"{path}:{lineno}: expected 'timestamp filename'") from None
    return out


def associate(a, b, window: float = ASSOCIATION_WINDOW) -> list[tuple[int, int]]:
    """Greedy one-to-one pairing of two timestamp lists, closest pairs first.

    Returns index pairs sorted by the first list. The tie-break depends only on
    the two timestamps of a candidate, so swapping the arguments swaps the pairs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return []
    order_b = np.argsort(b, kind="stable")
    sb = b[order_b]
    cands = []
    for i, t in enumerate(a):
        lo = np.searchsorted(sb, t - window, side="left")
        hi = np.searchsorted(sb, t + window, side="right")
        for k in range(lo, hi):
            j = int(order_b[k])
            dt = abs(t - b[j])
            if dt <= window:
                cands.append((dt, min(t, b[j]), max(t, b[j]), i, j))
    cands.sort(key=lambda c: c[:3])
    used_a, used_b, pairs = set(), set(), []
    for _, _, _, i, j in cands:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def index_sequence(root, window: float = ASSOCIATION_WINDOW) -> list[FrameIndex]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    rgb = read_index(root / "rgb.txt")
    depth = read_index(root / "depth.txt")
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], window)
    frames = [FrameIndex(rgb[i][0], root / rgb[i][1], root / depth[j][1], depth[j][0]) for i, j in pairs]
    frames.sort(key=lambda f: f.timestamp)
    # a duplicated rgb timestamp would break the trajectory ordering downstream
    keep = [f for k, f in enumerate(frames) if k == 0 or f.timestamp > frames[k - 1].timestamp]
    return keep


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.uint32)
    return ((77 * rgb[..., 0] + 150 * rgb[..., 1] + 29 * rgb[..., 2]) >> 8).astype(np.uint8)


def load_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                raise DatasetError(f"{path}: expected an 8-bit colour image, got mode {im.mode}")
            arr = np.asarray(im.convert("RGB"))
    except DatasetError:
        raise
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return rgb_to_gray(arr)


def depth_to_metres(raw: np.ndarray, depth_scale: float = DEPTH_SCALE) -> np.ndarray:
    """Raw 16-bit depth to metres; 0 stays 0 and marks a missing reading."""
    return (np.asarray(raw, dtype=np.float64) / depth_scale).astype(np.float32)


def load_depth(path, depth_scale: float = DEPTH_SCALE) -> np.ndarray:
    try:
        with Image.open(path) as im:
            raw = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode depth image {path}: {exc}") from exc
    if raw.ndim != 2 or raw.dtype.kind not in "ui":
        raise DatasetError(f"{path}: expected a single-channel 16-bit depth image")
    return depth_to_metres(raw, depth_scale)


def decode(entry: FrameIndex, depth_scale: float = DEPTH_SCALE) -> RgbdFrame:
    gray = load_gray(entry.rgb_path)
    depth = load_depth(entry.depth_path, depth_scale)
    if gray.shape != depth.shape:
        raise DatasetError(f"{entry.rgb_path} is {gray.shape} but {entry.depth_path} is {depth.shape}")
    return RgbdFrame(entry.timestamp, gray, depth, str(entry.rgb_path), str(entry.depth_path))


def iter_sequence(root, limit: int | None = None, prefetch: int = 4,
                  depth_scale: float = DEPTH_SCALE) -> Iterator[RgbdFrame]:
    """Decode frames lazily, keeping at most ``prefetch`` decodes in flight."""
    entries = index_sequence(root)[:limit]
    if prefetch <= 0:
        for e in entries:
            yield decode(e, depth_scale)
        return
    with ThreadPoolExecutor(max_workers=min(prefetch, 4)) as pool:
        pending = collections.deque()
        it = iter(entries)
        for e in it:
            pending.append(pool.submit(decode, e, depth_scale))
            if len(pending) >= prefetch:
                break
        while pending:
            frame = pending.popleft().result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(decode, nxt, depth_scale))
            yield frame


def load_sequence(root, limit: int | None = None, depth_scale: float = DEPTH_SCALE) -> list[RgbdFrame]:
    return list(iter_sequence(root, limit, depth_scale=depth_scale))


def load_ground_truth(path) -> Trajectory:
    """Camera-to-world poses from a ``timestamp tx ty tz qx qy qz qw`` file."""
    return read_trajectory(path)
