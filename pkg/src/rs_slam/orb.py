"""Oriented FAST keypoints with the 32-fold rotationally symmetric BRIEF pattern.

The extractor follows the streaming order detect -> describe -> filter: every
keypoint that survives NMS gets an orientation and a descriptor, and a single
bounded heap shared by all pyramid layers keeps the best ``max_features`` by
Harris score.

Descriptor layout: bit ``i = 8*r + j`` compares seed pair ``j`` rotated by
``r * 11.25`` degrees, and bit ``i`` lives in byte ``i // 8`` at position
``i % 8`` (LSB first). Byte ``r`` therefore holds rotation block ``r`` and
steering a descriptor by orientation ``n`` is a roll of the 32 bytes.
"""
from __future__ import annotations

import heapq
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .imaging import ImageError, ImagePyramid, as_gray, smooth

N_ROTATIONS = 32
N_SEEDS = 8
N_BITS = N_ROTATIONS * N_SEEDS
N_BYTES = N_BITS // 8
ANGLE_STEP_DEG = 360.0 / N_ROTATIONS
PATCH_RADIUS = 15
SMOOTH_MARGIN = 3
BORDER = PATCH_RADIUS + SMOOTH_MARGIN
SEED_SIGMA = 6.0
CANONICAL_SEED = 20190602
PATTERN_FORMAT_VERSION = 1

# 16-pixel Bresenham circle of radius 3, clockwise from the top (dx, dy)
FAST_CIRCLE = np.array(
    [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
     (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)],
    dtype=np.intp,
)
FAST_ARC = 9
FAST_RADIUS = 3
HARRIS_HALF = 3
HARRIS_MARGIN = HARRIS_HALF + 1  # 7x7 block plus the Sobel support


def _arc_table(arc: int = FAST_ARC) -> np.ndarray:
    masks = np.arange(1 << 16, dtype=np.uint32)
    doubled = masks | (masks << 16)
    run = doubled.copy()
    for i in range(1, arc):
        run &= doubled >> i
    return (run & 0xFFFF) != 0


_ARC_LUT = _arc_table()


@dataclass
class ExtractorConfig:
    fast_threshold: int = 20
    max_features: int = 1024
    harris_k: float = 0.04
    workers: int = 1

    def __post_init__(self):
        if self.max_features < 1:
            raise ValueError("max_features must be >= 1")
        if self.fast_threshold < 1:
            raise ValueError("fast_threshold must be >= 1")


@dataclass(eq=False)
class Feature:
    x: int
    y: int
    layer: int
    score: float
    orientation: int
    descriptor: np.ndarray
    pt: tuple  # (x, y) scaled back to layer 0

    def key(self):
        return (self.x, self.y, self.layer, self.descriptor.tobytes())


# ---------------------------------------------------------------- detection

def detect_fast(img, threshold: int = 20) -> np.ndarray:
    """FAST-9 segment test. Returns an ``(K, 2)`` array of ``(x, y)`` in raster order."""
    img = as_gray(img)
    h, w = img.shape
    if h < 7 or w < 7:
        raise ImageError("FAST needs at least a 7x7 image")
    r = FAST_RADIUS
    src = img.astype(np.int16)
    center = src[r:h - r, r:w - r]
    hi = center + threshold
    lo = center - threshold
    brighter = np.zeros(center.shape, np.uint16)
    darker = np.zeros(center.shape, np.uint16)
    for bit, (dx, dy) in enumerate(FAST_CIRCLE):
        ring = src[r + dy:h - r + dy, r + dx:w - r + dx]
        brighter |= (ring > hi).astype(np.uint16) << bit
        darker |= (ring < lo).astype(np.uint16) << bit
    corner = _ARC_LUT[brighter] | _ARC_LUT[darker]
    ys, xs = np.nonzero(corner)
    return np.stack([xs + r, ys + r], axis=1).astype(np.intp)


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel on the interior; returned planes are indexed like ``img[1:-1, 1:-1]``."""
    p = img.astype(np.int32)
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx, gy


def _harris_from_sums(sxx, syy, sxy, k):
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    return np.asarray(det, dtype=np.float64) - k * np.asarray(tr, dtype=np.float64) ** 2


def harris_score(img, x: int, y: int, k: float = 0.04) -> float:
    """det(M) - k trace(M)^2 with M summed from Sobel gradients over the 7x7 block."""
    img = as_gray(img)
    h, w = img.shape
    m = HARRIS_MARGIN
    if not (m <= x < w - m and m <= y < h - m):
        raise ImageError(f"Harris block at ({x}, {y}) leaves the {w}x{h} image")
    block = img[y - m:y + m + 1, x - m:x + m + 1]
    gx, gy = _sobel(block)
    gx = gx.astype(np.int64)
    gy = gy.astype(np.int64)
    sxx = int((gx * gx).sum())
    syy = int((gy * gy).sum())
    sxy = int((gx * gy).sum())
    return float(_harris_from_sums(np.int64(sxx), np.int64(syy), np.int64(sxy), k))


def _box_sum(integral: np.ndarray, xs, ys, half: int) -> np.ndarray:
    x0, x1 = xs - half, xs + half + 1
    y0, y1 = ys - half, ys + half + 1
    return integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]


def harris_scores(img, xs, ys, k: float = 0.04) -> np.ndarray:
    """Vectorised :func:`harris_score`; callers guarantee the blocks are in bounds."""
    img = as_gray(img)
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    if xs.size == 0:
        return np.zeros(0)
    gx, gy = _sobel(img)
    gx = gx.astype(np.int64)
    gy = gy.astype(np.int64)
    out = []
    for prod in (gx * gx, gy * gy, gx * gy):
        ii = np.zeros((prod.shape[0] + 1, prod.shape[1] + 1), np.int64)
        np.cumsum(np.cumsum(prod, axis=0), axis=1, out=ii[1:, 1:])
        # gradient plane is offset by one pixel from the image
        out.append(_box_sum(ii, xs - 1, ys - 1, HARRIS_HALF))
    return _harris_from_sums(out[0], out[1], out[2], k)


def nms(xs, ys, scores) -> np.ndarray:
    """3x3 non-maximum suppression over scored keypoints; returns a keep mask.

    A keypoint survives iff it beats every other candidate within Chebyshev
    distance 1. Equal scores go to the candidate earlier in raster order.
    """
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    scores = np.asarray(scores, dtype=np.float64)
    if xs.size == 0:
        return np.zeros(0, bool)
    x0, y0 = xs.min() - 1, ys.min() - 1
    plane = np.full((ys.max() - y0 + 2, xs.max() - x0 + 2), -np.inf)
    px, py = xs - x0, ys - y0
    plane[py, px] = scores
    keep = np.ones(xs.size, bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            other = plane[py + dy, px + dx]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (scores > other) if earlier else (scores >= other)
    return keep


# -------------------------------------------------------------- orientation

@lru_cache(maxsize=None)
def disc_offsets(radius: int = PATCH_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    r = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(r, r)
    inside = dx * dx + dy * dy <= radius * radius
    return dx[inside].astype(np.intp), dy[inside].astype(np.intp)


def angle_to_label(theta):
    """Nearest 11.25-degree bin of an angle in radians, as a label 0..31."""
    step = math.radians(ANGLE_STEP_DEG)
    return np.mod(np.floor(np.asarray(theta) / step + 0.5), N_ROTATIONS).astype(np.intp)


def _disc_half_widths(radius: int = PATCH_RADIUS) -> np.ndarray:
    dy = np.arange(-radius, radius + 1)
    return np.floor(np.sqrt(radius * radius - dy * dy)).astype(np.intp)


def orientations(smoothed, xs, ys) -> np.ndarray:
    """Intensity-centroid orientation labels for many keypoints at once.

    Moments over the radius-15 disc are taken row by row from prefix sums of
    ``I`` and ``I * column``; all sums are exact integers.
    """
    smoothed = as_gray(smoothed)
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    if xs.size == 0:
        return np.zeros(0, np.intp)
    h, w = smoothed.shape
    r = PATCH_RADIUS
    if xs.min() < r or ys.min() < r or xs.max() >= w - r or ys.max() >= h - r:
        raise ImageError("orientation patch leaves the image")
    img = smoothed.astype(np.int64)
    cols = np.arange(w, dtype=np.int64)
    pre = np.zeros((h, w + 1), np.int64)
    pre_x = np.zeros((h, w + 1), np.int64)
    np.cumsum(img, axis=1, out=pre[:, 1:])
    np.cumsum(img * cols, axis=1, out=pre_x[:, 1:])
    m00 = np.zeros(xs.size, np.int64)
    m10 = np.zeros(xs.size, np.int64)
    m01 = np.zeros(xs.size, np.int64)
    for dy, hw in zip(range(-r, r + 1), _disc_half_widths(r)):
        row = ys + dy
        lo, hi = xs - hw, xs + hw + 1
        s0 = pre[row, hi] - pre[row, lo]
        sx = pre_x[row, hi] - pre_x[row, lo]
        m00 += s0
        m10 += sx - xs * s0
        m01 += dy * s0
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(m00 > 0, m10 / np.maximum(m00, 1), 0.0)
        v = np.where(m00 > 0, m01 / np.maximum(m00, 1), 0.0)
    return angle_to_label(np.arctan2(v, u))


def compute_orientation(smoothed, x: int, y: int) -> int:
    return int(orientations(smoothed, [x], [y])[0])


# ------------------------------------------------------------------ pattern

def rotate_points(points, angle_rad: float) -> np.ndarray:
    """x' = x cos - y sin, y' = y cos + x sin for an ``(N, 2)`` array."""
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.stack([p[:, 0] * c - p[:, 1] * s, p[:, 1] * c + p[:, 0] * s], axis=1)


def rotation_angle(index: int) -> float:
    return math.radians((index % N_ROTATIONS) * ANGLE_STEP_DEG)


def expand_seeds(seeds) -> np.ndarray:
    seeds = np.asarray(seeds, dtype=np.float64)
    return np.concatenate([rotate_points(seeds, rotation_angle(r)) for r in range(N_ROTATIONS)])


def round_offsets(points) -> np.ndarray:
    return np.floor(np.asarray(points) + 0.5).astype(np.intp)


@dataclass(frozen=True, eq=False)
class RsBriefPattern:
    seed_s: np.ndarray
    seed_d: np.ndarray
    expanded_s: np.ndarray = field(init=False)
    expanded_d: np.ndarray = field(init=False)

    def __post_init__(self):
        s = np.asarray(self.seed_s, dtype=np.float64).reshape(N_SEEDS, 2)
        d = np.asarray(self.seed_d, dtype=np.float64).reshape(N_SEEDS, 2)
        if max(np.hypot(*s.T).max(), np.hypot(*d.T).max()) > PATCH_RADIUS:
            raise ValueError(f"seed offsets must lie within radius {PATCH_RADIUS}")
        object.__setattr__(self, "seed_s", s)
        object.__setattr__(self, "seed_d", d)
        object.__setattr__(self, "expanded_s", expand_seeds(s))
        object.__setattr__(self, "expanded_d", expand_seeds(d))

    @property
    def offsets_s(self) -> np.ndarray:
        return round_offsets(self.expanded_s)

    @property
    def offsets_d(self) -> np.ndarray:
        return round_offsets(self.expanded_d)

    def __eq__(self, other):
        return (isinstance(other, RsBriefPattern)
                and np.array_equal(self.seed_s, other.seed_s)
                and np.array_equal(self.seed_d, other.seed_d))

    def save(self, path):
        lines = [
            f"# rs-brief pattern v{PATTERN_FORMAT_VERSION}",
            "# set rotation_index x y ; line order within a set is bit order (8*rotation + seed)",
        ]
        for name, pts in (("s", self.expanded_s), ("d", self.expanded_d)):
            for i, (x, y) in enumerate(pts):
                lines.append(f"{name} {i // N_SEEDS} {float(x)!r} {float(y)!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RsBriefPattern":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def from_text(cls, text: str) -> "RsBriefPattern":
        pts = {"s": [], "d": []}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4 or parts[0] not in pts:
                raise ValueError(f"pattern line {lineno}: expected 'set rotation x y', got {line!r}")
            name, rot = parts[0], int(parts[1])
            if rot != len(pts[name]) // N_SEEDS:
                raise ValueError(f"pattern line {lineno}: rotation index {rot} out of order")
            pts[name].append((float(parts[2]), float(parts[3])))
        if len(pts["s"]) != N_BITS or len(pts["d"]) != N_BITS:
            raise ValueError(f"pattern needs {N_BITS} s and {N_BITS} d locations")
        pattern = cls(np.array(pts["s"][:N_SEEDS]), np.array(pts["d"][:N_SEEDS]))
        # the stored rotations must be what the seeds expand to
        if not (np.array_equal(pattern.expanded_s, np.array(pts["s"]))
                and np.array_equal(pattern.expanded_d, np.array(pts["d"]))):
            raise ValueError("pattern file rotations do not match its seeds")
        return pattern


def generate_pattern(rng_seed: int, sigma: float = SEED_SIGMA) -> RsBriefPattern:
    rng = np.random.default_rng(rng_seed)

    def draw():
        out = []
        while len(out) < N_SEEDS:
            p = rng.normal(0.0, sigma, size=2)
            if math.hypot(p[0], p[1]) <= PATCH_RADIUS:
                out.append(p)
        return np.array(out)

    return RsBriefPattern(draw(), draw())


@lru_cache(maxsize=1)
def canonical_pattern() -> RsBriefPattern:
    """The pattern shipped with the package; descriptors are only comparable under it."""
    text = resources.files("rs_slam.data").joinpath("rs_brief_pattern.txt").read_text()
    return RsBriefPattern.from_text(text)


# -------------------------------------------------------------- descriptors

def descriptors(smoothed, xs, ys, pattern: RsBriefPattern) -> np.ndarray:
    """Unsteered descriptors, ``(K, 32)`` uint8."""
    smoothed = as_gray(smoothed)
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    if xs.size == 0:
        return np.zeros((0, N_BYTES), np.uint8)
    os_, od = pattern.offsets_s, pattern.offsets_d
    reach = int(max(np.abs(os_).max(), np.abs(od).max()))
    h, w = smoothed.shape
    if xs.min() < reach or ys.min() < reach or xs.max() >= w - reach or ys.max() >= h - reach:
        raise ImageError("descriptor patch leaves the image")
    flat = smoothed.ravel()
    base = ys * w + xs
    a = flat[base[:, None] + (os_[:, 1] * w + os_[:, 0])[None, :]]
    b = flat[base[:, None] + (od[:, 1] * w + od[:, 0])[None, :]]
    return np.packbits(a > b, axis=1, bitorder="little")


def compute_descriptor(smoothed, x: int, y: int, pattern: RsBriefPattern | None = None) -> np.ndarray:
    return descriptors(smoothed, [x], [y], pattern or canonical_pattern())[0]


def rotate_descriptor(desc, n: int) -> np.ndarray:
    """Move the first ``8 n`` bits to the end (cyclic left shift by ``n`` bytes)."""
    desc = np.asarray(desc, dtype=np.uint8)
    if not 0 <= n < N_ROTATIONS:
        raise ValueError(f"orientation label must be in [0, {N_ROTATIONS - 1}], got {n}")
    return np.roll(desc, -n, axis=-1)


def rotate_descriptors(descs: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    cols = (np.arange(N_BYTES)[None, :] + labels[:, None]) % N_BYTES
    return np.take_along_axis(np.asarray(descs, np.uint8), cols, axis=1)


def descriptor_to_hex(desc) -> str:
    return bytes(np.asarray(desc, np.uint8)).hex()


def descriptor_from_hex(text: str) -> np.ndarray:
    raw = bytes.fromhex(text.strip())
    if len(raw) != N_BYTES:
        raise ValueError(f"descriptor must be {N_BYTES} bytes, got {len(raw)}")
    return np.frombuffer(raw, np.uint8).copy()


# ------------------------------------------------------------------ filtering

class TopNFilter:
    """Bounded min-heap that keeps the ``capacity`` highest scores seen so far.

    On equal scores the earlier arrival is kept.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._heap = []
        self._seq = itertools.count()

    def __len__(self):
        return len(self._heap)

    def push(self, score: float, item) -> None:
        entry = (score, -next(self._seq), item)
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, entry)
        elif entry[:2] > self._heap[0][:2]:
            heapq.heapreplace(self._heap, entry)

    def items(self) -> list:
        """Kept items, best score first, ties in arrival order."""
        return [e[2] for e in sorted(self._heap, key=lambda e: (-e[0], -e[1]))]


def filter_top_n(features, capacity: int, key=lambda f: f.score) -> list:
    top = TopNFilter(capacity)
    for f in features:
        top.push(key(f), f)
    return top.items()


# -------------------------------------------------------------- extraction

def _layer_keypoints(img: np.ndarray, config: ExtractorConfig):
    """detect -> Harris -> NMS -> border gate for one layer, all in raster order."""
    h, w = img.shape
    empty = (np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0))
    if h <= 2 * BORDER or w <= 2 * BORDER:
        return empty
    pts = detect_fast(img, config.fast_threshold)
    m = HARRIS_MARGIN
    ok = (pts[:, 0] >= m) & (pts[:, 0] < w - m) & (pts[:, 1] >= m) & (pts[:, 1] < h - m)
    xs, ys = pts[ok, 0], pts[ok, 1]
    scores = harris_scores(img, xs, ys, config.harris_k)
    keep = nms(xs, ys, scores)
    xs, ys, scores = xs[keep], ys[keep], scores[keep]
    inside = (xs >= BORDER) & (xs < w - BORDER) & (ys >= BORDER) & (ys < h - BORDER)
    return xs[inside], ys[inside], scores[inside]


def _describe_layer(img: np.ndarray, config: ExtractorConfig, pattern: RsBriefPattern):
    xs, ys, scores = _layer_keypoints(img, config)
    if xs.size == 0:
        return xs, ys, scores, np.zeros(0, np.intp), np.zeros((0, N_BYTES), np.uint8)
    sm = smooth(img)
    labels = orientations(sm, xs, ys)
    descs = rotate_descriptors(descriptors(sm, xs, ys, pattern), labels)
    return xs, ys, scores, labels, descs


def extract(pyramid: ImagePyramid, config: ExtractorConfig | None = None,
            pattern: RsBriefPattern | None = None) -> list[Feature]:
    """Streaming extraction over all layers with one shared top-N filter."""
    config = config or ExtractorConfig()
    pattern = pattern or canonical_pattern()
    work = lambda img: _describe_layer(img, config, pattern)
    if config.workers > 1 and len(pyramid) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            per_layer = list(pool.map(work, pyramid.layers))
    else:
        per_layer = [work(img) for img in pyramid.layers]

    top = TopNFilter(config.max_features)
    for layer, (xs, ys, scores, labels, descs) in enumerate(per_layer):
        for i in range(xs.size):
            top.push(float(scores[i]), (layer, i))

    out = []
    for layer, i in top.items():
        xs, ys, scores, labels, descs = per_layer[layer]
        s = pyramid.layer_scale(layer)
        x, y = int(xs[i]), int(ys[i])
        out.append(Feature(x, y, layer, float(scores[i]), int(labels[i]), descs[i].copy(), (x * s, y * s)))
    return out


def stack_descriptors(features) -> np.ndarray:
    if not features:
        return np.zeros((0, N_BYTES), np.uint8)
    return np.stack([f.descriptor for f in features])
