"""Run configuration: a flat ``key = value`` text file.

Example::

    # camera preset (fr1, fr2 or auto) and optional overrides
    camera = fr2
    fast_threshold = 20
    keyframe_rotation_deg = 10
    seed = 7
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .geometry import PRESETS, CameraIntrinsics
from .orb import CANONICAL_SEED, ExtractorConfig
from .world_map import KeyframePolicy


class ConfigError(ValueError):
    pass


@dataclass
class SlamConfig:
    camera: str = "auto"          # fr1 | fr2 | auto (pick from the dataset directory name)
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None
    depth_scale: float = 5000.0

    n_layers: int = 4
    scale_factor: float = 1.2
    fast_threshold: int = 20
    max_features: int = 1024
    harris_k: float = 0.04
    extract_workers: int = 1
    pattern_seed: int = CANONICAL_SEED

    match_threshold: int = 64

    ransac_iterations: int = 100
    inlier_px: float = 3.0
    min_inliers: int = 12
    lm_max_iterations: int = 20

    keyframe_translation: float = 0.1
    keyframe_rotation_deg: float = 10.0
    stale_after: int = 30
    max_depth: float = 8.0
    map_soft_cap: int = 50_000

    seed: int = 0
    prefetch: int = 4

    def __post_init__(self):
        if self.camera not in (*PRESETS, "auto"):
            raise ConfigError(f"unknown camera preset {self.camera!r}; choose from {sorted(PRESETS)} or auto")
        if self.n_layers < 1 or self.scale_factor <= 1.0:
            raise ConfigError("need n_layers >= 1 and scale_factor > 1")
        if not 0 <= self.match_threshold <= 256:
            raise ConfigError("match_threshold must lie in 0..256")
        if self.min_inliers < 4 or self.ransac_iterations < 1 or self.inlier_px <= 0:
            raise ConfigError("need min_inliers >= 4, ransac_iterations >= 1 and inlier_px > 0")

    def intrinsics(self, dataset_hint: str = "") -> CameraIntrinsics:
        preset = self.camera
        if preset == "auto":
            hint = dataset_hint.lower()
            preset = "fr2" if ("freiburg2" in hint or "fr2" in hint) else "fr1"
        base = PRESETS[preset]
        return CameraIntrinsics(
            self.fx if self.fx is not None else base.fx,
            self.fy if self.fy is not None else base.fy,
            self.cx if self.cx is not None else base.cx,
            self.cy if self.cy is not None else base.cy,
            self.depth_scale,
        )

    def extractor(self) -> ExtractorConfig:
        return ExtractorConfig(self.fast_threshold, self.max_features, self.harris_k, self.extract_workers)

    def keyframe_policy(self) -> KeyframePolicy:
        return KeyframePolicy(self.keyframe_translation, math.radians(self.keyframe_rotation_deg),
                              self.stale_after, self.max_depth, self.map_soft_cap)

    def replace(self, **changes) -> "SlamConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(name: str, raw: str, kind: str):
    if raw.lower() in ("none", ""):
        if "None" in kind:
            return None
        raise ConfigError(f"{name} needs a value")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> SlamConfig:
    kinds = {f.name: str(f.type) for f in fields(SlamConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, kinds[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {raw!r}") from exc
    try:
        return SlamConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path=None) -> SlamConfig:
    if path is None:
        return SlamConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
