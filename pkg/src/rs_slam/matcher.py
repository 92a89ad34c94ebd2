"""Brute-force Hamming matching of 256-bit descriptors."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

DEFAULT_ACCEPT = 64
_CHUNK = 256


class MatchResult(NamedTuple):
    feature_index: int
    map_index: int
    distance: int


def _as_words(descs) -> np.ndarray:
    d = np.ascontiguousarray(np.asarray(descs, dtype=np.uint8))
    if d.ndim == 1:
        d = d[None, :]
    if d.shape[-1] != 32:
        raise ValueError(f"descriptors must be 32 bytes, got {d.shape[-1]}")
    return d.view(np.uint64)


def hamming(a, b) -> int:
    x = _as_words(a) ^ _as_words(b)
    return int(np.bitwise_count(x).sum())


def distance_matrix(frame_desc, map_desc) -> np.ndarray:
    """All pairwise Hamming distances, shape ``(n_frame, n_map)``."""
    a, b = _as_words(frame_desc), _as_words(map_desc)
    out = np.empty((a.shape[0], b.shape[0]), np.uint16)
    for i in range(0, a.shape[0], _CHUNK):
        x = a[i:i + _CHUNK, None, :] ^ b[None, :, :]
        out[i:i + _CHUNK] = np.bitwise_count(x).sum(axis=2, dtype=np.uint16)
    return out


def match_arrays(frame_desc, map_desc, accept_threshold: int = DEFAULT_ACCEPT):
    """Vector form of :func:`match`: returns ``(feature_idx, map_idx, distance)`` arrays."""
    n_frame = len(frame_desc)
    if n_frame == 0 or len(map_desc) == 0:
        empty = np.zeros(0, np.intp)
        return empty, empty, empty
    dist = distance_matrix(frame_desc, map_desc)
    best = dist.argmin(axis=1)  # first minimum wins
    best_d = dist[np.arange(n_frame), best].astype(np.intp)
    ok = best_d <= accept_threshold
    return np.nonzero(ok)[0], best[ok].astype(np.intp), best_d[ok]


def match(frame_desc, map_desc, accept_threshold: int = DEFAULT_ACCEPT) -> list[MatchResult]:
    """For each frame descriptor, the nearest map descriptor if within ``accept_threshold`` bits."""
    fi, mi, d = match_arrays(frame_desc, map_desc, accept_threshold)
    return [MatchResult(int(a), int(b), int(c)) for a, b, c in zip(fi, mi, d)]
