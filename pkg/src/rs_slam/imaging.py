"""Gray image helpers: nearest-neighbour downsampling, pyramids and the 7x7 smoother.

Images are plain 2-D ``uint8`` numpy arrays indexed ``img[y, x]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SMOOTH_SIZE = 7
SMOOTH_SIGMA = 2.0
DEFAULT_SCALE = 1.2
DEFAULT_LAYERS = 4


class ImageError(ValueError):
    pass


def as_gray(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise ImageError("intensities must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


@dataclass
class ImagePyramid:
    layers: list
    scale_factor: float = DEFAULT_SCALE

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, k):
        return self.layers[k]

    def layer_scale(self, k: int) -> float:
        """Factor mapping layer-k pixel coordinates back to layer 0."""
        return self.scale_factor ** k


def downsampled_shape(height: int, width: int, scale: float) -> tuple[int, int]:
    return math.floor(height / scale), math.floor(width / scale)


def downsample(src, scale: float) -> np.ndarray:
    """Nearest-neighbour resample: ``out[y, x] = src[floor(y*scale), floor(x*scale)]``."""
    src = as_gray(src)
    if not scale > 1:
        raise ImageError(f"scale must be > 1, got {scale}")
    h, w = downsampled_shape(*src.shape, scale)
    if h < 1 or w < 1:
        raise ImageError(f"downsampling {src.shape[1]}x{src.shape[0]} by {scale} is degenerate")
    ys = np.floor(np.arange(h) * scale).astype(np.intp)
    xs = np.floor(np.arange(w) * scale).astype(np.intp)
    return src[np.ix_(ys, xs)]


def build_pyramid(src, n_layers: int = DEFAULT_LAYERS, scale: float = DEFAULT_SCALE) -> ImagePyramid:
    if n_layers < 1:
        raise ImageError("n_layers must be >= 1")
    layers = [as_gray(src)]
    for _ in range(n_layers - 1):
        layers.append(downsample(layers[-1], scale))
    return ImagePyramid(layers, scale)


def gaussian_kernel_1d(size: int = SMOOTH_SIZE, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_kernel_2d(size: int = SMOOTH_SIZE, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    k = gaussian_kernel_1d(size, sigma)
    return np.outer(k, k)


def round_to_u8(values: np.ndarray) -> np.ndarray:
    """Round half up and clamp into 8 bits."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def smooth(src) -> np.ndarray:
    """7x7 Gaussian blur (sigma 2) with edge replication, rounded back to uint8."""
    src = as_gray(src)
    k = gaussian_kernel_1d()
    tmp = ndimage.correlate1d(src.astype(np.float64), k, axis=0, mode="nearest")
    out = ndimage.correlate1d(tmp, k, axis=1, mode="nearest")
    return round_to_u8(out)
