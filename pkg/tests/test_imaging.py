import math

import numpy as np
import pytest

from rs_slam import imaging
from oracles import downsample_naive, smooth_naive


def test_downsample_2x2_picks_origin():
    img = np.array([[7, 1], [2, 3]], np.uint8)
    out = imaging.downsample(img, 2)
    assert out.shape == (1, 1) and out[0, 0] == 7


def test_downsample_vga_dimensions():
    out = imaging.downsample(np.zeros((480, 640), np.uint8), 1.2)
    assert out.shape == (400, 533)


def test_downsample_matches_naive(rng):
    img = rng.integers(0, 256, (16, 16)).astype(np.uint8)
    np.testing.assert_array_equal(imaging.downsample(img, 1.5), downsample_naive(img, 1.5))


@pytest.mark.parametrize("scale", [1.01, 1.2, 1.5, 2.0, 3.7])
def test_downsample_naive_various(rng, scale):
    img = rng.integers(0, 256, (23, 31)).astype(np.uint8)
    np.testing.assert_array_equal(imaging.downsample(img, scale), downsample_naive(img, scale))


def test_downsample_degenerate():
    with pytest.raises(imaging.ImageError):
        imaging.downsample(np.zeros((1, 5), np.uint8), 2)
    with pytest.raises(imaging.ImageError):
        imaging.downsample(np.zeros((5, 5), np.uint8), 1.0)


@pytest.mark.parametrize("a,b", [(1.2, 1.2), (1.5, 2.0), (1.3, 1.7)])
def test_double_downsample_dims(a, b):
    img = np.zeros((97, 131), np.uint8)
    out = imaging.downsample(imaging.downsample(img, a), b)
    assert out.shape == (math.floor(math.floor(97 / a) / b), math.floor(math.floor(131 / a) / b))


def test_pyramid_vga_sizes():
    pyr = imaging.build_pyramid(np.zeros((480, 640), np.uint8), 4, 1.2)
    assert [(l.shape[1], l.shape[0]) for l in pyr.layers] == [(640, 480), (533, 400), (444, 333), (370, 277)]


def test_pyramid_halving():
    pyr = imaging.build_pyramid(np.zeros((480, 480), np.uint8), 4, 2)
    assert [l.shape for l in pyr.layers] == [(480, 480), (240, 240), (120, 120), (60, 60)]


def test_pyramid_single_layer_and_identity(rng):
    img = rng.integers(0, 256, (30, 40)).astype(np.uint8)
    pyr = imaging.build_pyramid(img, 1)
    assert len(pyr) == 1 and np.array_equal(pyr[0], img)
    pyr = imaging.build_pyramid(img, 3, 1.2)
    assert np.array_equal(pyr[0], img)
    np.testing.assert_array_equal(pyr[2], imaging.downsample(pyr[1], 1.2))


def test_pyramid_degenerate_layer():
    with pytest.raises(imaging.ImageError):
        imaging.build_pyramid(np.zeros((4, 4), np.uint8), 4, 2)


def test_kernel_normalised():
    assert abs(imaging.gaussian_kernel_2d().sum() - 1) < 1e-12
    assert imaging.gaussian_kernel_2d().shape == (7, 7)


@pytest.mark.parametrize("value", [0, 1, 77, 128, 255])
def test_smooth_constant(value):
    img = np.full((20, 25), value, np.uint8)
    np.testing.assert_array_equal(imaging.smooth(img), img)


def test_smooth_impulse():
    img = np.zeros((15, 15), np.uint8)
    img[7, 7] = 255
    out = imaging.smooth(img)
    expect = np.zeros((15, 15), np.uint8)
    expect[4:11, 4:11] = imaging.round_to_u8(255 * imaging.gaussian_kernel_2d())
    np.testing.assert_array_equal(out, expect)
    np.testing.assert_array_equal(out, smooth_naive(img))


def test_smooth_matches_dense_oracle(rng):
    img = rng.integers(0, 256, (32, 32)).astype(np.uint8)
    diff = np.abs(imaging.smooth(img).astype(int) - smooth_naive(img).astype(int))
    assert diff.max() == 0
