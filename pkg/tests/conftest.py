import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def corner_image(size=40, quadrant=0, lo=30, hi=200, offset=(0, 0)):
    """A bright 90-degree wedge whose apex sits near the image centre."""
    img = np.full((size, size), lo, np.uint8)
    c = size // 2
    cx, cy = c + offset[0], c + offset[1]
    ys, xs = np.mgrid[:size, :size]
    sx = xs >= cx if quadrant in (0, 3) else xs <= cx
    sy = ys >= cy if quadrant in (0, 1) else ys <= cy
    img[sx & sy] = hi
    return img


def checkerboard(size=48, cell=8, lo=20, hi=220):
    ys, xs = np.mgrid[:size, :size]
    return np.where(((xs // cell) + (ys // cell)) % 2 == 0, lo, hi).astype(np.uint8)


def structured_images():
    """Ten deterministic test images with corners, edges and blobs."""
    rng = np.random.default_rng(7)
    imgs = [corner_image(40, q) for q in range(4)]
    imgs.append(checkerboard())
    imgs.append(checkerboard(45, 5, 0, 255))
    step = np.full((32, 32), 40, np.uint8)
    step[:, 16:] = 180
    imgs.append(step)
    blobs = np.zeros((48, 48), np.uint8)
    for _ in range(12):
        x, y = rng.integers(4, 44, 2)
        blobs[y - 2:y + 3, x - 2:x + 3] = rng.integers(60, 255)
    imgs.append(blobs)
    tiles = np.kron(rng.integers(0, 256, (6, 6)), np.ones((7, 7))).astype(np.uint8)
    imgs.append(tiles)
    ys, xs = np.mgrid[:36, :36]
    imgs.append((((xs - 18) ** 2 + (ys - 18) ** 2) < 60).astype(np.uint8) * 200 + 20)
    return imgs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def textured_image(rng, h=120, w=160, cell=6):
    """Piecewise-constant random tiles: lots of FAST corners."""
    tiles = rng.integers(0, 256, (h // cell + 1, w // cell + 1))
    return np.kron(tiles, np.ones((cell, cell)))[:h, :w].astype(np.uint8)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report
    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report.LINES:
            terminalreporter.write_line(line)
