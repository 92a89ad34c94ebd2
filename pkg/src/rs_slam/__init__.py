"""RGB-D visual SLAM with rotationally symmetric BRIEF features."""

__version__ = "0.1.0"
