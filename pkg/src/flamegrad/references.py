"""Synthetic reference images for experiments and tests."""

from __future__ import annotations

import numpy as np

# (centre x, centre y, radius) in unit image coordinates, and RGB
THREE_DISCS = (
    ((0.35, 0.38, 0.22), (0.90, 0.15, 0.15)),
    ((0.65, 0.40, 0.20), (0.15, 0.70, 0.20)),
    ((0.50, 0.68, 0.21), (0.15, 0.25, 0.90)),
)


def three_discs(width: int, height: int, supersample: int = 4) -> np.ndarray:
    """Three overlapping coloured discs on white, box-antialiased; (H, W, 3) in [0, 1]."""
    s = supersample
    ys = (np.arange(height * s) + 0.5) / (height * s)
    xs = (np.arange(width * s) + 0.5) / (width * s)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    img = np.ones((height * s, width * s, 3))
    for (cx, cy, r), rgb in THREE_DISCS:
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[inside] = rgb
    return img.reshape(height, s, width, s, 3).mean(axis=(1, 3))
