"""Alpha-over compositing onto a background and the MSE training loss.

Straight (non-premultiplied) alpha; the first buffer in the list is the
bottom layer: out = a * src + (1 - a) * out, starting from the background.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _check_shapes(buffers: Sequence[np.ndarray]) -> tuple[int, int]:
    if not buffers:
        raise ValueError("nothing to composite")
    shape = buffers[0].shape[:2]
    for k, b in enumerate(buffers):
        if b.shape[:2] != shape or b.shape[2] != 4:
            raise ValueError(f"buffer {k} has shape {b.shape}, expected {shape + (4,)}")
    return shape


def composite(buffers: Sequence[np.ndarray], background: Sequence[float]) -> np.ndarray:
    """Layer RGBA buffers over a constant RGB background; returns (H, W, 3)."""
    h, w = _check_shapes(buffers)
    out = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy()
    for src in buffers:
        a = src[..., 3:4]
        out = a * src[..., :3] + (1.0 - a) * out
    return out


def mse_loss(image: np.ndarray, reference: np.ndarray) -> float:
    if image.shape != reference.shape:
        raise ValueError(f"image {image.shape} and reference {reference.shape} differ in shape")
    return float(np.mean((image - reference) ** 2))


def mse_loss_backward(image: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return 2.0 * (image - reference) / image.size


def composite_backward(buffers: Sequence[np.ndarray], background: Sequence[float],
                       image_adjoint: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Adjoint of :func:`composite`: per-buffer RGBA adjoints and the background gradient."""
    h, w = _check_shapes(buffers)
    # running images below each layer
    below = [np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3))]
    for src in buffers[:-1]:
        a = src[..., 3:4]
        below.append(a * src[..., :3] + (1.0 - a) * below[-1])
    g = np.asarray(image_adjoint, dtype=np.float64)
    adjoints: list[np.ndarray] = [None] * len(buffers)  # type: ignore[list-item]
    for k in range(len(buffers) - 1, -1, -1):
        src = buffers[k]
        a = src[..., 3:4]
        adj = np.empty((h, w, 4))
        adj[..., :3] = a * g
        adj[..., 3] = ((src[..., :3] - below[k]) * g).sum(axis=-1)
        adjoints[k] = adj
        g = (1.0 - a) * g
    return adjoints, g.sum(axis=(0, 1))


def composite_and_loss_backward(buffers: Sequence[np.ndarray], background: Sequence[float],
                                reference: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    image = composite(buffers, background)
    return composite_backward(buffers, background, mse_loss_backward(image, reference))
