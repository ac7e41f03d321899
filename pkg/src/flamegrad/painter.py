"""Log-density tone mapping of a splat buffer into RGBA.

For each pixel with splat weight w = sum(q) > 0::

    alpha = clip(ln(max(w, EPS_W)) / ln(max(w_max, 1 + EPS_W)), 0, 1)
    rgba  = clip(alpha / w * sum_i c_i q_i, 0, 1)

Empty pixels are transparent black.  ``w_max`` is treated as a constant by
the backward pass; callers may also pin it explicitly.  The alpha clamp
counts as active at both bounds, and the pixel holding w_max always gets
alpha = 1 with a zero alpha derivative.
A pinned ``clamp`` state (see :class:`PaintResult`) replays the clamp
decisions of an earlier call; with ``clip=False`` the output clamp is
skipped as well, so a replay near the base point follows one smooth branch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .splatter import SplatBuffer

log = logging.getLogger(__name__)

EPS_W = 1e-8


# per-pixel alpha clamp state
FREE, LOW, HIGH = 0, -1, 1


@dataclass
class PaintResult:
    rgba: np.ndarray  # (H, W, 4)
    alpha: np.ndarray  # (H, W) tone-mapped alpha after the clamp
    w_max: float
    clamp: np.ndarray  # (H, W) int8: FREE, LOW or HIGH
    empty: bool  # True if the buffer held no weight at all


def _tone(buffer: np.ndarray, colors: np.ndarray, w_max: float | None, clamp: np.ndarray | None = None):
    w = buffer.sum(axis=-1)
    if w_max is None:
        w_max = float(w.max()) if w.size else 0.0
    denom = math.log(max(w_max, 1.0 + EPS_W))
    alpha_raw = np.log(np.maximum(w, EPS_W)) / denom
    if clamp is None:
        # the w_max pixel is pinned to alpha = 1: the log ratio can round below 1,
        # and for w_max <= 1 + EPS_W the floored denominator would give it 0
        top = (w >= w_max) & (w > 0)
        clamp = np.where((alpha_raw >= 1.0) | top, HIGH, np.where(alpha_raw <= 0.0, LOW, FREE)).astype(np.int8)
    alpha = np.where(clamp == FREE, alpha_raw, np.where(clamp == HIGH, 1.0, 0.0))
    filled = w > 0
    scale = np.zeros_like(w)
    np.divide(alpha, w, out=scale, where=filled)
    tint = buffer @ colors  # (H, W, 4)
    mean = np.zeros_like(tint)
    np.divide(tint, w[..., None], out=mean, where=filled[..., None])
    raw = alpha[..., None] * mean
    return w, w_max, denom, clamp, alpha, scale, tint, raw


def paint(buffer: SplatBuffer | np.ndarray, colors: np.ndarray, w_max: float | None = None,
          clamp: np.ndarray | None = None, clip: bool = True) -> PaintResult:
    data = buffer.data if isinstance(buffer, SplatBuffer) else np.asarray(buffer)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 4)
    w, w_max, _, clamp, alpha, _, _, raw = _tone(data, colors, w_max, clamp)
    empty = not (w_max > 0.0)
    if empty:
        log.warning("splat buffer is empty; painting a transparent image")
    alpha = np.where(w > 0, alpha, 0.0)
    return PaintResult(np.clip(raw, 0.0, 1.0) if clip else raw, alpha, w_max, clamp, empty)


def paint_backward(buffer: SplatBuffer | np.ndarray, colors: np.ndarray, image_adjoint: np.ndarray,
                   w_max: float | None = None, clamp: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Returns (buffer adjoint (H, W, N_F), color gradient (N_F, 4))."""
    data = buffer.data if isinstance(buffer, SplatBuffer) else np.asarray(buffer)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 4)
    w, w_max, denom, clamp, _, scale, tint, raw = _tone(data, colors, w_max, clamp)
    g = np.where((raw >= 0.0) & (raw <= 1.0), image_adjoint, 0.0)

    color_grad = np.einsum("hwi,hwk->ik", data * scale[..., None], g)

    filled = w > 0
    live = filled & (w > EPS_W) & (clamp == FREE)
    w_safe = np.where(filled, w, 1.0)
    dalpha = np.where(live, 1.0 / (w_safe * denom), 0.0)
    coef = np.where(filled, dalpha / w_safe - scale / w_safe, 0.0)
    gs = (g * tint).sum(axis=-1)
    buf_adj = (coef * gs)[..., None] + scale[..., None] * (g @ colors.T)
    return buf_adj, color_grad
