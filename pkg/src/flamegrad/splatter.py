"""Final transform, pixel mapping and 3x3 Gaussian splatting.

Samples are mapped from NDC [-1,1]^2 to continuous pixel coordinates with
x_pix = (x + 1) / 2 * W and y_pix = (y + 1) / 2 * H, row 0 at the top.
A sample increments the 3x3 block around the pixel containing it by
q * exp(-2 d^2), d being the distance in pixels to each pixel centre.  The
kernel is not normalized and neighbours outside the image are dropped.

The neighbourhood choice (the centre cell) is the only discontinuous part
of the forward map.  It is returned by :func:`splat` and can be pinned in
a later call, which is how the gradient checker holds it fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .params import AffineMap, effective_beta
from .sampler import SampleBatch, chain_starts, n_shards_for, restart_point
from .variations import generator_forward

OUTSIDE = np.iinfo(np.int32).min


@dataclass
class SplatBuffer:
    data: np.ndarray  # (H, W, N_F)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@nb.njit(cache=True, inline="always")
def to_pixel(fin, x, y, width, height):
    fx = fin[0] * x + fin[1] * y + fin[2]
    fy = fin[3] * x + fin[4] * y + fin[5]
    return (fx + 1.0) * 0.5 * width, (fy + 1.0) * 0.5 * height


@nb.njit(cache=True, inline="always")
def center_cell(px, py, width, height):
    # guard the float->int cast against huge coordinates
    if not (px >= 0.0 and px < width and py >= 0.0 and py < height):
        return OUTSIDE, OUTSIDE
    return int(math.floor(px)), int(math.floor(py))


@nb.njit(cache=True, inline="always")
def deposit(buf, q, px, py, cx, cy):
    """Add q * exp(-2 d^2) to the 3x3 block centred on cell (cx, cy)."""
    height, width, nf = buf.shape
    for dj in range(-1, 2):
        j = cy + dj
        if j < 0 or j >= height:
            continue
        ey = py - (j + 0.5)
        for di in range(-1, 2):
            i = cx + di
            if i < 0 or i >= width:
                continue
            ex = px - (i + 0.5)
            w = math.exp(-2.0 * (ex * ex + ey * ey))
            for c in range(nf):
                buf[j, i, c] += w * q[c]


@nb.njit(cache=True, parallel=True)
def _splat_forward(pos, qual, alive, fin, width, height, cells, pinned, n_shards):
    n = pos.shape[0]
    nf = qual.shape[1]
    bufs = np.zeros((n_shards, height, width, nf))
    per = (n + n_shards - 1) // n_shards
    for s in nb.prange(n_shards):
        buf = bufs[s]
        for k in range(s * per, min(n, (s + 1) * per)):
            if not alive[k]:
                cells[k, 0] = OUTSIDE
                cells[k, 1] = OUTSIDE
                continue
            px, py = to_pixel(fin, pos[k, 0], pos[k, 1], width, height)
            if pinned:
                cx = cells[k, 0]
                cy = cells[k, 1]
            else:
                cx, cy = center_cell(px, py, width, height)
                cells[k, 0] = cx
                cells[k, 1] = cy
            if cx == OUTSIDE:
                continue
            deposit(buf, qual[k], px, py, cx, cy)
    return bufs


@nb.njit(cache=True, parallel=True)
def _splat_backward(pos, qual, fin, cells, gbuf, adj_pos, adj_q, n_shards):
    n = pos.shape[0]
    height, width, nf = gbuf.shape
    g_fin = np.zeros((n_shards, 6))
    per = (n + n_shards - 1) // n_shards
    hw = 0.5 * width
    hh = 0.5 * height
    for s in nb.prange(n_shards):
        for k in range(s * per, min(n, (s + 1) * per)):
            for c in range(nf):
                adj_q[k, c] = 0.0
            adj_pos[k, 0] = 0.0
            adj_pos[k, 1] = 0.0
            cx = cells[k, 0]
            cy = cells[k, 1]
            if cx == OUTSIDE:
                continue
            x = pos[k, 0]
            y = pos[k, 1]
            px, py = to_pixel(fin, x, y, width, height)
            gpx = 0.0
            gpy = 0.0
            for dj in range(-1, 2):
                j = cy + dj
                if j < 0 or j >= height:
                    continue
                ey = py - (j + 0.5)
                for di in range(-1, 2):
                    i = cx + di
                    if i < 0 or i >= width:
                        continue
                    ex = px - (i + 0.5)
                    w = math.exp(-2.0 * (ex * ex + ey * ey))
                    dot = 0.0
                    for c in range(nf):
                        gv = gbuf[j, i, c]
                        adj_q[k, c] += w * gv
                        dot += qual[k, c] * gv
                    gpx -= 4.0 * ex * w * dot
                    gpy -= 4.0 * ey * w * dot
            gX = gpx * hw
            gY = gpy * hh
            g_fin[s, 0] += gX * x
            g_fin[s, 1] += gX * y
            g_fin[s, 2] += gX
            g_fin[s, 3] += gY * x
            g_fin[s, 4] += gY * y
            g_fin[s, 5] += gY
            adj_pos[k, 0] = fin[0] * gX + fin[3] * gY
            adj_pos[k, 1] = fin[1] * gX + fin[4] * gY
    return g_fin


@dataclass
class SplatResult:
    buffer: SplatBuffer
    cells: np.ndarray  # (B*T, 2) centre cell per sample, OUTSIDE if dropped


def splat(batch: SampleBatch, final: AffineMap, width: int, height: int,
          cells: np.ndarray | None = None, deterministic: bool = False) -> SplatResult:
    """Splat every alive sample of `batch` into an (H, W, N_F) buffer.

    Passing `cells` from an earlier call pins each sample's 3x3 block.
    """
    if width < 4 or height < 4:
        raise ValueError("splat buffers must be at least 4x4")
    nf = batch.qualities.shape[-1]
    pos = batch.positions.reshape(-1, 2)
    qual = batch.qualities.reshape(-1, nf)
    alive = batch.alive.reshape(-1)
    pinned = cells is not None
    cells = np.array(cells, dtype=np.int32) if pinned else np.empty((pos.shape[0], 2), dtype=np.int32)
    shards = n_shards_for(deterministic)
    bufs = _splat_forward(pos, qual, alive, final.to_array(), width, height, cells, pinned, shards)
    data = bufs[0] if shards == 1 else bufs.sum(axis=0)
    return SplatResult(SplatBuffer(data), cells)


@dataclass
class SplatGradient:
    positions: np.ndarray  # (B, T, 2)
    qualities: np.ndarray  # (B, T, N_F)
    final_transform: np.ndarray  # (6,)


def splat_backward(batch: SampleBatch, final: AffineMap, cells: np.ndarray, buffer_adjoint: np.ndarray,
                   deterministic: bool = False) -> SplatGradient:
    """Adjoint of :func:`splat` for the cells recorded in the forward pass."""
    nf = batch.qualities.shape[-1]
    pos = batch.positions.reshape(-1, 2)
    qual = batch.qualities.reshape(-1, nf)
    adj_pos = np.empty_like(pos)
    adj_q = np.empty_like(qual)
    shards = n_shards_for(deterministic)
    g_fin = _splat_backward(pos, qual, final.to_array(), cells,
                            np.ascontiguousarray(buffer_adjoint, dtype=np.float64), adj_pos, adj_q, shards)
    return SplatGradient(adj_pos.reshape(batch.positions.shape), adj_q.reshape(batch.qualities.shape),
                         g_fin.sum(axis=0))


def kernel_mass(fx: float, fy: float) -> float:
    """Total 3x3 kernel weight for a sample at sub-pixel offset (fx, fy) in [0,1)^2."""
    ex = np.array([fx - 0.5 - k for k in (-1, 0, 1)])
    ey = np.array([fy - 0.5 - k for k in (-1, 0, 1)])
    return float(np.exp(-2 * ex**2).sum() * np.exp(-2 * ey**2).sum())


@nb.njit(cache=True, parallel=True)
def _chaos_splat(coefs, vids, beta, order, start, warm_order, seed, fin, width, height, n_shards):
    n_chains, n_steps = order.shape
    n_warm = warm_order.shape[1]
    nf = coefs.shape[0]
    inv_beta = 1.0 / beta
    bufs = np.zeros((n_shards, height, width, nf))
    dead = np.zeros(n_shards, dtype=np.int64)
    per = (n_chains + n_shards - 1) // n_shards
    for s in nb.prange(n_shards):
        buf = bufs[s]
        q = np.zeros(nf)
        for b in range(s * per, min(n_chains, (s + 1) * per)):
            x = start[b, 0]
            y = start[b, 1]
            q[:] = 0.0
            for t in range(n_warm + n_steps):
                g = warm_order[b, t] if t < n_warm else order[b, t - n_warm]
                nx, ny, bad = generator_forward(coefs[g], vids[g], x, y)
                if bad:
                    x, y = restart_point(seed, b, t)
                    q[:] = 0.0
                    if t >= n_warm:
                        dead[s] += 1
                    continue
                x = nx
                y = ny
                for i in range(nf):
                    q[i] *= inv_beta
                q[g] += 1.0
                if t >= n_warm:
                    px, py = to_pixel(fin, x, y, width, height)
                    cx, cy = center_cell(px, py, width, height)
                    if cx != OUTSIDE:
                        deposit(buf, q, px, py, cx, cy)
    return bufs, dead.sum()


def splat_chaos_game(flame, order, warmup: int, init_seed: int, width: int, height: int,
                     deterministic: bool = False) -> tuple[SplatBuffer, int]:
    """Forward-only sample-and-splat without keeping a replay record.

    Matches ``splat(run_chaos_game(...))`` exactly in deterministic mode.
    Returns the buffer and the number of dead samples.
    """
    if width < 4 or height < 4:
        raise ValueError("splat buffers must be at least 4x4")
    chains = order.shape[0]
    start, warm_order = chain_starts(init_seed, chains, warmup, flame.n_generators)
    shards = min(n_shards_for(deterministic), chains)
    bufs, dead = _chaos_splat(
        flame.affine_array(), flame.variation_ids(), effective_beta(flame), order.indices, start,
        warm_order, int(init_seed), flame.final_transform.to_array(), width, height, shards,
    )
    data = bufs[0] if shards == 1 else bufs.sum(axis=0)
    return SplatBuffer(data), int(dead)
