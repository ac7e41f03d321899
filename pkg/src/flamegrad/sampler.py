"""Reparameterized chaos game: positions, quality vectors and their adjoints.

The random generator order is drawn up front and held constant, so the
samples are a deterministic, differentiable function of the flame
parameters.  Each of the B chains starts at a point drawn from U([-1,1]^2),
runs `warmup` discarded steps and then emits T samples.

Quality vectors follow q_t = q_{t-1} / beta + e_{g_t} with q_{-1} = 0,
accumulated from the chain start.  When a step diverges the chain restarts
at a fresh random point with q = 0; that step is marked dead and no
adjoint flows across it.  Adjoints otherwise run back through the warm-up
steps as well, so gradients are exact for the whole chain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .params import FlameParams, beta_derivative, effective_beta
from .variations import generator_backward_kernel, generator_forward

log = logging.getLogger(__name__)

DEFAULT_WARMUP = 20


@dataclass(frozen=True)
class GeneratorOrder:
    indices: np.ndarray  # (B, T) int64
    seed: int
    n_generators: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape


@dataclass
class SampleBatch:
    """Chaos-game output plus the replay record needed by the adjoint sweep."""

    order: GeneratorOrder
    warmup: int
    start: np.ndarray  # (B, 2) chain start points
    steps: np.ndarray  # (B, warmup + T) generator index of every step, warm-up first
    trajectory: np.ndarray  # (B, warmup + T, 2) state after every step
    alive_all: np.ndarray  # (B, warmup + T) False where the step diverged and restarted
    qualities: np.ndarray  # (B, T, N_F)
    warm_quality: np.ndarray  # (B, N_F) q entering the first emitted step
    warm_dquality: np.ndarray  # (B, N_F) d(warm_quality)/d(beta)
    beta: float
    dead_count: int

    @property
    def positions(self) -> np.ndarray:
        """(B, T, 2) emitted sample positions."""
        return self.trajectory[:, self.warmup:]

    @property
    def alive(self) -> np.ndarray:
        return self.alive_all[:, self.warmup:]

    @property
    def n_samples(self) -> int:
        return self.alive.size

    @property
    def dead_fraction(self) -> float:
        return 1.0 - float(self.alive.mean()) if self.alive.size else 0.0


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    return seed


def draw_generator_order(seed: int, n_generators: int, chains: int, steps: int) -> GeneratorOrder:
    """I.i.d. uniform generator indices, deterministic in (seed, N_F, B, T)."""
    if n_generators < 2:
        raise ValueError(f"need at least 2 generators, got {n_generators}")
    if chains < 1 or steps < 1:
        raise ValueError("chains and steps must be >= 1")
    rng = np.random.default_rng([_check_seed(seed), 0x0D])
    idx = rng.integers(0, n_generators, size=(chains, steps), dtype=np.int64)
    return GeneratorOrder(idx, int(seed), n_generators)


def chain_starts(init_seed: int, chains: int, warmup: int, n_generators: int) -> tuple[np.ndarray, np.ndarray]:
    """Start points U([-1,1]^2) and warm-up generator indices for each chain."""
    rng = np.random.default_rng([_check_seed(init_seed), 0x5A])
    start = rng.uniform(-1.0, 1.0, size=(chains, 2))
    warm = rng.integers(0, n_generators, size=(chains, warmup), dtype=np.int64)
    return start, warm


# ---------------------------------------------------------------------------
# numba kernels


@nb.njit(cache=True, inline="always")
def _mix64(z):
    # splitmix64 finalizer; uint64 arithmetic wraps
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, inline="always")
def restart_point(seed, chain, step):
    """Counter-based U([-1,1]^2) draw for a restart of `chain` at `step`."""
    golden = np.uint64(0x9E3779B97F4A7C15)
    h = _mix64(np.uint64(seed) * golden + np.uint64(chain) * np.uint64(0xD1B54A32D192ED03) + np.uint64(step))
    h1 = _mix64(h + golden)
    h2 = _mix64(h1 + golden)
    u1 = float(h1 >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    u2 = float(h2 >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return 2.0 * u1 - 1.0, 2.0 * u2 - 1.0


@nb.njit(cache=True, parallel=True)
def _chaos_forward(coefs, vids, beta, steps, start, seed, n_warm, trajectory, qualities, alive,
                   warm_q, warm_dq):
    n_chains, n_total = steps.shape
    nf = coefs.shape[0]
    inv_beta = 1.0 / beta
    inv_beta2 = inv_beta * inv_beta
    dead = np.zeros(n_chains, dtype=np.int64)
    for b in nb.prange(n_chains):
        x = start[b, 0]
        y = start[b, 1]
        q = np.zeros(nf)
        dq = np.zeros(nf)
        for t in range(n_total):
            if t == n_warm:
                for i in range(nf):
                    warm_q[b, i] = q[i]
                    warm_dq[b, i] = dq[i]
            g = steps[b, t]
            nx, ny, bad = generator_forward(coefs[g], vids[g], x, y)
            if bad:
                x, y = restart_point(seed, b, t)
                for i in range(nf):
                    q[i] = 0.0
                    dq[i] = 0.0
                alive[b, t] = False
                if t >= n_warm:
                    dead[b] += 1
            else:
                x = nx
                y = ny
                if t < n_warm:
                    for i in range(nf):
                        dq[i] = -inv_beta2 * q[i] + inv_beta * dq[i]
                for i in range(nf):
                    q[i] *= inv_beta
                q[g] += 1.0
                alive[b, t] = True
            trajectory[b, t, 0] = x
            trajectory[b, t, 1] = y
            if t >= n_warm:
                for i in range(nf):
                    qualities[b, t - n_warm, i] = q[i]
    return dead.sum()


@nb.njit(cache=True, parallel=True)
def _chaos_backward(coefs, vids, beta, steps, start, trajectory, alive, n_warm, qualities,
                    warm_q, warm_dq, adj_pos, adj_q, n_shards):
    n_chains, n_total = steps.shape
    nf = coefs.shape[0]
    inv_beta = 1.0 / beta
    inv_beta2 = inv_beta * inv_beta
    g_aff = np.zeros((n_shards, nf, 6))
    g_beta = np.zeros(n_shards)
    per = (n_chains + n_shards - 1) // n_shards
    for s in nb.prange(n_shards):
        lam = np.zeros(nf)
        gb = 0.0
        for b in range(s * per, min(n_chains, (s + 1) * per)):
            px = 0.0
            py = 0.0
            lam[:] = 0.0
            for t in range(n_total - 1, -1, -1):
                if not alive[b, t]:
                    # restart: nothing before t influences the chain after it
                    px = 0.0
                    py = 0.0
                    lam[:] = 0.0
                    continue
                if t >= n_warm:
                    e = t - n_warm
                    px += adj_pos[b, e, 0]
                    py += adj_pos[b, e, 1]
                    dot = 0.0
                    for i in range(nf):
                        lam[i] = adj_q[b, e, i] + inv_beta * lam[i]
                        if e > 0:
                            dot += lam[i] * qualities[b, e - 1, i]
                        else:
                            dot += lam[i] * warm_q[b, i]
                    gb -= inv_beta2 * dot
                    if e == 0:
                        # warm-up part of q enters through forward-mode d(q)/d(beta)
                        for i in range(nf):
                            gb += lam[i] * inv_beta * warm_dq[b, i]
                if t > 0:
                    ix = trajectory[b, t - 1, 0]
                    iy = trajectory[b, t - 1, 1]
                else:
                    ix = start[b, 0]
                    iy = start[b, 1]
                g = steps[b, t]
                px, py = generator_backward_kernel(coefs[g], vids[g], ix, iy, px, py, g_aff[s, g])
        g_beta[s] = gb
    return g_aff, g_beta


# ---------------------------------------------------------------------------
# public API


def n_shards_for(deterministic: bool) -> int:
    return 1 if deterministic else max(1, nb.get_num_threads())


def run_chaos_game(flame: FlameParams, order: GeneratorOrder, warmup: int = DEFAULT_WARMUP,
                   init_seed: int = 0) -> SampleBatch:
    """Run B chains for warmup + T steps and emit the last T samples of each."""
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if order.n_generators != flame.n_generators:
        raise ValueError(f"order drawn for {order.n_generators} generators, flame has {flame.n_generators}")
    chains, n_emit = order.shape
    nf = flame.n_generators
    start, warm_order = chain_starts(init_seed, chains, warmup, nf)
    steps = np.ascontiguousarray(np.concatenate([warm_order, order.indices], axis=1))
    beta = effective_beta(flame)
    trajectory = np.empty((chains, warmup + n_emit, 2))
    alive = np.empty((chains, warmup + n_emit), dtype=np.bool_)
    qualities = np.empty((chains, n_emit, nf))
    warm_q = np.zeros((chains, nf))
    warm_dq = np.zeros((chains, nf))
    dead = _chaos_forward(flame.affine_array(), flame.variation_ids(), beta, steps, start,
                          _check_seed(init_seed), warmup, trajectory, qualities, alive, warm_q, warm_dq)
    batch = SampleBatch(order, warmup, start, steps, trajectory, alive, qualities, warm_q, warm_dq, beta, int(dead))
    if batch.dead_fraction > 0.5:
        log.warning("%.0f%% of chaos-game samples diverged", 100 * batch.dead_fraction)
    return batch


@dataclass
class SamplerGradient:
    affine: np.ndarray  # (N_F, 6)
    beta_raw: float


def chaos_game_backward(batch: SampleBatch, flame: FlameParams, adjoint_positions: np.ndarray,
                        adjoint_qualities: np.ndarray, deterministic: bool = False) -> SamplerGradient:
    """Reverse sweep over every chain; returns gradients for the affines and beta_raw."""
    shards = n_shards_for(deterministic)
    g_aff, g_beta = _chaos_backward(
        flame.affine_array(), flame.variation_ids(), batch.beta, batch.steps, batch.start, batch.trajectory,
        batch.alive_all, batch.warmup, batch.qualities, batch.warm_quality, batch.warm_dquality,
        np.ascontiguousarray(adjoint_positions, dtype=np.float64),
        np.ascontiguousarray(adjoint_qualities, dtype=np.float64), shards,
    )
    d_beta = float(g_beta.sum(axis=0)) if shards > 1 else float(g_beta[0])
    return SamplerGradient(g_aff.sum(axis=0), d_beta * beta_derivative(flame.beta_raw))


def quality_bound(beta: float) -> float:
    """Upper bound beta / (beta - 1) on any quality entry."""
    return beta / (beta - 1.0) if beta > 1.0 else math.inf
