"""End-to-end pipeline, gradient-descent training, gradient checking and final rendering."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import compositor, painter
from .params import (
    GradientSet,
    FlameGradient,
    SceneParams,
    from_vector,
    param_groups,
    param_paths,
    project_constraints,
    to_vector,
)
from .sampler import DEFAULT_WARMUP, GeneratorOrder, SampleBatch, chaos_game_backward, draw_generator_order, run_chaos_game
from .splatter import SplatResult, splat, splat_backward, splat_chaos_game

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """A pipeline stage produced NaN or infinity."""

    def __init__(self, stage: str, iteration: int | None = None):
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite values in {stage}{where}")
        self.stage = stage
        self.iteration = iteration


@dataclass(frozen=True)
class LearningRates:
    affine: float = 0.1
    final_transform: float = 0.05
    colors: float = 0.5
    beta_raw: float = 0.1
    background: float = 0.5

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if not value >= 0:
                raise ValueError(f"learning rate {name} must be >= 0, got {value}")


@dataclass(frozen=True)
class TrainConfig:
    train_width: int = 200
    train_height: int = 200
    chains: int = 10_000
    steps: int = 100
    warmup: int = DEFAULT_WARMUP
    iterations: int = 1000
    learning_rates: LearningRates = field(default_factory=LearningRates)
    grad_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.train_width, self.train_height) < 4:
            raise ValueError("training resolution must be at least 4x4")
        if self.chains < 1 or self.steps < 1 or self.warmup < 0:
            raise ValueError("chains and steps must be >= 1 and warmup >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")

    @property
    def samples_per_flame(self) -> int:
        return self.chains * self.steps


@dataclass
class TrainReport:
    loss_history: list[float]
    dead_samples: list[list[int]]  # per iteration, per flame
    empty_buffers: int
    wall_time: float


# ---------------------------------------------------------------------------
# forward / backward over a whole scene


def flame_seeds(seed: int, index: int, flame: int) -> tuple[int, int]:
    """(order seed, chain-start seed) for one flame at one iteration or render batch."""
    state = np.random.SeedSequence([int(seed), int(index), int(flame)]).generate_state(2, dtype=np.uint32)
    return int(state[0]), int(state[1])


@dataclass
class Frozen:
    """Discrete choices pinned across repeated forward passes."""

    cells: list[np.ndarray]
    w_max: list[float]
    clamp: list[np.ndarray]


@dataclass
class FlameTape:
    batch: SampleBatch
    splat: SplatResult
    paint: painter.PaintResult


@dataclass
class Tape:
    flames: list[FlameTape]
    image: np.ndarray
    loss: float | None

    @property
    def dead_samples(self) -> list[int]:
        return [ft.batch.dead_count for ft in self.flames]

    def freeze(self) -> Frozen:
        return Frozen([ft.splat.cells.copy() for ft in self.flames], [ft.paint.w_max for ft in self.flames],
                      [ft.paint.clamp.copy() for ft in self.flames])


def _finite(arr: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(stage)


def forward(params: SceneParams, orders: Sequence[GeneratorOrder], init_seeds: Sequence[int], width: int,
            height: int, warmup: int = DEFAULT_WARMUP, reference: np.ndarray | None = None,
            frozen: Frozen | None = None, deterministic: bool = False) -> Tape:
    """Sample, splat and paint every flame, composite, and score against `reference`."""
    tapes = []
    for k, (flame, order, init_seed) in enumerate(zip(params.flames, orders, init_seeds)):
        batch = run_chaos_game(flame, order, warmup, init_seed)
        cells = frozen.cells[k] if frozen else None
        sp = splat(batch, flame.final_transform, width, height, cells=cells, deterministic=deterministic)
        _finite(sp.buffer.data, f"splat of flame {k}")
        if frozen:
            pr = painter.paint(sp.buffer, flame.color_array(), w_max=frozen.w_max[k], clamp=frozen.clamp[k],
                               clip=False)
        else:
            pr = painter.paint(sp.buffer, flame.color_array())
        _finite(pr.rgba, f"paint of flame {k}")
        tapes.append(FlameTape(batch, sp, pr))
    image = compositor.composite([t.paint.rgba for t in tapes], params.background)
    _finite(image, "composite")
    loss = None
    if reference is not None:
        loss = compositor.mse_loss(image, reference)
        if not math.isfinite(loss):
            raise NonFiniteError("loss")
    return Tape(tapes, image, loss)


def backward(tape: Tape, params: SceneParams, reference: np.ndarray, deterministic: bool = False) -> GradientSet:
    """Gradient of the MSE loss recorded in `tape` w.r.t. every scene parameter."""
    rgba = [ft.paint.rgba for ft in tape.flames]
    image_adj = compositor.mse_loss_backward(tape.image, reference)
    rgba_adj, bg_grad = compositor.composite_backward(rgba, params.background, image_adj)
    grads = []
    for ft, flame, adj in zip(tape.flames, params.flames, rgba_adj):
        buf_adj, color_grad = painter.paint_backward(ft.splat.buffer, flame.color_array(), adj,
                                                        w_max=ft.paint.w_max, clamp=ft.paint.clamp)
        sg = splat_backward(ft.batch, flame.final_transform, ft.splat.cells, buf_adj, deterministic=deterministic)
        cg = chaos_game_backward(ft.batch, flame, sg.positions, sg.qualities, deterministic=deterministic)
        grads.append(FlameGradient(cg.affine, cg.beta_raw, sg.final_transform, color_grad))
    if not params.background_learnable:
        bg_grad = np.zeros(3)
    gs = GradientSet(grads, np.asarray(bg_grad, dtype=np.float64))
    if not gs.is_finite():
        raise NonFiniteError("backward pass")
    return gs


def draw_orders(params: SceneParams, seed: int, index: int, chains: int, steps: int) -> tuple[list, list[int]]:
    orders, inits = [], []
    for k, flame in enumerate(params.flames):
        order_seed, init_seed = flame_seeds(seed, index, k)
        orders.append(draw_generator_order(order_seed, flame.n_generators, chains, steps))
        inits.append(init_seed)
    return orders, inits


# ---------------------------------------------------------------------------
# training


def _lr_vector(params: SceneParams, rates: LearningRates) -> np.ndarray:
    lr = np.array([getattr(rates, g) for g in param_groups(params)])
    if not params.background_learnable:
        lr[-3:] = 0.0
    return lr


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def train(params: SceneParams, reference: np.ndarray, cfg: TrainConfig, deterministic: bool = False,
          callback: Callable[[int, float, SceneParams], None] | None = None) -> tuple[SceneParams, TrainReport]:
    """Plain gradient descent on the MSE between the rendered scene and `reference`.

    Every iteration draws a fresh generator order from (cfg.seed, iteration).
    The loss recorded for an iteration is the loss before its update.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (cfg.train_height, cfg.train_width, 3):
        raise ValueError(f"reference is {reference.shape}, expected {(cfg.train_height, cfg.train_width, 3)}")
    start = time.perf_counter()
    lr = _lr_vector(params, cfg.learning_rates)
    losses: list[float] = []
    dead: list[list[int]] = []
    empty = 0
    for it in range(cfg.iterations):
        orders, inits = draw_orders(params, cfg.seed, it, cfg.chains, cfg.steps)
        try:
            tape = forward(params, orders, inits, cfg.train_width, cfg.train_height, cfg.warmup, reference,
                           deterministic=deterministic)
            grads = backward(tape, params, reference, deterministic=deterministic)
        except NonFiniteError as exc:
            raise NonFiniteError(exc.stage, it) from None
        losses.append(tape.loss)
        dead.append(tape.dead_samples)
        empty += sum(ft.paint.empty for ft in tape.flames)
        step = clip_by_norm(grads.to_vector(), cfg.grad_clip_norm)
        params = project_constraints(from_vector(params, to_vector(params) - lr * step))
        if callback is not None:
            callback(it, tape.loss, params)
    return params, TrainReport(losses, dead, empty, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# gradient check


@dataclass(frozen=True)
class CheckConfig:
    width: int = 32
    height: int = 32
    chains: int = 64
    steps: int = 20
    warmup: int = 5
    seed: int = 0
    step_size: float = 1e-4
    min_grad: float = 1e-6


@dataclass
class GradCheckReport:
    paths: list[str]
    groups: list[str]
    analytic: np.ndarray
    numeric: np.ndarray
    checked: np.ndarray  # bool mask of parameters with |analytic| > min_grad
    loss: float

    @property
    def relative_errors(self) -> np.ndarray:
        denom = np.maximum(np.abs(self.analytic), np.abs(self.numeric))
        err = np.zeros_like(self.analytic)
        np.divide(np.abs(self.analytic - self.numeric), denom, out=err, where=denom > 0)
        return np.where(self.checked, err, 0.0)

    @property
    def max_relative_error(self) -> float:
        errs = self.relative_errors
        return float(errs.max()) if errs.size else 0.0

    @property
    def worst_path(self) -> str:
        return self.paths[int(np.argmax(self.relative_errors))]

    def group_errors(self) -> dict[str, float]:
        errs = self.relative_errors
        out: dict[str, float] = {}
        for g, e, c in zip(self.groups, errs, self.checked):
            if c:
                out[g] = max(out.get(g, 0.0), float(e))
        return out


def gradient_check(params: SceneParams, reference: np.ndarray, cfg: CheckConfig = CheckConfig(),
                   gradient_fn: Callable[[Tape, SceneParams, np.ndarray], GradientSet] | None = None
                   ) -> GradCheckReport:
    """Compare the analytic gradient with central differences on every learnable scalar.

    Generator orders, chain starts, splat cells, each flame's w_max and the
    alpha clamp states are frozen at their values for `params`, and the
    output clamp is skipped, so both sides differentiate the same smooth branch.  `gradient_fn` replaces :func:`backward`
    (used to inject faults in tests).
    """
    reference = np.asarray(reference, dtype=np.float64)
    orders, inits = draw_orders(params, cfg.seed, 0, cfg.chains, cfg.steps)

    def run(p: SceneParams, frozen: Frozen | None = None) -> Tape:
        return forward(p, orders, inits, cfg.width, cfg.height, cfg.warmup, reference, frozen=frozen,
                       deterministic=True)

    base = run(params)
    frozen = base.freeze()
    if gradient_fn is None:
        analytic = backward(base, params, reference, deterministic=True).to_vector()
    else:
        analytic = gradient_fn(base, params, reference).to_vector()
    vec = to_vector(params)
    paths = param_paths(params)
    groups = param_groups(params)
    numeric = np.zeros_like(vec)
    learnable = np.ones(vec.size, dtype=bool)
    if not params.background_learnable:
        learnable[-3:] = False
    for i in np.flatnonzero(learnable):
        hi = vec.copy()
        lo = vec.copy()
        hi[i] += cfg.step_size
        lo[i] -= cfg.step_size
        f_hi = run(from_vector(params, hi), frozen).loss
        f_lo = run(from_vector(params, lo), frozen).loss
        numeric[i] = (f_hi - f_lo) / (2 * cfg.step_size)
    checked = learnable & (np.abs(analytic) > cfg.min_grad)
    return GradCheckReport(paths, groups, analytic, numeric, checked, base.loss)


# ---------------------------------------------------------------------------
# final rendering


def render_final(params: SceneParams, width: int, height: int, total_samples: int, seed: int = 0,
                 chains: int = 10_000, steps: int = 100, warmup: int = DEFAULT_WARMUP,
                 deterministic: bool = False) -> np.ndarray:
    """Forward-only render at evaluation quality; returns an (H, W, 3) image.

    `total_samples` per flame is split into batches of `chains * steps`;
    batch j uses the same seeds as training iteration j would.  A trailing
    remainder smaller than `steps` is dropped.
    """
    if total_samples < 1:
        raise ValueError("total_samples must be >= 1")
    per_batch = chains * steps
    n_full, rem = divmod(int(total_samples), per_batch)
    batches = [chains] * n_full
    if rem // steps:
        batches.append(rem // steps)
    if not batches:
        batches = [max(1, total_samples // max(1, steps))]
        steps = min(steps, total_samples)
    layers = []
    for k, flame in enumerate(params.flames):
        acc = None
        for j, n_chains in enumerate(batches):
            order_seed, init_seed = flame_seeds(seed, j, k)
            order = draw_generator_order(order_seed, flame.n_generators, n_chains, steps)
            buf, _ = splat_chaos_game(flame, order, warmup, init_seed, width, height, deterministic=deterministic)
            acc = buf.data if acc is None else acc + buf.data
        layers.append(painter.paint(acc, flame.color_array()).rgba)
    return compositor.composite(layers, params.background)
