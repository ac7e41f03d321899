"""Differentiable fractal-flame rendering and parameter fitting."""

from .compositor import composite, mse_loss
from .optimizer import CheckConfig, LearningRates, TrainConfig, gradient_check, render_final, train
from .params import (
    AffineMap,
    FlameParams,
    FlameSpec,
    GeneratorParams,
    SceneParams,
    SceneSpec,
    Variation,
    deserialize,
    init_random,
    serialize,
)

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "CheckConfig",
    "FlameParams",
    "FlameSpec",
    "GeneratorParams",
    "LearningRates",
    "SceneParams",
    "SceneSpec",
    "TrainConfig",
    "Variation",
    "composite",
    "deserialize",
    "gradient_check",
    "init_random",
    "mse_loss",
    "render_final",
    "serialize",
    "train",
]
