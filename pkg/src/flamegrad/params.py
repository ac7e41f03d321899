"""Learnable scene state: flames, generators, colors and background.

Parameters are immutable values.  The optimizer works on a flat float64
vector (see :func:`to_vector` / :func:`from_vector`) and rebuilds a new
:class:`SceneParams` after every step.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

SCHEMA_VERSION = "flamegrad-v1"

# parameter groups, in flattening order within a flame
GROUPS = ("affine", "beta_raw", "final_transform", "colors", "background")


class Variation(enum.IntEnum):
    """Non-linear map applied after a generator's affine transform."""

    LINEAR = 0
    SPHERICAL = 1
    HANDKERCHIEF = 2
    EXPONENTIAL = 3
    DISK = 4
    HEART = 5
    POWER = 6

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Variation":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ValueError(f"unknown variation {label!r}") from None


@dataclass(frozen=True)
class Point:
    x: float
    y: float


@dataclass(frozen=True)
class AffineMap:
    """(x, y) -> (a*x + b*y + c, d*x + e*y + f)."""

    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    e: float = 1.0
    f: float = 0.0

    def __call__(self, p: Point) -> Point:
        return Point(self.a * p.x + self.b * p.y + self.c, self.d * p.x + self.e * p.y + self.f)

    def to_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e, self.f], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "AffineMap":
        if len(values) != 6:
            raise ValueError(f"affine map needs 6 coefficients, got {len(values)}")
        return cls(*(float(v) for v in values))


IDENTITY = AffineMap()


@dataclass(frozen=True)
class GeneratorParams:
    affine: AffineMap
    variation: Variation = Variation.LINEAR


@dataclass(frozen=True)
class FlameParams:
    generators: tuple[GeneratorParams, ...]
    beta_raw: float
    final_transform: AffineMap
    colors: tuple[tuple[float, float, float, float], ...]

    def __post_init__(self) -> None:
        if len(self.generators) < 2:
            raise ValueError(f"a flame needs at least 2 generators, got {len(self.generators)}")
        if len(self.colors) != len(self.generators):
            raise ValueError("one RGBA color per generator is required")

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    @property
    def beta(self) -> float:
        return effective_beta(self)

    def affine_array(self) -> np.ndarray:
        """(N_F, 6) array of generator affine coefficients."""
        return np.stack([g.affine.to_array() for g in self.generators])

    def variation_ids(self) -> np.ndarray:
        return np.array([int(g.variation) for g in self.generators], dtype=np.int64)

    def color_array(self) -> np.ndarray:
        return np.array(self.colors, dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class SceneParams:
    flames: tuple[FlameParams, ...]
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_learnable: bool = False

    def __post_init__(self) -> None:
        if not self.flames:
            raise ValueError("a scene needs at least one flame")
        if len(self.background) != 3:
            raise ValueError("background must be an RGB triple")


@dataclass(frozen=True)
class FlameSpec:
    """Structure of one flame for random initialization."""

    variations: tuple[Variation, ...]

    @classmethod
    def uniform(cls, n_generators: int, variation: Variation | str = Variation.LINEAR) -> "FlameSpec":
        if isinstance(variation, str):
            variation = Variation.from_label(variation)
        return cls((variation,) * n_generators)


@dataclass(frozen=True)
class SceneSpec:
    flames: tuple[FlameSpec, ...]
    background: tuple[float, float, float] | None = (1.0, 1.0, 1.0)  # None -> learnable


# ---------------------------------------------------------------------------
# beta reparameterization


def softplus(t: float) -> float:
    # log1p(exp(t)) without overflow for large t
    return max(t, 0.0) + math.log1p(math.exp(-abs(t)))


def softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    z = math.exp(t)
    return z / (1.0 + z)


# 1 + softplus(t) rounds to exactly 1.0 for t below about -37, so the excess
# over 1 is floored; the floor is hit for beta_raw < -27.6
BETA_EXCESS_FLOOR = 1e-12


def effective_beta(flame: FlameParams) -> float:
    """Quality decay factor 1 + softplus(beta_raw), always > 1."""
    return 1.0 + max(softplus(flame.beta_raw), BETA_EXCESS_FLOOR)


def beta_derivative(beta_raw: float) -> float:
    """d(beta)/d(beta_raw); zero where the floor is active."""
    return sigmoid(beta_raw) if softplus(beta_raw) > BETA_EXCESS_FLOOR else 0.0


BETA_RAW_FOR_TWO = softplus_inverse(1.0)  # == 0.5413...


# ---------------------------------------------------------------------------
# initialization and constraints


INIT_SCALE = 0.5
INIT_LINEAR_NOISE = 0.25
INIT_TRANSLATION = 0.5


def init_random(seed: int, spec: SceneSpec) -> SceneParams:
    """Draw a random scene with the given structure.

    Linear parts are 0.5 * identity plus U(-0.25, 0.25) noise per entry and
    translations U(-0.5, 0.5), which keeps random flames contractive with
    their attractor inside the frame.  Final transform identity, beta = 2,
    colors U(0, 1); a learnable background is drawn U(0, 1).
    """
    if not spec.flames:
        raise ValueError("scene spec has no flames")
    rng = np.random.default_rng(seed)
    flames = []
    for fspec in spec.flames:
        n = len(fspec.variations)
        if n < 2:
            raise ValueError(f"a flame needs at least 2 generators, got {n}")
        gens = []
        for variation in fspec.variations:
            lin = rng.uniform(-INIT_LINEAR_NOISE, INIT_LINEAR_NOISE, size=4) + INIT_SCALE * np.array([1.0, 0.0, 0.0, 1.0])
            tx, ty = rng.uniform(-INIT_TRANSLATION, INIT_TRANSLATION, size=2)
            affine = AffineMap.from_array([lin[0], lin[1], tx, lin[2], lin[3], ty])
            gens.append(GeneratorParams(affine, Variation(variation)))
        colors = tuple(tuple(float(v) for v in row) for row in rng.uniform(0.0, 1.0, size=(n, 4)))
        flames.append(FlameParams(tuple(gens), BETA_RAW_FOR_TWO, IDENTITY, colors))
    if spec.background is None:
        background = tuple(float(v) for v in rng.uniform(0.0, 1.0, size=3))
        learnable = True
    else:
        background = tuple(float(v) for v in spec.background)
        learnable = False
    return SceneParams(tuple(flames), background, learnable)


def _clamp01(v: float) -> float:
    return min(max(float(v), 0.0), 1.0)


def project_constraints(params: SceneParams) -> SceneParams:
    """Clamp every color and background channel into [0, 1]."""
    flames = tuple(
        FlameParams(
            fl.generators,
            fl.beta_raw,
            fl.final_transform,
            tuple(tuple(_clamp01(v) for v in c) for c in fl.colors),
        )
        for fl in params.flames
    )
    bg = tuple(_clamp01(v) for v in params.background)
    return SceneParams(flames, bg, params.background_learnable)


# ---------------------------------------------------------------------------
# flat vector view


def param_paths(params: SceneParams) -> list[str]:
    """Human-readable path of every learnable scalar, in vector order."""
    paths = []
    for k, fl in enumerate(params.flames):
        for i in range(fl.n_generators):
            paths += [f"flames[{k}].generators[{i}].affine.{n}" for n in "abcdef"]
        paths.append(f"flames[{k}].beta_raw")
        paths += [f"flames[{k}].final_transform.{n}" for n in "abcdef"]
        for i in range(fl.n_generators):
            paths += [f"flames[{k}].colors[{i}].{n}" for n in "rgba"]
    paths += [f"background.{n}" for n in "rgb"]
    return paths


def param_groups(params: SceneParams) -> list[str]:
    """Group name of every scalar in vector order (one of GROUPS)."""
    groups = []
    for fl in params.flames:
        n = fl.n_generators
        groups += ["affine"] * (6 * n) + ["beta_raw"] + ["final_transform"] * 6 + ["colors"] * (4 * n)
    groups += ["background"] * 3
    return groups


def to_vector(params: SceneParams) -> np.ndarray:
    parts = []
    for fl in params.flames:
        parts.append(fl.affine_array().ravel())
        parts.append(np.array([fl.beta_raw]))
        parts.append(fl.final_transform.to_array())
        parts.append(fl.color_array().ravel())
    parts.append(np.asarray(params.background, dtype=np.float64))
    return np.concatenate(parts)


def from_vector(template: SceneParams, vec: np.ndarray) -> SceneParams:
    """Rebuild a scene with `template`'s structure from a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    pos = 0
    flames = []
    for fl in template.flames:
        n = fl.n_generators
        aff = vec[pos:pos + 6 * n].reshape(n, 6)
        pos += 6 * n
        beta_raw = float(vec[pos])
        pos += 1
        final = AffineMap.from_array(vec[pos:pos + 6])
        pos += 6
        cols = vec[pos:pos + 4 * n].reshape(n, 4)
        pos += 4 * n
        gens = tuple(GeneratorParams(AffineMap.from_array(aff[i]), g.variation) for i, g in enumerate(fl.generators))
        flames.append(FlameParams(gens, beta_raw, final, tuple(tuple(float(v) for v in row) for row in cols)))
    bg = tuple(float(v) for v in vec[pos:pos + 3])
    pos += 3
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} entries, scene needs {pos}")
    return SceneParams(tuple(flames), bg, template.background_learnable)


# ---------------------------------------------------------------------------
# gradients


@dataclass
class FlameGradient:
    affine: np.ndarray  # (N_F, 6)
    beta_raw: float
    final_transform: np.ndarray  # (6,)
    colors: np.ndarray  # (N_F, 4)

    @classmethod
    def zeros(cls, n_generators: int) -> "FlameGradient":
        return cls(np.zeros((n_generators, 6)), 0.0, np.zeros(6), np.zeros((n_generators, 4)))


@dataclass
class GradientSet:
    """d(loss)/d(parameter), laid out like the scene it came from."""

    flames: list[FlameGradient]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def zeros_like(cls, params: SceneParams) -> "GradientSet":
        return cls([FlameGradient.zeros(fl.n_generators) for fl in params.flames], np.zeros(3))

    def to_vector(self) -> np.ndarray:
        parts = []
        for g in self.flames:
            parts += [g.affine.ravel(), np.array([g.beta_raw]), g.final_transform, g.colors.ravel()]
        parts.append(self.background)
        return np.concatenate(parts)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))


# ---------------------------------------------------------------------------
# serialization


class SchemaError(ValueError):
    """Raised when a parameter or config document violates the schema."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


def scene_to_dict(params: SceneParams) -> dict[str, Any]:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "scene",
        "background": list(params.background),
        "background_learnable": params.background_learnable,
        "flames": [
            {
                "beta_raw": fl.beta_raw,
                "final_transform": list(fl.final_transform.to_array().tolist()),
                "generators": [
                    {"variation": g.variation.label, "affine": g.affine.to_array().tolist()} for g in fl.generators
                ],
                "colors": [list(c) for c in fl.colors],
            }
            for fl in params.flames
        ],
    }


def serialize(params: SceneParams) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(scene_to_dict(params), indent=2) + "\n"


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(where, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise SchemaError(where, "number must be finite")
    return float(value)


def _numbers(value: Any, n: int, where: str) -> list[float]:
    if not isinstance(value, list) or len(value) != n:
        raise SchemaError(where, f"expected a list of {n} numbers")
    return [_number(v, f"{where}[{i}]") for i, v in enumerate(value)]


def _require(obj: dict, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise SchemaError(where, "expected an object")
    if key not in obj:
        raise SchemaError(f"{where}.{key}" if where else key, "missing field")
    return obj[key]


def parse_variation(value: Any, where: str) -> Variation:
    if not isinstance(value, str):
        raise SchemaError(where, f"expected a variation name, got {value!r}")
    try:
        return Variation.from_label(value)
    except ValueError:
        names = ", ".join(v.label for v in Variation)
        raise SchemaError(where, f"unknown variation {value!r} (expected one of {names})") from None


def check_schema_tag(doc: Any, kind: str) -> None:
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "expected a JSON object")
    tag = doc.get("schema")
    if tag != SCHEMA_VERSION:
        raise SchemaError("schema", f"expected {SCHEMA_VERSION!r}, got {tag!r}")
    if doc.get("kind", kind) != kind:
        raise SchemaError("kind", f"expected {kind!r}, got {doc.get('kind')!r}")


def scene_from_dict(doc: Any) -> SceneParams:
    check_schema_tag(doc, "scene")
    bg = _numbers(_require(doc, "background", ""), 3, "background")
    learnable = doc.get("background_learnable", False)
    if not isinstance(learnable, bool):
        raise SchemaError("background_learnable", "expected true or false")
    flames_doc = _require(doc, "flames", "")
    if not isinstance(flames_doc, list) or not flames_doc:
        raise SchemaError("flames", "expected a non-empty list")
    flames = []
    for k, fd in enumerate(flames_doc):
        where = f"flames[{k}]"
        gens_doc = _require(fd, "generators", where)
        if not isinstance(gens_doc, list) or len(gens_doc) < 2:
            raise SchemaError(f"{where}.generators", "a flame needs at least 2 generators")
        gens = []
        for i, gd in enumerate(gens_doc):
            gw = f"{where}.generators[{i}]"
            variation = parse_variation(_require(gd, "variation", gw), f"{gw}.variation")
            affine = AffineMap.from_array(_numbers(_require(gd, "affine", gw), 6, f"{gw}.affine"))
            gens.append(GeneratorParams(affine, variation))
        colors_doc = _require(fd, "colors", where)
        if not isinstance(colors_doc, list) or len(colors_doc) != len(gens):
            raise SchemaError(f"{where}.colors", f"expected {len(gens)} RGBA colors")
        colors = tuple(tuple(_numbers(c, 4, f"{where}.colors[{i}]")) for i, c in enumerate(colors_doc))
        beta_raw = _number(_require(fd, "beta_raw", where), f"{where}.beta_raw")
        final = AffineMap.from_array(_numbers(_require(fd, "final_transform", where), 6, f"{where}.final_transform"))
        flames.append(FlameParams(tuple(gens), beta_raw, final, colors))
    return SceneParams(tuple(flames), tuple(bg), learnable)


def load_json(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {exc.lineno}, column {exc.colno}", exc.msg) from None


def deserialize(text: str) -> SceneParams:
    """Parse a scene document; raises :class:`SchemaError` naming the offending field."""
    return scene_from_dict(load_json(text))
