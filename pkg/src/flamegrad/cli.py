"""Command-line entry point: ``flamegrad train|render|gradcheck|reference``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import optimizer
from .optimizer import CheckConfig, LearningRates, NonFiniteError, TrainConfig
from .params import (
    FlameSpec,
    SceneParams,
    SceneSpec,
    SchemaError,
    Variation,
    check_schema_tag,
    deserialize,
    init_random,
    load_json,
    parse_variation,
    serialize,
)
from .references import three_discs

log = logging.getLogger("flamegrad")

LINEAR_TOLERANCE = 1e-3
NONLINEAR_TOLERANCE = 1e-2


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


# ---------------------------------------------------------------------------
# images


def load_reference(path: str | os.PathLike, width: int, height: int) -> np.ndarray:
    """Read an 8-bit RGB/RGBA image, flatten it over white and box-resample to (H, W, 3) in [0, 1]."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be positive, got {width}x{height}")
    try:
        with Image.open(path) as im:
            im.load()
            rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise CliError(f"cannot read reference image {path}: {exc}") from None
    alpha = rgba[..., 3:4]
    flat = alpha * rgba[..., :3] + (1.0 - alpha)
    if flat.shape[:2] == (height, width):
        return flat
    channels = [
        np.asarray(Image.fromarray(flat[..., c].astype(np.float32), mode="F").resize((width, height), Image.BOX))
        for c in range(3)
    ]
    return np.clip(np.stack(channels, axis=-1).astype(np.float64), 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# config


@dataclass
class EvalSettings:
    width: int = 800
    height: int = 800
    samples: int = 10_000_000
    chains: int = 10_000
    steps: int = 100


@dataclass
class SceneConfig:
    reference: Path
    scene: SceneSpec
    train: TrainConfig
    init_seed: int
    eval: EvalSettings = field(default_factory=EvalSettings)
    check: CheckConfig = field(default_factory=CheckConfig)
    initial_params: Path | None = None
    output_dir: Path = Path("flamegrad-out")


def _int(doc: dict, key: str, where: str, default: int | None = None, minimum: int = 0) -> int:
    if key not in doc:
        if default is None:
            raise SchemaError(f"{where}.{key}", "missing field")
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(f"{where}.{key}", f"expected an integer, got {v!r}")
    if v < minimum:
        raise SchemaError(f"{where}.{key}", f"must be >= {minimum}")
    return v


def _float(doc: dict, key: str, where: str, default: float) -> float:
    v = doc.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise SchemaError(f"{where}.{key}", f"expected a finite number, got {v!r}")
    return float(v)


def _section(doc: dict, key: str) -> dict:
    sec = doc.get(key, {})
    if not isinstance(sec, dict):
        raise SchemaError(key, "expected an object")
    return sec


def parse_config(doc: Any, base_dir: Path = Path(".")) -> SceneConfig:
    """Validate a config document; relative paths resolve against `base_dir`."""
    check_schema_tag(doc, "config")

    ref = doc.get("reference")
    if not isinstance(ref, str):
        raise SchemaError("reference", "expected an image path")

    flames_doc = doc.get("flames")
    if not isinstance(flames_doc, list) or not flames_doc:
        raise SchemaError("flames", "expected a non-empty list")
    flames = []
    for k, fd in enumerate(flames_doc):
        where = f"flames[{k}]"
        if not isinstance(fd, dict):
            raise SchemaError(where, "expected an object")
        if "variations" in fd:
            names = fd["variations"]
            if not isinstance(names, list):
                raise SchemaError(f"{where}.variations", "expected a list of variation names")
            variations = tuple(parse_variation(v, f"{where}.variations[{i}]") for i, v in enumerate(names))
        else:
            n = _int(fd, "generators", where, minimum=2)
            variations = (parse_variation(fd.get("variation", "linear"), f"{where}.variation"),) * n
        if len(variations) < 2:
            raise SchemaError(where, "a flame needs at least 2 generators")
        flames.append(FlameSpec(variations))

    bg_doc = _section(doc, "background")
    mode = bg_doc.get("mode", "fixed")
    if mode == "learnable":
        background = None
    elif mode == "fixed":
        rgb = bg_doc.get("rgb", [1.0, 1.0, 1.0])
        if not isinstance(rgb, list) or len(rgb) != 3:
            raise SchemaError("background.rgb", "expected 3 numbers")
        background = tuple(_float({"v": c}, "v", f"background.rgb[{i}]", 0.0) for i, c in enumerate(rgb))
    else:
        raise SchemaError("background.mode", f"expected 'fixed' or 'learnable', got {mode!r}")

    tr = _section(doc, "train")
    lr_doc = _section(tr, "learning_rates")
    defaults = LearningRates()
    unknown = set(lr_doc) - set(defaults.__dict__)
    if unknown:
        raise SchemaError("train.learning_rates", f"unknown group(s): {', '.join(sorted(unknown))}")
    rates = LearningRates(**{k: _float(lr_doc, k, "train.learning_rates", v) for k, v in defaults.__dict__.items()})
    seed = _int(tr, "seed", "train", 0)
    settings = dict(
        train_width=_int(tr, "width", "train", 200, 4),
        train_height=_int(tr, "height", "train", 200, 4),
        chains=_int(tr, "chains", "train", 10_000, 1),
        steps=_int(tr, "steps", "train", 100, 1),
        warmup=_int(tr, "warmup", "train", 20),
        iterations=_int(tr, "iterations", "train", 1000, 1),
        grad_clip_norm=_float(tr, "grad_clip_norm", "train", 1.0),
    )
    try:
        train = TrainConfig(learning_rates=rates, seed=seed, **settings)
    except ValueError as exc:
        raise SchemaError("train", str(exc)) from None
    init_seed = _int(tr, "init_seed", "train", seed)

    ev = _section(doc, "eval")
    eval_settings = EvalSettings(
        width=_int(ev, "width", "eval", 800, 4),
        height=_int(ev, "height", "eval", 800, 4),
        samples=_int(ev, "samples", "eval", 10_000_000, 1),
        chains=_int(ev, "chains", "eval", 10_000, 1),
        steps=_int(ev, "steps", "eval", 100, 1),
    )

    gc = _section(doc, "gradcheck")
    check = CheckConfig(
        width=_int(gc, "width", "gradcheck", 32, 4),
        height=_int(gc, "height", "gradcheck", 32, 4),
        chains=_int(gc, "chains", "gradcheck", 64, 1),
        steps=_int(gc, "steps", "gradcheck", 20, 1),
        warmup=_int(gc, "warmup", "gradcheck", 5),
        seed=_int(gc, "seed", "gradcheck", seed),
    )

    init_params = doc.get("initial_params")
    if init_params is not None and not isinstance(init_params, str):
        raise SchemaError("initial_params", "expected a path")
    out = doc.get("output_dir", "flamegrad-out")
    if not isinstance(out, str):
        raise SchemaError("output_dir", "expected a path")

    return SceneConfig(
        reference=base_dir / ref,
        scene=SceneSpec(tuple(flames), background),
        train=train,
        init_seed=init_seed,
        eval=eval_settings,
        check=check,
        initial_params=base_dir / init_params if init_params else None,
        output_dir=base_dir / out,
    )


def read_config(path: str | os.PathLike) -> SceneConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return parse_config(load_json(text), path.parent)
    except SchemaError as exc:
        raise CliError(f"{path}: schema error at {exc}") from None


def read_params(path: str | os.PathLike) -> SceneParams:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read parameters {path}: {exc.strerror}") from None
    try:
        return deserialize(text)
    except (SchemaError, ValueError) as exc:
        raise CliError(f"{path}: schema error at {exc}") from None


def initial_scene(cfg: SceneConfig) -> SceneParams:
    if cfg.initial_params is not None:
        return read_params(cfg.initial_params)
    return init_random(cfg.init_seed, cfg.scene)


def _claim(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise CliError(f"{path} already exists (use --force to overwrite)")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    cfg = read_config(args.config)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.init_seed = args.seed
    out_dir = Path(args.out) if args.out else cfg.output_dir
    paths = {name: out_dir / name for name in ("params.json", "loss.csv", "preview.png")}
    for p in paths.values():
        _claim(p, args.force)
    if not cfg.reference.is_file():
        raise CliError(f"reference image not found: {cfg.reference}")
    reference = load_reference(cfg.reference, cfg.train.train_width, cfg.train.train_height)
    scene = initial_scene(cfg)

    every = max(1, cfg.train.iterations // 20)

    def progress(it: int, loss: float, _params: SceneParams) -> None:
        if it % every == 0 or it == cfg.train.iterations - 1:
            log.info("iteration %d  loss %.6f", it, loss)

    try:
        learned, report = optimizer.train(scene, reference, cfg.train, deterministic=args.deterministic,
                                          callback=progress)
    except NonFiniteError as exc:
        raise CliError(f"training aborted: {exc}") from None

    out_dir.mkdir(parents=True, exist_ok=True)
    paths["params.json"].write_text(serialize(learned), encoding="utf-8")
    with open(paths["loss.csv"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "loss"])
        for i, loss in enumerate(report.loss_history):
            writer.writerow([i, repr(loss)])
    preview = optimizer.render_final(learned, cfg.train.train_width, cfg.train.train_height,
                                     cfg.train.samples_per_flame, seed=cfg.train.seed, chains=cfg.train.chains,
                                     steps=cfg.train.steps, warmup=cfg.train.warmup,
                                     deterministic=args.deterministic)
    save_png(preview, paths["preview.png"])
    dead = sum(map(sum, report.dead_samples))
    print(f"trained {cfg.train.iterations} iterations in {report.wall_time:.1f}s: "
          f"loss {report.loss_history[0]:.6f} -> {report.loss_history[-1]:.6f}, {dead} dead samples")
    print(f"wrote {paths['params.json']}, {paths['loss.csv']}, {paths['preview.png']}")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    ev = read_config(args.config).eval if args.config else EvalSettings()
    # explicit flags beat the config's eval block
    for name in ("width", "height", "samples", "chains", "steps"):
        if getattr(args, name) is not None:
            setattr(ev, name, getattr(args, name))
    scene = read_params(args.params)
    out = _claim(Path(args.out), args.force)
    image = optimizer.render_final(scene, ev.width, ev.height, ev.samples, seed=args.seed,
                                   chains=ev.chains, steps=ev.steps, deterministic=args.deterministic)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(image, out)
    print(f"wrote {out} ({ev.width}x{ev.height}, {ev.samples} samples per flame)")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = read_config(args.config)
    if not cfg.reference.is_file():
        raise CliError(f"reference image not found: {cfg.reference}")
    reference = load_reference(cfg.reference, cfg.check.width, cfg.check.height)
    scene = initial_scene(cfg)
    linear = all(g.variation == Variation.LINEAR for fl in scene.flames for g in fl.generators)
    tol = LINEAR_TOLERANCE if linear else NONLINEAR_TOLERANCE
    report = optimizer.gradient_check(scene, reference, cfg.check)
    for group, err in report.group_errors().items():
        print(f"{group:16s} max relative error {err:.3e}")
    worst = report.max_relative_error
    if worst > tol:
        print(f"FAIL: {worst:.3e} > {tol:.0e} at {report.worst_path}")
        return 1
    print(f"OK: max relative error {worst:.3e} <= {tol:.0e} ({int(report.checked.sum())} parameters checked)")
    return 0


def cmd_reference(args: argparse.Namespace) -> int:
    out = _claim(Path(args.out), args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(three_discs(args.width, args.height), out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flamegrad", description="Learn fractal flames from a reference image.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize flame parameters against a reference image")
    p.add_argument("config")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    p.add_argument("--seed", type=int, help="override the training and init seed")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render learned parameters at evaluation quality")
    p.add_argument("params")
    p.add_argument("--config", help="take defaults from this config's eval settings")
    p.add_argument("--width", type=int, help="default 800")
    p.add_argument("--height", type=int, help="default 800")
    p.add_argument("--samples", type=int, help="samples per flame, default 10^7")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=int, help="default 10000")
    p.add_argument("--steps", type=int, help="default 100")
    p.add_argument("--out", default="render.png")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("reference", help="write the synthetic three-disc reference image")
    p.add_argument("out")
    p.add_argument("--width", type=int, default=200)
    p.add_argument("--height", type=int, default=200)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_reference)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
