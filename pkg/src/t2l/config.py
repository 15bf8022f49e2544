"""Run configuration: schema validation with per-mode defaults.

A run is described by one structured document (YAML/JSON or a plain dict
assembled by the CLI). Unknown keys are rejected; every error names the
offending field path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .compositing import GREEN, TextBundle
from .dataset import AugmentationConfig, TextTemplateBank
from .generator import GeneratorConfig
from .losses import LossToggles, LossWeights
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "MissingPathError",
    "BackendSpec",
    "RunConfig",
    "validate_config",
    "load_config_file",
]

MODES = ("image", "video")
LAYER_CHOICES = ("fg", "bg", "both")
BACKEND_KINDS = ("reference", "synthetic")


class ConfigError(ValueError):
    """Invalid run configuration; message carries the field path."""


class MissingPathError(ConfigError):
    """A referenced input path does not exist (an I/O failure, not a schema one)."""


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "reference"
    weights_path: str | None = None
    vocab_path: str | None = None
    cache_dir: str | None = None
    seed: int = 0
    relevancy_start_layer: int = 0


@dataclass(frozen=True)
class RunConfig:
    mode: str
    bundle: TextBundle
    out_dir: str
    train: TrainConfig
    backend: BackendSpec
    input_path: str | None = None
    package_path: str | None = None
    layer_choice: str = "fg"
    relevancy_path: str | None = None
    green: tuple[float, float, float] = GREEN
    bit_depth: int = 8


class _Node:
    """One mapping level of the raw document; tracks consumed keys."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
        self.data = dict(data)
        self.path = path

    def _label(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind, default=None, required: bool = False):
        if key not in self.data:
            if required:
                raise ConfigError(f"{self._label(key)}: missing required field")
            return default
        value = self.data.pop(key)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not None and not isinstance(value, kind):
            raise ConfigError(
                f"{self._label(key)}: expected {getattr(kind, '__name__', kind)}, "
                f"got {type(value).__name__} ({value!r})"
            )
        return value

    def child(self, key: str) -> "_Node":
        return _Node(self.data.pop(key, {}), self._label(key))

    def finish(self) -> None:
        if self.data:
            unknown = ", ".join(sorted(self.data))
            raise ConfigError(f"{self.path or '<root>'}: unknown keys: {unknown}")


def _positive(node: _Node, key: str, value: float | None, allow_zero: bool = False):
    if value is None:
        return
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ConfigError(f"{node._label(key)}: must be {bound}, got {value}")


def _weights(node: _Node, defaults: LossWeights) -> LossWeights:
    out = defaults
    for key in ("lambda_g", "lambda_s", "lambda_r", "gamma", "bootstrap_w0"):
        value = node.take(key, float)
        if value is not None:
            _positive(node, key, value, allow_zero=True)
            out = replace(out, **{key: value})
    node.finish()
    return out


def _toggles(node: _Node, defaults: LossToggles) -> LossToggles:
    out = defaults
    for key in ("composition", "screen", "structure", "sparsity", "bootstrap", "directional"):
        value = node.take(key, bool)
        if value is not None:
            out = replace(out, **{key: value})
    node.finish()
    return out


def _augmentation(node: _Node, defaults: AugmentationConfig) -> AugmentationConfig:
    out = defaults
    scalar_keys = {
        "crop_fraction": float,
        "hflip_prob": float,
        "hue": float,
        "clip_view_count": int,
        "clip_crop_area": float,
        "unaugmented_period": int,
        "enabled": bool,
    }
    for key, kind in scalar_keys.items():
        value = node.take(key, kind)
        if value is not None:
            out = replace(out, **{key: value})
    for key in ("scale_range", "brightness", "contrast", "saturation"):
        value = node.take(key, (list, tuple))
        if value is not None:
            if len(value) != 2:
                raise ConfigError(f"{node._label(key)}: expected [low, high]")
            out = replace(out, **{key: (float(value[0]), float(value[1]))})
    template_file = node.take("template_file", str)
    if template_file is not None:
        if not Path(template_file).exists():
            raise ConfigError(f"{node._label('template_file')}: no such file {template_file}")
        out = replace(out, templates=TextTemplateBank.from_file(template_file))
    node.finish()
    try:
        return replace(out)  # re-run dataclass validation
    except ValueError as exc:
        raise ConfigError(f"{node.path}: {exc}") from exc


def _generator(node: _Node, defaults: GeneratorConfig) -> GeneratorConfig:
    out = defaults
    for key, kind in (("encoder_depth", int), ("base_channels", int), ("negative_slope", float)):
        value = node.take(key, kind)
        if value is not None:
            out = replace(out, **{key: value})
    node.finish()
    try:
        return replace(out)
    except ValueError as exc:
        raise ConfigError(f"{node.path}: {exc}") from exc


def _backend(node: _Node) -> BackendSpec:
    kind = node.take("kind", str, default="reference")
    if kind not in BACKEND_KINDS:
        raise ConfigError(f"{node._label('kind')}: must be one of {BACKEND_KINDS}, got {kind!r}")
    spec = BackendSpec(
        kind=kind,
        weights_path=node.take("weights_path", str),
        vocab_path=node.take("vocab_path", str),
        cache_dir=node.take("cache_dir", str),
        seed=node.take("seed", int, default=0),
        relevancy_start_layer=node.take("relevancy_start_layer", int, default=0),
    )
    node.finish()
    return spec


def _train(node: _Node, defaults: TrainConfig, seed: int) -> TrainConfig:
    out = replace(defaults, seed=seed)
    scalar_keys = {
        "lr0": float,
        "weight_decay": float,
        "momentum": float,
        "lr_decay_gamma": float,
        "lr_floor": float,
        "total_steps": int,
        "grad_accumulation": int,
        "anneal_bootstrap": bool,
    }
    for key, kind in scalar_keys.items():
        value = node.take(key, kind)
        if value is not None:
            out = replace(out, **{key: value})
    clip = node.take("grad_clip_norm", float)
    if clip is not None:
        _positive(node, "grad_clip_norm", clip)
        out = replace(out, grad_clip_norm=clip)
    node.finish()
    try:
        return replace(out)
    except ValueError as exc:
        raise ConfigError(f"{node.path}: {exc}") from exc


def validate_config(raw: dict[str, Any]) -> RunConfig:
    """Apply per-mode defaults and validate the whole document."""
    root = _Node(raw, "")
    mode = root.take("mode", str, required=True)
    if mode not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}, got {mode!r}")

    prompts = root.child("prompts")
    target = prompts.take("target", str, required=True)
    if not target.strip():
        raise ConfigError("prompts.target: must be non-empty")
    extra = prompts.take("extra_targets", (list, tuple), default=())
    screen_template = prompts.take(
        "screen_template", str, default="{} over a green screen"
    )
    try:
        bundle = TextBundle(
            target=target,
            screen_template=screen_template,
            roi=prompts.take("roi", str),
            screen_subject=prompts.take("screen_subject", str),
            extra_targets=tuple(extra),
        )
    except ValueError as exc:
        raise ConfigError(f"prompts: {exc}") from exc
    prompts.finish()

    out_dir = root.take("output_dir", str, required=True)
    seed = root.take("seed", int, default=0)

    if mode == "image":
        train_defaults = TrainConfig.image_defaults()
    else:
        train_defaults = TrainConfig.video_defaults()
    weights = _weights(root.child("weights"), train_defaults.weights)
    toggles = _toggles(root.child("toggles"), train_defaults.toggles)
    augmentation = _augmentation(root.child("augmentation"), train_defaults.augmentation)
    generator = _generator(root.child("generator"), train_defaults.generator)
    train = _train(root.child("trainer"), train_defaults, seed)
    train = replace(
        train, weights=weights, toggles=toggles, augmentation=augmentation, generator=generator
    )
    backend = _backend(root.child("backend"))

    input_path = root.take("input", str)
    package_path = root.take("package", str)
    layer_choice = root.take("layer", str, default="fg")
    if layer_choice not in LAYER_CHOICES:
        raise ConfigError(f"layer: must be one of {LAYER_CHOICES}, got {layer_choice!r}")
    if mode == "image":
        if not input_path:
            raise ConfigError("input: missing required field for image mode")
        if not Path(input_path).exists():
            raise MissingPathError(f"input: no such file {input_path}")
    else:
        if not package_path:
            raise ConfigError("package: missing required field for video mode")
        if not Path(package_path).exists():
            raise MissingPathError(f"package: no such directory {package_path}")

    relevancy_path = root.take("relevancy_map", str)
    if relevancy_path is not None and not Path(relevancy_path).exists():
        raise MissingPathError(f"relevancy_map: no such file {relevancy_path}")

    green_raw = root.take("green", (list, tuple), default=list(GREEN))
    if len(green_raw) != 3 or any(not 0.0 <= float(c) <= 1.0 for c in green_raw):
        raise ConfigError(f"green: expected three values in [0, 1], got {green_raw}")

    bit_depth = root.take("bit_depth", int, default=8)
    if bit_depth not in (8, 16):
        raise ConfigError(f"bit_depth: must be 8 or 16, got {bit_depth}")

    root.finish()
    return RunConfig(
        mode=mode,
        bundle=bundle,
        out_dir=out_dir,
        train=train,
        backend=backend,
        input_path=input_path,
        package_path=package_path,
        layer_choice=layer_choice,
        relevancy_path=relevancy_path,
        green=tuple(float(c) for c in green_raw),
        bit_depth=bit_depth,
    )


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data
