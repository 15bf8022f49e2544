"""Internal training distribution: augmentations of the single input pair.

One source image and its prompt are expanded into a stream of diverse
(image, text) examples; a second stage of lightweight geometric views is
applied right before embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

from .compositing import Image, TextBundle
from .imageops import resize_chw, resize_short_side

__all__ = [
    "TEXT_TEMPLATES",
    "TextTemplateBank",
    "AugmentationConfig",
    "InternalExample",
    "clone_rng",
    "augment_image",
    "augment_text",
    "sample_example",
    "clip_views",
    "clip_view_batch",
]

#: Neutral phrasings that vary the text embedding without changing meaning.
TEXT_TEMPLATES = (
    "photo of {}.",
    "high quality photo of {}.",
    "a photo of {}.",
    "the photo of {}.",
    "image of {}.",
    "an image of {}.",
    "high quality image of {}.",
    "a high quality image of {}.",
    "the {}.",
    "a {}.",
    "{}.",
    "{}",
    "{}!",
    "{}...",
)


@dataclass(frozen=True)
class TextTemplateBank:
    templates: tuple[str, ...] = TEXT_TEMPLATES

    def __post_init__(self):
        if not self.templates:
            raise ValueError("template bank is empty")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ValueError(f"template must contain exactly one '{{}}': {t!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "TextTemplateBank":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line.strip()))


@dataclass(frozen=True)
class AugmentationConfig:
    """Augmentation amplitudes for the internal dataset and the view stage."""

    crop_fraction: float = 0.85
    scale_range: tuple[float, float] = (0.8, 1.2)
    hflip_prob: float = 0.5
    brightness: tuple[float, float] = (0.9, 1.1)
    contrast: tuple[float, float] = (0.9, 1.1)
    saturation: tuple[float, float] = (0.9, 1.1)
    hue: float = 0.02
    clip_view_count: int = 8
    clip_crop_area: float = 0.9
    unaugmented_period: int = 75
    enabled: bool = True
    templates: TextTemplateBank = field(default_factory=TextTemplateBank)

    def __post_init__(self):
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if self.scale_range[0] <= 0 or self.scale_range[1] < self.scale_range[0]:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.clip_view_count < 1:
            raise ValueError("clip_view_count must be >= 1")
        if self.unaugmented_period < 1:
            raise ValueError("unaugmented_period must be >= 1")

    @classmethod
    def image_defaults(cls) -> "AugmentationConfig":
        return cls()

    @classmethod
    def video_defaults(cls) -> "AugmentationConfig":
        return cls(crop_fraction=0.95)


@dataclass(frozen=True)
class InternalExample:
    image: Image
    text: str
    is_augmented: bool


def clone_rng(rng: np.random.Generator) -> np.random.Generator:
    """An independent generator that will replay ``rng``'s future stream."""
    twin = np.random.Generator(type(rng.bit_generator)())
    twin.bit_generator.state = rng.bit_generator.state
    return twin


def augment_image(src: Image, cfg: AugmentationConfig, rng: np.random.Generator) -> Image:
    """Random crop, aspect-preserving rescale, horizontal flip, color jitter."""
    chw = src.chw()
    h, w = src.height, src.width

    crop_h = max(1, math.floor(cfg.crop_fraction * h))
    crop_w = max(1, math.floor(cfg.crop_fraction * w))
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    chw = chw[:, top : top + crop_h, left : left + crop_w]

    scale = float(rng.uniform(*cfg.scale_range))
    new_h, new_w = max(1, round(crop_h * scale)), max(1, round(crop_w * scale))
    if (new_h, new_w) != (crop_h, crop_w):
        chw = resize_chw(chw, new_h, new_w)

    if rng.random() < cfg.hflip_prob:
        chw = torch.flip(chw, dims=[-1])

    brightness = float(rng.uniform(*cfg.brightness))
    contrast = float(rng.uniform(*cfg.contrast))
    saturation = float(rng.uniform(*cfg.saturation))
    hue = float(rng.uniform(-cfg.hue, cfg.hue))
    if brightness != 1.0:
        chw = TF.adjust_brightness(chw, brightness)
    if contrast != 1.0:
        chw = TF.adjust_contrast(chw, contrast)
    if saturation != 1.0:
        chw = TF.adjust_saturation(chw, saturation)
    if hue != 0.0:
        chw = TF.adjust_hue(chw, hue)

    return Image(chw.clamp(0.0, 1.0).permute(1, 2, 0))


def augment_text(t: str, bank: TextTemplateBank, rng: np.random.Generator) -> str:
    """Plug ``t`` into a uniformly sampled template."""
    if not t:
        raise ValueError("prompt must be non-empty")
    template = bank.templates[int(rng.integers(len(bank.templates)))]
    return template.format(t)


def sample_example(
    step: int,
    src: Image,
    bundle: TextBundle,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
) -> InternalExample:
    """Draw the training example for ``step`` (1-based).

    Every ``unaugmented_period`` steps (or always, when augmentation is
    disabled) the raw pair passes through untouched.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if not cfg.enabled or step % cfg.unaugmented_period == 0:
        return InternalExample(image=src, text=bundle.target, is_augmented=False)
    targets = bundle.targets
    target = targets[int(rng.integers(len(targets)))] if len(targets) > 1 else targets[0]
    return InternalExample(
        image=augment_image(src, cfg, rng),
        text=augment_text(target, cfg.templates, rng),
        is_augmented=True,
    )


def clip_view_batch(
    chw: torch.Tensor,
    n: int,
    rng: np.random.Generator,
    augment: bool = True,
    crop_area: float = 0.9,
    target: int = 224,
) -> torch.Tensor:
    """(C, H, W) -> (n, C, h, w) embedding-ready views.

    The input is resized so its shorter side equals ``target``; each view is
    a random crop of ``crop_area`` of that image (shared crop dims, so views
    batch) plus an independent horizontal flip. Two calls consuming
    identical rng streams produce spatially matched views.
    """
    if n < 1:
        raise ValueError(f"need at least one view, got n={n}")
    resized = resize_short_side(chw, target)
    if not augment:
        return resized.unsqueeze(0).repeat(n, *([1] * resized.ndim))
    h, w = resized.shape[-2:]
    crop_h = max(1, round(h * math.sqrt(crop_area)))
    crop_w = max(1, round(w * math.sqrt(crop_area)))
    views = []
    for _ in range(n):
        top = int(rng.integers(0, h - crop_h + 1))
        left = int(rng.integers(0, w - crop_w + 1))
        view = resized[..., top : top + crop_h, left : left + crop_w]
        if rng.random() < 0.5:
            view = torch.flip(view, dims=[-1])
        views.append(view)
    return torch.stack(views)


def clip_views(
    img: Image, n: int, rng: np.random.Generator, augment: bool = True, crop_area: float = 0.9
) -> list[Image]:
    """Image-typed wrapper over :func:`clip_view_batch`."""
    batch = clip_view_batch(img.chw(), n, rng, augment=augment, crop_area=crop_area)
    return [Image(v.permute(1, 2, 0)) for v in batch]
