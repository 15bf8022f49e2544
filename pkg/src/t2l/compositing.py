"""Image and edit-layer value types plus the compositing algebra.

All pixel data is float tensor in [0, 1], shape (H, W, 3) for images and
(H, W) for opacity maps. 8-bit conversion happens only at file boundaries
(see :mod:`t2l.io`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

__all__ = [
    "GREEN",
    "Image",
    "EditLayer",
    "TextBundle",
    "ShapeError",
    "composite",
    "green_screen_composite",
]

#: Default chroma-key background: pure green in linear [0, 1] space.
GREEN = (0.0, 1.0, 0.0)


class ShapeError(ValueError):
    """Spatial dimensions of two operands do not agree."""


@dataclass(frozen=True)
class Image:
    """An RGB image: (H, W, 3) float tensor with values in [0, 1]."""

    pixels: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise ShapeError(f"expected (H, W, 3) pixels, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ShapeError(f"image must be at least 1x1, got {tuple(self.pixels.shape)}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def chw(self) -> torch.Tensor:
        """(3, H, W) view for convolutional code."""
        return self.pixels.permute(2, 0, 1)

    @staticmethod
    def from_chw(t: torch.Tensor) -> "Image":
        if t.ndim == 4:
            if t.shape[0] != 1:
                raise ShapeError(f"expected a single image, got batch of {t.shape[0]}")
            t = t[0]
        return Image(t.permute(1, 2, 0))

    def validate_range(self) -> "Image":
        """Assert the [0, 1] invariant; intended for I/O boundaries."""
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
        return self


@dataclass(frozen=True)
class EditLayer:
    """An RGBA edit layer: color image plus opacity map of matching dims."""

    color: Image
    alpha: torch.Tensor

    def __post_init__(self):
        if self.alpha.ndim != 2:
            raise ShapeError(f"expected (H, W) alpha, got {tuple(self.alpha.shape)}")
        if self.alpha.shape != self.color.pixels.shape[:2]:
            raise ShapeError(
                f"alpha {tuple(self.alpha.shape)} does not match "
                f"color {tuple(self.color.pixels.shape[:2])}"
            )

    @property
    def height(self) -> int:
        return self.color.height

    @property
    def width(self) -> int:
        return self.color.width

    def rgba(self) -> torch.Tensor:
        """(H, W, 4) packed view."""
        return torch.cat([self.color.pixels, self.alpha.unsqueeze(-1)], dim=-1)

    @staticmethod
    def from_rgba(t: torch.Tensor) -> "EditLayer":
        if t.ndim != 3 or t.shape[-1] != 4:
            raise ShapeError(f"expected (H, W, 4), got {tuple(t.shape)}")
        return EditLayer(color=Image(t[..., :3]), alpha=t[..., 3])


@dataclass(frozen=True)
class TextBundle:
    """The prompts steering one edit.

    ``target`` drives the composite, ``screen_template`` supervises the layer
    over a green background, and ``roi`` names the region the edit should
    attach to (used by the directional and bootstrapping terms).
    """

    target: str
    screen_template: str = "{} over a green screen"
    roi: str | None = None
    screen_subject: str | None = None
    extra_targets: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.target:
            raise ValueError("target prompt must be non-empty")
        if self.screen_template.count("{}") != 1:
            raise ValueError(
                f"screen template must contain exactly one '{{}}' placeholder: "
                f"{self.screen_template!r}"
            )

    @property
    def targets(self) -> tuple[str, ...]:
        return (self.target, *self.extra_targets)

    def screen_prompt(self) -> str:
        """The screen template instantiated with the screen subject (default: target)."""
        return self.screen_template.format(self.screen_subject or self.target)

    def with_target(self, target: str) -> "TextBundle":
        return replace(self, target=target, extra_targets=())


def composite(layer: EditLayer, base: Image) -> Image:
    """Blend ``layer`` over ``base``: alpha * color + (1 - alpha) * base.

    Differentiable in all operands. Output clamped to [0, 1] to absorb
    float rounding; with alpha == 0 the result is bit-identical to ``base``.
    """
    if (layer.height, layer.width) != (base.height, base.width):
        raise ShapeError(
            f"layer {(layer.height, layer.width)} does not match "
            f"base {(base.height, base.width)}"
        )
    a = layer.alpha.unsqueeze(-1)
    out = a * layer.color.pixels + (1.0 - a) * base.pixels
    return Image(out.clamp(0.0, 1.0))


def green_screen_composite(layer: EditLayer, green=GREEN) -> Image:
    """Blend ``layer`` over a constant background color (default pure green)."""
    bg = layer.color.pixels.new_tensor(green).expand_as(layer.color.pixels)
    return composite(layer, Image(bg))
