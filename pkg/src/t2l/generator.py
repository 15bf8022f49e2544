"""The trainable image -> edit-layer mapping (U-Net with skip projections)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .compositing import EditLayer, Image

__all__ = ["GeneratorConfig", "GeneratorState", "EditLayerUNet", "build", "forward"]


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture of the edit-layer generator.

    ``encoder_depth`` counts resolution levels including the bottleneck; the
    decoder mirrors them. Spatial dims must be divisible by
    2**(encoder_depth - 1) after internal padding.
    """

    encoder_depth: int = 7
    base_channels: int = 128
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.encoder_depth < 2:
            raise ValueError(f"encoder_depth must be >= 2, got {self.encoder_depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.encoder_depth - 1)


def _conv_block(in_ch: int, out_ch: int, stride: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(slope, inplace=True),
    )


class EditLayerUNet(nn.Module):
    """Symmetric encoder/decoder with 1x1 skip projections and an RGBA head.

    Downsampling is by stride-2 convolutions, upsampling by nearest-neighbor
    resize followed by a convolution. All intermediate widths are constant.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        ch, slope, depth = config.base_channels, config.negative_slope, config.encoder_depth
        self.encoder = nn.ModuleList(
            [_conv_block(3, ch, stride=1, slope=slope)]
            + [_conv_block(ch, ch, stride=2, slope=slope) for _ in range(depth - 1)]
        )
        self.skips = nn.ModuleList(
            nn.Conv2d(ch, ch, kernel_size=1) for _ in range(depth - 1)
        )
        self.decoder = nn.ModuleList(
            _conv_block(2 * ch, ch, stride=1, slope=slope) for _ in range(depth - 1)
        )
        self.head = nn.Conv2d(ch, 4, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = []
        for level, block in enumerate(self.encoder):
            x = block(x)
            if level < len(self.encoder) - 1:
                feats.append(self.skips[level](x))
        for block, skip in zip(self.decoder, reversed(feats)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


@dataclass
class GeneratorState:
    """A generator network plus its training step counter."""

    model: EditLayerUNet
    config: GeneratorConfig
    step: int = 0

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())


def build(config: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> GeneratorState:
    """Deterministically initialize a generator under ``seed``.

    The model starts in evaluation mode; the trainer switches it to training
    mode for the duration of the optimization.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = EditLayerUNet(config)
    model.eval()
    return GeneratorState(model=model, config=config)


def _pad_to_divisor(chw: torch.Tensor, divisor: int) -> tuple[torch.Tensor, int, int]:
    h, w = chw.shape[-2:]
    pad_h = (-h) % divisor
    pad_w = (-w) % divisor
    if pad_h == 0 and pad_w == 0:
        return chw, 0, 0
    # reflect padding cannot exceed dim - 1; replicate covers tiny inputs
    mode = "reflect" if (pad_h < h and pad_w < w) else "replicate"
    return F.pad(chw, (0, pad_w, 0, pad_h), mode=mode), pad_h, pad_w


def forward_chw(state: GeneratorState, chw: torch.Tensor) -> torch.Tensor:
    """(N, 3, H, W) -> (N, 4, H, W) RGBA in (0, 1); pads and crops internally."""
    padded, pad_h, pad_w = _pad_to_divisor(chw, state.config.divisor)
    out = state.model(padded)
    h, w = chw.shape[-2:]
    return out[..., :h, :w]


def forward(state: GeneratorState, img: Image) -> EditLayer:
    """Synthesize the edit layer for ``img`` (same spatial dims)."""
    rgba = forward_chw(state, img.chw().unsqueeze(0))[0]
    return EditLayer(color=Image(rgba[:3].permute(1, 2, 0)), alpha=rgba[3])
