"""Video training: generators fit on atlas crops, losses on rendered frames."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .atlas import (
    BACKGROUND,
    AtlasCrop,
    AtlasPackage,
    VideoSegmentSample,
    sample_bilinear,
    uv_to_texel,
)
from .backend.base import EmbeddingBackend
from .compositing import EditLayer, Image, TextBundle, composite
from .dataset import AugmentationConfig, augment_text, clip_view_batch, clone_rng
from .generator import GeneratorState, build, forward_chw
from .imageops import resize_chw
from .losses import bootstrap_loss, total_loss
from .training import (
    Madgrad,
    TrainConfig,
    TrainingDivergedError,
    TrainRunRecord,
    _log_progress,
    bootstrap_weight_at,
    compute_loss_terms,
    lr_at,
    mean_loss_terms,
    train_step_losses,
)

__all__ = [
    "TrackedAugmentation",
    "augment_atlas_crop",
    "sample_segment",
    "train_video",
    "BACKGROUND_FULL_PASS_DOWNSCALE",
    "SEGMENT_CROP_FRACTION_RANGE",
]

#: Full-atlas passes downscale the background atlas by this factor.
BACKGROUND_FULL_PASS_DOWNSCALE = 3

#: Segment crop dims are drawn uniformly from this fraction of frame dims.
SEGMENT_CROP_FRACTION_RANGE = (0.4, 0.8)

FRAME_OFFSET = 2


@dataclass(frozen=True)
class TrackedAugmentation:
    """Geometric augmentation of an atlas crop with an invertible coord map.

    Maps fractional coordinates of the un-augmented crop to coordinates of
    the augmented image (sub-crop, bilinear resize, optional horizontal
    flip). Lets edit layers generated from augmented crops be rendered back
    through the stored UV grids.
    """

    top: int
    left: int
    crop_h: int
    crop_w: int
    out_h: int
    out_w: int
    flip: bool

    def apply(self, xs: torch.Tensor, ys: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Crop coords -> augmented-image coords, plus an in-bounds mask."""
        x1 = xs - self.left
        y1 = ys - self.top
        valid = (
            (x1 >= 0.0)
            & (x1 <= self.crop_w - 1.0)
            & (y1 >= 0.0)
            & (y1 <= self.crop_h - 1.0)
        )
        x2 = (x1 + 0.5) * (self.out_w / self.crop_w) - 0.5
        y2 = (y1 + 0.5) * (self.out_h / self.crop_h) - 0.5
        if self.flip:
            x2 = (self.out_w - 1.0) - x2
        return x2, y2, valid

    def invert(self, xs: torch.Tensor, ys: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Augmented-image coords -> un-augmented crop coords."""
        if self.flip:
            xs = (self.out_w - 1.0) - xs
        x1 = (xs + 0.5) * (self.crop_w / self.out_w) - 0.5
        y1 = (ys + 0.5) * (self.crop_h / self.out_h) - 0.5
        return x1 + self.left, y1 + self.top


def augment_atlas_crop(
    crop_img: Image, cfg: AugmentationConfig, rng: np.random.Generator
) -> tuple[Image, TrackedAugmentation]:
    """The internal-dataset augmentation chain with tracked geometry."""
    import math

    import torchvision.transforms.v2.functional as TF

    h, w = crop_img.height, crop_img.width
    crop_h = max(1, math.floor(cfg.crop_fraction * h))
    crop_w = max(1, math.floor(cfg.crop_fraction * w))
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    chw = crop_img.chw()[:, top : top + crop_h, left : left + crop_w]

    scale = float(rng.uniform(*cfg.scale_range))
    out_h, out_w = max(1, round(crop_h * scale)), max(1, round(crop_w * scale))
    if (out_h, out_w) != (crop_h, crop_w):
        chw = resize_chw(chw, out_h, out_w)

    flip = bool(rng.random() < cfg.hflip_prob)
    if flip:
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

    track = TrackedAugmentation(
        top=top, left=left, crop_h=crop_h, crop_w=crop_w,
        out_h=out_h, out_w=out_w, flip=flip,
    )
    return Image(chw.clamp(0.0, 1.0).permute(1, 2, 0)), track


def sample_segment(
    pkg: AtlasPackage, rng: np.random.Generator, offset: int = FRAME_OFFSET
) -> VideoSegmentSample:
    """Uniformly draw a valid spatio-temporal crop."""
    lo, hi = SEGMENT_CROP_FRACTION_RANGE
    t = int(rng.integers(offset, pkg.frame_count - offset))
    w = max(2, round(float(rng.uniform(lo, hi)) * pkg.frame_width))
    h = max(2, round(float(rng.uniform(lo, hi)) * pkg.frame_height))
    x = int(rng.integers(0, pkg.frame_width - w + 1))
    y = int(rng.integers(0, pkg.frame_height - h + 1))
    return VideoSegmentSample(frame=t, x=x, y=y, width=w, height=h, offset=offset)


def _render_through_augmentation(
    rgba_hwc: torch.Tensor,
    content_hwc: torch.Tensor,
    crop: AtlasCrop,
    track: TrackedAugmentation,
    uv: torch.Tensor,
    atlas_resolution: int,
) -> tuple[EditLayer, Image]:
    """Sample the augmented-crop edit layer and content at frame-pixel UVs."""
    xs, ys = uv_to_texel(uv, atlas_resolution)
    xs = xs - crop.window.col_min
    ys = ys - crop.window.row_min
    in_window = (
        (xs >= 0.0)
        & (xs <= crop.window.width - 1.0)
        & (ys >= 0.0)
        & (ys <= crop.window.height - 1.0)
    )
    ax, ay, in_aug = track.apply(xs, ys)
    valid = (in_window & in_aug).to(rgba_hwc.dtype)
    rgba = sample_bilinear(rgba_hwc, ax, ay)
    content = sample_bilinear(content_hwc, ax, ay)
    layer = EditLayer(color=Image(rgba[..., :3]), alpha=rgba[..., 3] * valid)
    return layer, Image(content.clamp(0.0, 1.0))


def _aligned_relevancy_crop(
    atlas_relevancy: torch.Tensor,
    crop: AtlasCrop,
    track: TrackedAugmentation,
    layer_window,
) -> torch.Tensor:
    """Warp the atlas-level relevancy map into augmented-crop pixel space."""
    res_h, res_w = atlas_relevancy.shape
    ys, xs = torch.meshgrid(
        torch.arange(track.out_h, dtype=torch.float32),
        torch.arange(track.out_w, dtype=torch.float32),
        indexing="ij",
    )
    cx, cy = track.invert(xs, ys)
    gx = cx + (crop.window.col_min - layer_window.col_min)
    gy = cy + (crop.window.row_min - layer_window.row_min)
    rx = gx / max(layer_window.width - 1, 1) * (res_w - 1)
    ry = gy / max(layer_window.height - 1, 1) * (res_h - 1)
    return sample_bilinear(atlas_relevancy.unsqueeze(-1), rx, ry)[..., 0]


def _resolve_atlas_relevancy(
    layer_img: Image,
    bundle: TextBundle,
    cfg: TrainConfig,
    backend: EmbeddingBackend,
    relevancy: torch.Tensor | None,
) -> torch.Tensor | None:
    if not cfg.toggles.bootstrap:
        return None
    if relevancy is not None:
        return relevancy.detach().float()
    if bundle.roi is None:
        return None
    return backend.relevancy_map(layer_img, bundle.roi).values


def train_video(
    pkg: AtlasPackage,
    layer_choice: str,
    bundle: TextBundle,
    cfg: TrainConfig,
    backend: EmbeddingBackend,
    relevancy: torch.Tensor | None = None,
) -> tuple[GeneratorState, TrainRunRecord]:
    """Fit one layer's generator on atlas crops rendered back to frames.

    Each step: sample a 3-frame segment, take its minimal atlas crop,
    augment it, generate an edit layer, render edit + content back to the
    frame crops, and apply the image objective per frame (plus one direct
    crop pass). Every ``unaugmented_period`` steps the whole atlas is passed
    directly, with the background atlas downscaled.
    """
    start = time.monotonic()
    layer = pkg.layer(layer_choice)
    rng = np.random.default_rng(cfg.seed)
    gen = build(cfg.generator, seed=cfg.seed)
    opt = Madgrad(
        gen.model.parameters(),
        lr=cfg.lr0,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    atlas_relevancy = _resolve_atlas_relevancy(layer.image(), bundle, cfg, backend, relevancy)
    record = TrainRunRecord(seed=cfg.seed, config=asdict(cfg))
    full_atlas_img = layer.image()
    if layer_choice == BACKGROUND:
        chw = resize_chw(
            full_atlas_img.chw(),
            max(1, layer.window.height // BACKGROUND_FULL_PASS_DOWNSCALE),
            max(1, layer.window.width // BACKGROUND_FULL_PASS_DOWNSCALE),
        )
        full_atlas_img = Image(chw.permute(1, 2, 0).clamp(0.0, 1.0))

    gen.model.train()
    for step in range(1, cfg.total_steps + 1):
        lr = lr_at(step - 1, cfg)
        for group in opt.param_groups:
            group["lr"] = lr

        if step % cfg.augmentation.unaugmented_period == 0 or not cfg.augmentation.enabled:
            total, report = train_step_losses(
                gen, full_atlas_img, bundle, bundle.target, cfg, backend,
                atlas_relevancy, rng,
            )
        else:
            total, report = _video_step(
                gen, pkg, layer_choice, bundle, cfg, backend, atlas_relevancy, rng
            )
        if not report.is_finite():
            raise TrainingDivergedError(step, report)

        if isinstance(total, torch.Tensor):
            (total / cfg.grad_accumulation).backward()
            if step % cfg.grad_accumulation == 0:
                if cfg.grad_clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(gen.model.parameters(), cfg.grad_clip_norm)
                opt.step()
                opt.zero_grad(set_to_none=True)
        gen.step = step
        record.history.append(report)
        _log_progress(step, lr, report)

    gen.model.eval()
    record.wall_clock_s = time.monotonic() - start
    return gen, record


def _video_step(
    gen: GeneratorState,
    pkg: AtlasPackage,
    layer_choice: str,
    bundle: TextBundle,
    cfg: TrainConfig,
    backend: EmbeddingBackend,
    atlas_relevancy: torch.Tensor | None,
    rng: np.random.Generator,
):
    from .atlas import crop_from_segment

    layer = pkg.layer(layer_choice)
    segment = sample_segment(pkg, rng)
    crop = crop_from_segment(pkg, segment, layer_choice)
    aug_img, track = augment_atlas_crop(crop.pixels, cfg.augmentation, rng)

    targets = bundle.targets
    target = targets[int(rng.integers(len(targets)))] if len(targets) > 1 else targets[0]
    step_text = augment_text(target, cfg.augmentation.templates, rng)

    rgba = forward_chw(gen, aug_img.chw().unsqueeze(0))[0].permute(1, 2, 0)
    content_hwc = aug_img.pixels

    parts = []
    for i in range(crop.uv_per_frame.shape[0]):
        frame_layer, frame_content = _render_through_augmentation(
            rgba, content_hwc, crop, track, crop.uv_per_frame[i], pkg.atlas_resolution
        )
        parts.append(
            compute_loss_terms(
                frame_layer, frame_content, bundle, step_text, cfg, backend, rng
            )
        )

    # one sampled frame crop fed straight through the generator
    direct_idx = int(rng.integers(crop.uv_per_frame.shape[0]))
    with torch.no_grad():
        _, direct_content = _render_through_augmentation(
            rgba.detach(), content_hwc, crop, track,
            crop.uv_per_frame[direct_idx], pkg.atlas_resolution,
        )
    direct_rgba = forward_chw(gen, direct_content.chw().unsqueeze(0))[0]
    direct_layer = EditLayer(
        color=Image(direct_rgba[:3].permute(1, 2, 0)), alpha=direct_rgba[3]
    )
    parts.append(
        compute_loss_terms(
            direct_layer, direct_content, bundle, step_text, cfg, backend, rng
        )
    )

    terms = mean_loss_terms(parts)
    if cfg.toggles.bootstrap and atlas_relevancy is not None:
        aligned = _aligned_relevancy_crop(atlas_relevancy, crop, track, layer.window)
        terms = replace(terms, bootstrap=bootstrap_loss(aligned, rgba[..., 3]))
    return total_loss(terms, cfg.weights, bootstrap_weight_at(gen.step, cfg), cfg.toggles)
