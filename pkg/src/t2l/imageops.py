"""Shared tensor-level image helpers (CHW layout, bilinear resampling)."""

from __future__ import annotations

import torch
import torch.nn.functional as F

__all__ = ["resize_chw", "resize_short_side"]


def resize_chw(chw: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of (..., C, H, W) to (height, width)."""
    squeeze = chw.ndim == 3
    if squeeze:
        chw = chw.unsqueeze(0)
    out = F.interpolate(chw, size=(height, width), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def resize_short_side(chw: torch.Tensor, target: int) -> torch.Tensor:
    """Resize so the shorter spatial side equals ``target``, aspect preserved."""
    h, w = chw.shape[-2:]
    if min(h, w) == target:
        return chw
    scale = target / min(h, w)
    new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
    if h <= w:
        new_h = target
    else:
        new_w = target
    return resize_chw(chw, new_h, new_w)
