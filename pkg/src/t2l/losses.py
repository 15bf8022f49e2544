"""The terms of the training objective and their weighted assembly.

Every term is differentiable w.r.t. the image/layer tensors feeding it and
is individually toggleable so ablation configurations can be reproduced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import torch
import torch.nn.functional as F

from .backend.base import NORM_EPS, EmbeddingBackend, cosine_distance, normalize
from .compositing import GREEN, EditLayer, Image, TextBundle, green_screen_composite
from .imageops import resize_chw, resize_short_side

__all__ = [
    "LossWeights",
    "LossToggles",
    "LossTerms",
    "LossReport",
    "self_similarity",
    "composition_loss",
    "screen_loss",
    "structure_loss",
    "structure_loss_batch",
    "sparsity_loss",
    "bootstrap_loss",
    "total_loss",
]

#: Losses are computed on views whose shorter side is this many pixels.
VIEW_RESOLUTION = 224

#: Relevancy/opacity comparison resolution for the bootstrap term.
BOOTSTRAP_RESOLUTION = 224


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the objective terms."""

    lambda_g: float = 1.0
    lambda_s: float = 2.0
    lambda_r: float = 5e-2
    gamma: float = 2.0
    bootstrap_w0: float = 10.0

    def __post_init__(self):
        for name in ("lambda_g", "lambda_s", "lambda_r", "gamma", "bootstrap_w0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def image_defaults(cls) -> "LossWeights":
        return cls()

    @classmethod
    def video_defaults(cls) -> "LossWeights":
        return cls(lambda_s=3.0, lambda_r=5e-4)


@dataclass(frozen=True)
class LossToggles:
    """Per-term on/off switches (ablation surface).

    ``composition`` gates the driving cosine term; switching it off leaves
    pure auxiliary-term training (e.g. bootstrap-only fitting).
    """

    composition: bool = True
    screen: bool = True
    structure: bool = True
    sparsity: bool = True
    bootstrap: bool = True
    directional: bool = True

    def disable(self, name: str) -> "LossToggles":
        if name not in self.__dataclass_fields__:
            raise ValueError(f"unknown loss toggle {name!r}")
        return replace(self, **{name: False})


@dataclass(frozen=True)
class LossTerms:
    """Raw (unweighted) term values; tensors during training, floats in tests."""

    comp_cos: torch.Tensor | float = 0.0
    comp_dir: torch.Tensor | float = 0.0
    screen: torch.Tensor | float = 0.0
    structure: torch.Tensor | float = 0.0
    sparsity_l1: torch.Tensor | float = 0.0
    sparsity_l0: torch.Tensor | float = 0.0
    bootstrap: torch.Tensor | float = 0.0


@dataclass(frozen=True)
class LossReport:
    """Per-step diagnostic snapshot; plain finite floats."""

    comp_cos: float
    comp_dir: float
    screen: float
    structure: float
    sparsity_l1: float
    sparsity_l0: float
    bootstrap: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def _to_float(value: torch.Tensor | float) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def _as_batch(views: Sequence[Image] | torch.Tensor) -> torch.Tensor:
    if isinstance(views, torch.Tensor):
        if views.ndim != 4:
            raise ValueError(f"expected (N, 3, H, W) views, got {tuple(views.shape)}")
        if views.shape[0] == 0:
            raise ValueError("empty view batch")
        return views
    if len(views) == 0:
        raise ValueError("empty view list")
    return torch.stack([v.chw() for v in views])


def self_similarity(tokens: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine-similarity matrix of spatial tokens.

    ``tokens`` is (K, width); the result is (K, K), symmetric with a unit
    diagonal. Zero-norm tokens are handled by the epsilon-guarded
    normalization.
    """
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"expected (K, width) tokens with K >= 1, got {tuple(tokens.shape)}")
    unit = normalize(tokens, NORM_EPS)
    return unit @ unit.transpose(0, 1)


def composition_loss(
    out_views: Sequence[Image] | torch.Tensor,
    src_views: Sequence[Image] | torch.Tensor,
    bundle: TextBundle,
    backend: EmbeddingBackend,
    directional: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Target-conformity terms on the composited output.

    Returns (cosine term, directional term), each averaged over views.
    ``src_views`` must be spatially matched with ``out_views`` (same
    augmentation stream). The directional term compares the per-view image
    displacement against the target-vs-ROI text displacement; views whose
    displacement collapses below the norm guard contribute 0, as does the
    whole term when no ROI prompt exists.
    """
    out_batch = _as_batch(out_views)
    text_emb = backend.encode_text(bundle.target)
    out_emb = backend.encode_image_batch(out_batch)
    comp_cos = (1.0 - out_emb @ text_emb).mean()

    zero = out_emb.new_zeros(())
    if not directional or bundle.roi is None:
        return comp_cos, zero
    src_batch = _as_batch(src_views)
    if src_batch.shape[0] != out_batch.shape[0]:
        raise ValueError(
            f"{out_batch.shape[0]} output views vs {src_batch.shape[0]} source views"
        )
    with torch.no_grad():
        src_emb = backend.encode_image_batch(src_batch)
        text_dir = text_emb - backend.encode_text(bundle.roi)
    if float(text_dir.norm()) < NORM_EPS:
        return comp_cos, zero
    img_dir = out_emb - src_emb
    valid = img_dir.norm(dim=-1) > NORM_EPS
    if not bool(valid.any()):
        return comp_cos, zero
    sims = normalize(img_dir[valid]) @ normalize(text_dir)
    comp_dir = (1.0 - sims).sum() / out_batch.shape[0]
    return comp_cos, comp_dir


def screen_loss(
    layer_views: Sequence[EditLayer],
    bundle: TextBundle,
    backend: EmbeddingBackend,
    green=GREEN,
) -> torch.Tensor:
    """Direct supervision on the edit layer composited over a green background."""
    if len(layer_views) == 0:
        raise ValueError("empty view list")
    prompt = bundle.screen_prompt()
    text_emb = backend.encode_text(prompt)
    screens = torch.stack(
        [green_screen_composite(layer, green).chw() for layer in layer_views]
    )
    emb = backend.encode_image_batch(screens)
    return (1.0 - emb @ text_emb).mean()


def structure_loss_batch(
    src_chw: torch.Tensor, out_chw: torch.Tensor, backend: EmbeddingBackend
) -> torch.Tensor:
    """Mean Frobenius distance between per-view self-similarity matrices.

    Both batches pass through identical preprocessing (shorter side resized
    to the view resolution) so the token grids match.
    """
    if src_chw.shape != out_chw.shape:
        raise ValueError(
            f"source {tuple(src_chw.shape)} and output {tuple(out_chw.shape)} views differ"
        )
    src_r = resize_short_side(src_chw, VIEW_RESOLUTION)
    out_r = resize_short_side(out_chw, VIEW_RESOLUTION)
    with torch.no_grad():
        src_tokens, rs, cs = backend.spatial_tokens_batch(src_r)
    out_tokens, ro, co = backend.spatial_tokens_batch(out_r)
    if (rs, cs) != (ro, co):
        raise RuntimeError(
            f"token grids diverged: source {rs}x{cs} vs output {ro}x{co}; "
            "preprocessing is no longer identical"
        )
    total = src_chw.new_zeros(())
    for i in range(src_tokens.shape[0]):
        diff = self_similarity(src_tokens[i]) - self_similarity(out_tokens[i])
        total = total + torch.linalg.matrix_norm(diff, ord="fro")
    return total / src_tokens.shape[0]


def structure_loss(src: Image, out: Image, backend: EmbeddingBackend) -> torch.Tensor:
    """Self-similarity preservation between one source/output pair."""
    return structure_loss_batch(src.chw().unsqueeze(0), out.chw().unsqueeze(0), backend)


def sparsity_loss(
    alpha: torch.Tensor, gamma: float = 2.0
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Opacity sparsity: (mean-L1, smooth-L0, gamma * L1 + L0).

    The smooth L0 surrogate is 2 * sigmoid(5 * a) - 1, zero at a = 0. Both
    terms are per-pixel means, keeping the weight resolution-independent.
    """
    l1 = alpha.mean()
    l0 = (2.0 * torch.sigmoid(5.0 * alpha) - 1.0).mean()
    return l1, l0, gamma * l1 + l0


def bootstrap_loss(relevancy: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """MSE between the relevancy map and the opacity map, both at 224 x 224."""
    if relevancy.ndim != 2:
        raise ValueError(f"expected (H, W) relevancy, got {tuple(relevancy.shape)}")
    target_h, target_w = BOOTSTRAP_RESOLUTION, BOOTSTRAP_RESOLUTION
    if relevancy.shape != (target_h, target_w):
        relevancy = resize_chw(relevancy[None], target_h, target_w)[0]
    if alpha.shape != (target_h, target_w):
        alpha = resize_chw(alpha[None], target_h, target_w)[0]
    return F.mse_loss(alpha, relevancy)


def total_loss(
    terms: LossTerms,
    weights: LossWeights,
    bootstrap_weight: float,
    toggles: LossToggles = LossToggles(),
) -> tuple[torch.Tensor | float, LossReport]:
    """Weighted sum of the enabled terms.

    Returns the total (a tensor whenever any enabled term is a tensor, so it
    can be backpropagated) together with a float report. Disabled terms
    contribute exactly 0.
    """
    comp_cos = terms.comp_cos if toggles.composition else 0.0
    comp_dir = terms.comp_dir if toggles.directional else 0.0
    screen = terms.screen if toggles.screen else 0.0
    structure = terms.structure if toggles.structure else 0.0
    l1 = terms.sparsity_l1 if toggles.sparsity else 0.0
    l0 = terms.sparsity_l0 if toggles.sparsity else 0.0
    bootstrap = terms.bootstrap if toggles.bootstrap else 0.0

    total = (
        comp_cos
        + comp_dir
        + weights.lambda_g * screen
        + weights.lambda_s * structure
        + weights.lambda_r * (weights.gamma * l1 + l0)
        + bootstrap_weight * bootstrap
    )
    report = LossReport(
        comp_cos=_to_float(comp_cos),
        comp_dir=_to_float(comp_dir),
        screen=_to_float(screen),
        structure=_to_float(structure),
        sparsity_l1=_to_float(l1),
        sparsity_l0=_to_float(l0),
        bootstrap=_to_float(bootstrap),
        total=_to_float(total),
    )
    return total, report
