"""Abstract interface to a contrastive vision-language embedding model."""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import torch

from ..compositing import Image

__all__ = [
    "NORM_EPS",
    "RELEVANCY_RESOLUTION",
    "BackendError",
    "InputError",
    "UnsupportedCapabilityError",
    "SpatialTokens",
    "RelevancyMap",
    "normalize",
    "cosine_distance",
    "EmbeddingBackend",
]

log = logging.getLogger(__name__)

#: Guard on vector norms before division.
NORM_EPS = 1e-8

#: Relevancy maps are always produced at this square resolution.
RELEVANCY_RESOLUTION = 224


class BackendError(RuntimeError):
    """Base class for embedding-backend failures."""


class InputError(BackendError):
    """Input violates a backend precondition (size, emptiness, ...)."""


class UnsupportedCapabilityError(BackendError):
    """The backend cannot provide the requested capability."""


@dataclass(frozen=True)
class SpatialTokens:
    """Per-patch tokens from the deepest transformer layer.

    ``tokens`` is (K, width) with K = rows * cols.
    """

    tokens: torch.Tensor
    rows: int
    cols: int

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.rows * self.cols:
            raise ValueError(
                f"tokens {tuple(self.tokens.shape)} inconsistent with "
                f"grid {self.rows}x{self.cols}"
            )

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class RelevancyMap:
    """Text-conditioned saliency over the image, min-max normalized to [0, 1].

    ``degenerate`` marks an all-constant raw map that was zeroed by the
    normalization guard.
    """

    values: torch.Tensor
    degenerate: bool = False

    def __post_init__(self):
        expected = (RELEVANCY_RESOLUTION, RELEVANCY_RESOLUTION)
        if tuple(self.values.shape) != expected:
            raise ValueError(f"relevancy map must be {expected}, got {tuple(self.values.shape)}")


def normalize(v: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """L2-normalize along the last dim with an epsilon guard."""
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def cosine_distance(a: torch.Tensor, b: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """1 - cos(a, b), in [0, 2]. Inputs are re-normalized defensively.

    When both inputs are below the norm guard the pair is degenerate and the
    distance is 0 (logged at debug level).
    """
    na, nb = a.detach().norm(dim=-1), b.detach().norm(dim=-1)
    if float(na.max()) < eps and float(nb.max()) < eps:
        log.debug("cosine_distance: degenerate pair (both norms < %g), returning 0", eps)
        return torch.zeros((), dtype=a.dtype, device=a.device)
    sim = (normalize(a, eps) * normalize(b, eps)).sum(dim=-1)
    return (1.0 - sim).mean() if sim.ndim else 1.0 - sim


class EmbeddingBackend(ABC):
    """Pre-trained (and frozen) dual-encoder feature extractor.

    All operations are pure functions of (weights, input); they build an
    autograd graph when the input carries gradients, so losses defined on the
    embeddings are differentiable w.r.t. the image. Safe for concurrent
    read-only use after construction.
    """

    @property
    @abstractmethod
    def embed_dim(self) -> int: ...

    @property
    @abstractmethod
    def token_width(self) -> int: ...

    @property
    @abstractmethod
    def patch_size(self) -> int: ...

    @property
    @abstractmethod
    def input_resolution(self) -> int: ...

    @property
    @abstractmethod
    def context_length(self) -> int: ...

    @abstractmethod
    def encode_image_batch(self, chw: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) in [0, 1] -> (N, embed_dim) L2-normalized."""

    @abstractmethod
    def encode_text(self, text: str) -> torch.Tensor:
        """Prompt -> (embed_dim,) L2-normalized."""

    @abstractmethod
    def spatial_tokens_batch(self, chw: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        """(N, 3, H, W) -> ((N, K, token_width), rows, cols)."""

    @abstractmethod
    def interpolate_position_embeddings(self, rows: int, cols: int) -> torch.Tensor:
        """Resample the positional table to a rows x cols patch grid.

        Returns the adjusted table of 1 + rows*cols vectors (class token
        first, untouched); the backend accepts matching inputs afterwards.
        """

    def relevancy_map(self, img: Image, roi_text: str) -> RelevancyMap:
        raise UnsupportedCapabilityError(
            f"{type(self).__name__} does not expose attention for relevancy estimation; "
            "supply a precomputed map instead"
        )

    # single-input conveniences

    def encode_image(self, img: Image) -> torch.Tensor:
        return self.encode_image_batch(img.chw().unsqueeze(0))[0]

    def spatial_tokens(self, img: Image) -> SpatialTokens:
        tokens, rows, cols = self.spatial_tokens_batch(img.chw().unsqueeze(0))
        return SpatialTokens(tokens=tokens[0], rows=rows, cols=cols)
