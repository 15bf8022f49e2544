"""Deterministic miniature backend for fast, network-free tests."""

from __future__ import annotations

from .tokenizer import HashTokenizer
from .transformer import BackendArchitecture, TransformerBackend

__all__ = ["synthetic_architecture", "synthetic_backend"]


def synthetic_architecture(
    uniform_attention: bool = False,
    image_resolution: int = 224,
    patch_size: int = 32,
) -> BackendArchitecture:
    return BackendArchitecture(
        embed_dim=32,
        image_resolution=image_resolution,
        vision_width=64,
        vision_layers=2,
        vision_heads=2,
        patch_size=patch_size,
        text_width=64,
        text_layers=2,
        text_heads=2,
        vocab_size=997,
        context_length=32,
        uniform_attention=uniform_attention,
    )


def synthetic_backend(
    seed: int = 0,
    uniform_attention: bool = False,
    image_resolution: int = 224,
    patch_size: int = 32,
) -> TransformerBackend:
    """A tiny seeded-random dual encoder with a hash tokenizer.

    Fully deterministic under a fixed seed; exercises every backend code
    path (spatial tokens, position-grid resampling, relevancy) in
    milliseconds.
    """
    arch = synthetic_architecture(
        uniform_attention=uniform_attention,
        image_resolution=image_resolution,
        patch_size=patch_size,
    )
    tokenizer = HashTokenizer(vocab_size=arch.vocab_size)
    return TransformerBackend.random_init(arch, tokenizer, seed=seed)
