"""Gradient-weighted attention rollout for relevancy estimation."""

from __future__ import annotations

import torch

__all__ = ["attention_rollout", "minmax_normalize"]


def attention_rollout(
    attns: list[torch.Tensor],
    grads: list[torch.Tensor] | None = None,
    start_layer: int = 0,
) -> torch.Tensor:
    """Roll per-layer attention into per-patch relevance for the class token.

    ``attns`` holds one (heads, N, N) attention-probability matrix per layer,
    class token first. When ``grads`` is given, each map is weighted by its
    gradient and rectified before the head average. Accumulation starts at
    ``start_layer``; the result is the class-token row over patch columns,
    length N - 1.
    """
    if not attns:
        raise ValueError("no attention maps")
    if grads is not None and len(grads) != len(attns):
        raise ValueError(f"{len(grads)} gradients for {len(attns)} attention maps")
    n = attns[0].shape[-1]
    relevance = torch.eye(n, dtype=attns[0].dtype, device=attns[0].device)
    for layer in range(start_layer, len(attns)):
        cam = attns[layer]
        if grads is not None:
            cam = cam * grads[layer]
        cam = cam.clamp(min=0).mean(dim=0)
        relevance = relevance + cam @ relevance
    return relevance[0, 1:]


def minmax_normalize(values: torch.Tensor, eps: float = 1e-12) -> tuple[torch.Tensor, bool]:
    """Rescale to [0, 1] with max 1; constant input collapses to zeros."""
    lo, hi = values.min(), values.max()
    span = (hi - lo).item()
    if span < eps:
        return torch.zeros_like(values), True
    return (values - lo) / span, False
