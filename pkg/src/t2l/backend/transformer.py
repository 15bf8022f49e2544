"""Dual-encoder transformer backend (vision + text towers).

Parameter names mirror the published reference checkpoint layout, so a
downloaded state dict loads strictly. The same code instantiates the tiny
seeded-random synthetic backend used in tests.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..compositing import Image
from .base import (
    RELEVANCY_RESOLUTION,
    EmbeddingBackend,
    InputError,
    RelevancyMap,
    normalize,
)
from .rollout import attention_rollout, minmax_normalize

log = logging.getLogger(__name__)

__all__ = ["BackendArchitecture", "DualEncoder", "TransformerBackend"]


@dataclass(frozen=True)
class BackendArchitecture:
    """Shape hyperparameters of the dual encoder."""

    embed_dim: int = 512
    image_resolution: int = 224
    vision_width: int = 768
    vision_layers: int = 12
    vision_heads: int = 12
    patch_size: int = 32
    text_width: int = 512
    text_layers: int = 12
    text_heads: int = 8
    vocab_size: int = 49408
    context_length: int = 77
    image_mean: tuple[float, float, float] = (0.48145466, 0.4578275, 0.40821073)
    image_std: tuple[float, float, float] = (0.26862954, 0.26130258, 0.27577711)
    # Zeroes the attention logits, making every attention map uniform.
    # Test-only knob for relevancy rollout checks.
    uniform_attention: bool = False

    @property
    def vision_grid(self) -> int:
        return self.image_resolution // self.patch_size

    @classmethod
    def vit_b32(cls) -> "BackendArchitecture":
        return cls()


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class Attention(nn.Module):
    """Multi-head self-attention that can expose its attention maps."""

    def __init__(self, width: int, heads: int, uniform: bool = False):
        super().__init__()
        self.heads = heads
        self.uniform = uniform
        self.in_proj_weight = nn.Parameter(torch.empty(3 * width, width))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * width))
        self.out_proj = nn.Linear(width, width)

    def forward(self, x, attn_mask=None, record: list | None = None):
        n, l, w = x.shape
        dh = w // self.heads
        qkv = F.linear(x, self.in_proj_weight, self.in_proj_bias)
        q, k, v = qkv.chunk(3, dim=-1)
        q = q.view(n, l, self.heads, dh).transpose(1, 2)
        k = k.view(n, l, self.heads, dh).transpose(1, 2)
        v = v.view(n, l, self.heads, dh).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if self.uniform:
            logits = logits * 0.0
        if attn_mask is not None:
            logits = logits + attn_mask
        probs = logits.softmax(dim=-1)
        if record is not None:
            record.append(probs)
        out = (probs @ v).transpose(1, 2).reshape(n, l, w)
        return self.out_proj(out)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, uniform: bool = False):
        super().__init__()
        self.attn = Attention(width, heads, uniform=uniform)
        self.ln_1 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            OrderedDict(
                [
                    ("c_fc", nn.Linear(width, width * 4)),
                    ("gelu", QuickGELU()),
                    ("c_proj", nn.Linear(width * 4, width)),
                ]
            )
        )
        self.ln_2 = nn.LayerNorm(width)

    def forward(self, x, attn_mask=None, record=None):
        x = x + self.attn(self.ln_1(x), attn_mask=attn_mask, record=record)
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, uniform: bool = False):
        super().__init__()
        self.resblocks = nn.ModuleList(
            ResidualAttentionBlock(width, heads, uniform=uniform) for _ in range(layers)
        )

    def forward(self, x, attn_mask=None, record=None):
        for block in self.resblocks:
            x = block(x, attn_mask=attn_mask, record=record)
        return x


class VisionTransformer(nn.Module):
    def __init__(self, arch: BackendArchitecture):
        super().__init__()
        width, grid = arch.vision_width, arch.vision_grid
        self.conv1 = nn.Conv2d(3, width, kernel_size=arch.patch_size, stride=arch.patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(width))
        self.positional_embedding = nn.Parameter(torch.zeros(grid * grid + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.transformer = Transformer(
            width, arch.vision_layers, arch.vision_heads, uniform=arch.uniform_attention
        )
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.zeros(width, arch.embed_dim))

    def forward(self, x, pos_embedding=None, record=None):
        """(N, 3, H, W) normalized pixels -> (class embedding, patch tokens)."""
        x = self.conv1(x)
        n, w, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(n, 1, w)
        x = torch.cat([cls, x], dim=1)
        pos = self.positional_embedding if pos_embedding is None else pos_embedding
        x = self.ln_pre(x + pos.to(x.dtype))
        x = self.transformer(x, record=record)
        embedding = self.ln_post(x[:, 0, :]) @ self.proj
        return embedding, x[:, 1:, :]


class DualEncoder(nn.Module):
    """The full image/text embedding model."""

    def __init__(self, arch: BackendArchitecture):
        super().__init__()
        self.arch = arch
        self.visual = VisionTransformer(arch)
        self.transformer = Transformer(
            arch.text_width, arch.text_layers, arch.text_heads, uniform=arch.uniform_attention
        )
        self.token_embedding = nn.Embedding(arch.vocab_size, arch.text_width)
        self.positional_embedding = nn.Parameter(torch.zeros(arch.context_length, arch.text_width))
        self.ln_final = nn.LayerNorm(arch.text_width)
        self.text_projection = nn.Parameter(torch.zeros(arch.text_width, arch.embed_dim))
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))
        mask = torch.full((arch.context_length, arch.context_length), float("-inf")).triu_(1)
        self.register_buffer("causal_mask", mask, persistent=False)
        self._init_parameters()

    def _init_parameters(self):
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)
        nn.init.normal_(self.visual.class_embedding, std=self.arch.vision_width**-0.5)
        nn.init.normal_(self.visual.positional_embedding, std=self.arch.vision_width**-0.5)
        nn.init.normal_(self.visual.proj, std=self.arch.vision_width**-0.5)
        nn.init.normal_(self.visual.conv1.weight, std=0.02)
        nn.init.normal_(self.text_projection, std=self.arch.text_width**-0.5)
        for tower, width in ((self.visual.transformer, self.arch.vision_width),
                             (self.transformer, self.arch.text_width)):
            proj_std = (width**-0.5) * ((2 * len(tower.resblocks)) ** -0.5)
            for block in tower.resblocks:
                nn.init.normal_(block.attn.in_proj_weight, std=width**-0.5)
                nn.init.normal_(block.attn.out_proj.weight, std=proj_std)
                nn.init.normal_(block.mlp.c_fc.weight, std=(2 * width) ** -0.5)
                nn.init.normal_(block.mlp.c_proj.weight, std=proj_std)

    def encode_text_ids(self, ids: torch.Tensor) -> torch.Tensor:
        """(N, context) padded token ids -> (N, embed_dim), unnormalized."""
        x = self.token_embedding(ids) + self.positional_embedding
        x = self.transformer(x, attn_mask=self.causal_mask)
        x = self.ln_final(x)
        return x[torch.arange(x.shape[0]), ids.argmax(dim=-1)] @ self.text_projection


class TransformerBackend(EmbeddingBackend):
    """EmbeddingBackend over a :class:`DualEncoder` plus a tokenizer.

    Weights are frozen at construction; position-embedding tables for
    non-native grids are derived lazily and cached.
    """

    def __init__(self, model: DualEncoder, tokenizer, relevancy_start_layer: int = 0):
        self.model = model.eval()
        self.model.requires_grad_(False)
        self.tokenizer = tokenizer
        self.relevancy_start_layer = relevancy_start_layer
        self._pos_cache: dict[tuple[int, int], torch.Tensor] = {}
        self._pos_lock = threading.Lock()
        arch = model.arch
        self._mean = torch.tensor(arch.image_mean).view(1, 3, 1, 1)
        self._std = torch.tensor(arch.image_std).view(1, 3, 1, 1)

    @classmethod
    def random_init(cls, arch: BackendArchitecture, tokenizer, seed: int = 0) -> "TransformerBackend":
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = DualEncoder(arch)
        return cls(model, tokenizer)

    @property
    def arch(self) -> BackendArchitecture:
        return self.model.arch

    @property
    def embed_dim(self) -> int:
        return self.arch.embed_dim

    @property
    def token_width(self) -> int:
        return self.arch.vision_width

    @property
    def patch_size(self) -> int:
        return self.arch.patch_size

    @property
    def input_resolution(self) -> int:
        return self.arch.image_resolution

    @property
    def context_length(self) -> int:
        return self.arch.context_length

    # vision

    def _preprocess(self, chw: torch.Tensor) -> torch.Tensor:
        if chw.ndim != 4 or chw.shape[1] != 3:
            raise InputError(f"expected (N, 3, H, W), got {tuple(chw.shape)}")
        p = self.patch_size
        h, w = chw.shape[-2:]
        if h < p or w < p:
            raise InputError(f"image {h}x{w} smaller than one {p}x{p} patch")
        h2, w2 = (h // p) * p, (w // p) * p
        if (h2, w2) != (h, w):
            top, left = (h - h2) // 2, (w - w2) // 2
            chw = chw[..., top : top + h2, left : left + w2]
        return (chw - self._mean.to(chw)) / self._std.to(chw)

    def _pos_for_grid(self, rows: int, cols: int) -> torch.Tensor:
        g = self.arch.vision_grid
        if (rows, cols) == (g, g):
            return self.model.visual.positional_embedding
        return self.interpolate_position_embeddings(rows, cols)

    def _vision_forward(self, chw: torch.Tensor, record=None):
        x = self._preprocess(chw)
        rows, cols = x.shape[-2] // self.patch_size, x.shape[-1] // self.patch_size
        pos = self._pos_for_grid(rows, cols)
        embedding, tokens = self.model.visual(x, pos_embedding=pos, record=record)
        return embedding, tokens, rows, cols

    def encode_image_batch(self, chw: torch.Tensor) -> torch.Tensor:
        embedding, _, _, _ = self._vision_forward(chw)
        return normalize(embedding)

    def spatial_tokens_batch(self, chw: torch.Tensor):
        _, tokens, rows, cols = self._vision_forward(chw)
        return tokens, rows, cols

    def image_features_batch(self, chw: torch.Tensor):
        """One forward pass returning (embeddings, tokens, rows, cols)."""
        embedding, tokens, rows, cols = self._vision_forward(chw)
        return normalize(embedding), tokens, rows, cols

    def interpolate_position_embeddings(self, rows: int, cols: int) -> torch.Tensor:
        if rows < 1 or cols < 1:
            raise InputError(f"target grid must be at least 1x1, got {rows}x{cols}")
        with self._pos_lock:
            cached = self._pos_cache.get((rows, cols))
        if cached is not None:
            return cached
        table = self.model.visual.positional_embedding
        g = self.arch.vision_grid
        cls_part, grid_part = table[:1], table[1:]
        grid = grid_part.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(rows, cols), mode="bicubic", align_corners=False)
        grid = grid.permute(0, 2, 3, 1).reshape(rows * cols, -1)
        out = torch.cat([cls_part, grid], dim=0)
        with self._pos_lock:
            self._pos_cache[(rows, cols)] = out
        return out

    # text

    def _text_ids(self, text: str) -> torch.Tensor:
        if not text or not text.strip():
            raise InputError("text prompt is empty")
        ids = self.tokenizer.encode(text)
        if len(ids) > self.context_length:
            log.warning(
                "prompt of %d tokens truncated to context length %d: %r",
                len(ids), self.context_length, text,
            )
            ids = ids[: self.context_length]
            ids[-1] = self.tokenizer.eot_id
        padded = torch.zeros(1, self.context_length, dtype=torch.long)
        padded[0, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        return padded

    def encode_text(self, text: str) -> torch.Tensor:
        with torch.no_grad():
            embedding = self.model.encode_text_ids(self._text_ids(text))
        return normalize(embedding)[0]

    # relevancy

    def relevancy_map(self, img: Image, roi_text: str) -> RelevancyMap:
        res = self.input_resolution
        chw = img.chw().unsqueeze(0).detach()
        if chw.shape[-2:] != (res, res):
            chw = F.interpolate(chw, size=(res, res), mode="bilinear", align_corners=False)
        text_emb = self.encode_text(roi_text)
        with torch.enable_grad():
            x = chw.requires_grad_(True)
            records: list[torch.Tensor] = []
            embedding, _, rows, cols = self._vision_forward(x, record=records)
            score = (normalize(embedding)[0] * text_emb).sum()
            grads = torch.autograd.grad(score, records)
        rollout = attention_rollout(
            [a[0] for a in records], [g[0] for g in grads], start_layer=self.relevancy_start_layer
        )
        raw = rollout.detach().reshape(rows, cols)
        up = F.interpolate(
            raw[None, None],
            size=(RELEVANCY_RESOLUTION, RELEVANCY_RESOLUTION),
            mode="bilinear",
            align_corners=False,
        )[0, 0]
        values, degenerate = minmax_normalize(up)
        return RelevancyMap(values=values.detach(), degenerate=degenerate)
