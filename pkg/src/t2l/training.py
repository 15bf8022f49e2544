"""Optimization loop for the image pipeline, plus the pieces the video
pipeline reuses: the optimizer, schedules, run records, and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backend.base import EmbeddingBackend
from .compositing import EditLayer, Image, TextBundle, composite
from .dataset import AugmentationConfig, clip_view_batch, clone_rng, sample_example
from .generator import GeneratorConfig, GeneratorState, build, forward, forward_chw
from .losses import (
    LossReport,
    LossTerms,
    LossToggles,
    LossWeights,
    bootstrap_loss,
    composition_loss,
    screen_loss,
    sparsity_loss,
    structure_loss_batch,
    total_loss,
)

log = logging.getLogger(__name__)
progress_log = logging.getLogger("t2l.progress")

__all__ = [
    "CHECKPOINT_VERSION",
    "TrainConfig",
    "TrainRunRecord",
    "TrainingDivergedError",
    "CheckpointError",
    "Madgrad",
    "lr_at",
    "bootstrap_weight_at",
    "train_image",
    "checkpoint",
    "restore",
]

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """A loss term became non-finite; carries the offending report."""

    def __init__(self, step: int, report: LossReport):
        super().__init__(
            f"non-finite loss at step {step}: {json.dumps(report.as_dict())}"
        )
        self.step = step
        self.report = report


class CheckpointError(RuntimeError):
    """Checkpoint could not be read back (corrupt, wrong version, wrong config)."""


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines one training run."""

    lr0: float = 2.5e-3
    weight_decay: float = 0.01
    momentum: float = 0.9
    lr_decay_gamma: float = 0.99
    lr_floor: float = 1e-5
    total_steps: int = 1000
    seed: int = 0
    anneal_bootstrap: bool = True
    grad_clip_norm: float | None = None
    grad_accumulation: int = 1
    weights: LossWeights = field(default_factory=LossWeights.image_defaults)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig.image_defaults)
    toggles: LossToggles = field(default_factory=LossToggles)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if not (self.lr0 > self.lr_floor > 0):
            raise ValueError(
                f"need lr0 > lr_floor > 0, got lr0={self.lr0}, lr_floor={self.lr_floor}"
            )
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.grad_accumulation < 1:
            raise ValueError("grad_accumulation must be >= 1")

    @classmethod
    def image_defaults(cls) -> "TrainConfig":
        return cls()

    @classmethod
    def video_defaults(cls) -> "TrainConfig":
        return cls(
            lr_decay_gamma=0.999,
            total_steps=3000,
            anneal_bootstrap=False,
            weights=LossWeights.video_defaults(),
            augmentation=AugmentationConfig.video_defaults(),
        )


@dataclass
class TrainRunRecord:
    """Reproducibility record of one run."""

    seed: int
    config: dict
    history: list[LossReport] = field(default_factory=list)
    wall_clock_s: float = 0.0
    checkpoint_path: str | None = None

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "wall_clock_s": self.wall_clock_s,
            "checkpoint_path": self.checkpoint_path,
            "history": [r.as_dict() for r in self.history],
        }


class Madgrad(torch.optim.Optimizer):
    """Momentumized dual-averaged adaptive gradient step.

    Accumulates lamb-weighted gradient sums (lamb = lr * sqrt(k + 1)) and
    divides by the cube root of the accumulated squared-gradient sum; the
    iterate is an exponential average between that dual point and the
    current parameters. Weight decay is decoupled from the gradient.
    """

    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.9,
                 weight_decay: float = 0.0, eps: float = 1e-6):
        if lr <= 0:
            raise ValueError(f"invalid learning rate {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"invalid momentum {momentum}")
        defaults = dict(lr=lr, momentum=momentum, weight_decay=weight_decay, eps=eps)
        super().__init__(params, defaults)
        self._k = 0

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, eps = group["lr"], group["eps"]
            momentum, decay = group["momentum"], group["weight_decay"]
            ck = 1.0 - momentum
            lamb = lr * math.sqrt(self._k + 1)
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if not state:
                    state["grad_sum_sq"] = torch.zeros_like(p)
                    state["s"] = torch.zeros_like(p)
                    if momentum != 0.0:
                        state["x0"] = p.detach().clone()
                grad_sum_sq, s = state["grad_sum_sq"], state["s"]
                p_prev = p.detach().clone() if decay != 0.0 else None
                if momentum == 0.0:
                    # dual point reconstructed from the pre-update sums
                    rms = grad_sum_sq.pow(1.0 / 3.0).add_(eps)
                    x0 = p.addcdiv(s, rms, value=1.0)
                else:
                    x0 = state["x0"]
                grad_sum_sq.addcmul_(grad, grad, value=lamb)
                rms = grad_sum_sq.pow(1.0 / 3.0).add_(eps)
                s.add_(grad, alpha=lamb)
                if momentum == 0.0:
                    p.copy_(x0.addcdiv(s, rms, value=-1.0))
                else:
                    z = x0.addcdiv(s, rms, value=-1.0)
                    p.mul_(1.0 - ck).add_(z, alpha=ck)
                if p_prev is not None:
                    p.add_(p_prev, alpha=-lr * decay)
        self._k += 1
        return loss


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Exponentially decayed learning rate, clamped at the floor."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return max(cfg.lr_floor, cfg.lr0 * cfg.lr_decay_gamma**step)


def bootstrap_weight_at(step: int, cfg: TrainConfig) -> float:
    """Bootstrap term weight: linearly annealed to 0, or constant."""
    w0 = cfg.weights.bootstrap_w0
    if not cfg.anneal_bootstrap:
        return w0
    if cfg.total_steps == 0:
        return w0
    return max(0.0, w0 * (1.0 - step / cfg.total_steps))


def _log_progress(step: int, lr: float, report: LossReport) -> None:
    progress_log.info(
        "%s", json.dumps({"step": step, "lr": lr, **report.as_dict()})
    )


def compute_loss_terms(
    layer: EditLayer,
    base_img: Image,
    bundle: TextBundle,
    step_target: str,
    cfg: TrainConfig,
    backend: EmbeddingBackend,
    rng: np.random.Generator,
) -> LossTerms:
    """Embedding-space terms for one (edit layer, base image) pair.

    The bootstrap term is not computed here: its alignment target differs
    between the image and video pipelines.
    """
    toggles = cfg.toggles
    n_views = cfg.augmentation.clip_view_count
    crop_area = cfg.augmentation.clip_crop_area
    out = composite(layer, base_img)

    terms = LossTerms()
    out_views = src_views = None
    if toggles.composition or toggles.directional or toggles.structure:
        pair_rng = clone_rng(rng)
        out_views = clip_view_batch(out.chw(), n_views, rng, crop_area=crop_area)
        src_views = clip_view_batch(base_img.chw(), n_views, pair_rng, crop_area=crop_area)
    if toggles.composition or toggles.directional:
        step_bundle = bundle.with_target(step_target)
        comp_cos, comp_dir = composition_loss(
            out_views, src_views, step_bundle, backend, directional=toggles.directional
        )
        terms = replace(terms, comp_cos=comp_cos, comp_dir=comp_dir)

    if toggles.screen:
        rgba = layer.rgba().permute(2, 0, 1)
        rgba_views = clip_view_batch(rgba, n_views, rng, crop_area=crop_area)
        layer_views = [
            EditLayer(color=Image(v[:3].permute(1, 2, 0)), alpha=v[3]) for v in rgba_views
        ]
        terms = replace(terms, screen=screen_loss(layer_views, bundle, backend))
    if toggles.structure:
        terms = replace(
            terms, structure=structure_loss_batch(src_views, out_views, backend)
        )
    if toggles.sparsity:
        l1, l0, _ = sparsity_loss(layer.alpha, cfg.weights.gamma)
        terms = replace(terms, sparsity_l1=l1, sparsity_l0=l0)
    return terms


def mean_loss_terms(parts: list[LossTerms]) -> LossTerms:
    """Term-wise arithmetic mean over equally weighted loss contributions."""
    if not parts:
        raise ValueError("no loss contributions")
    out = LossTerms()
    for name in LossTerms.__dataclass_fields__:
        total = sum(getattr(p, name) for p in parts)
        out = replace(out, **{name: total / len(parts)})
    return out


def train_step_losses(
    gen: GeneratorState,
    example_img: Image,
    bundle: TextBundle,
    step_target: str,
    cfg: TrainConfig,
    backend: EmbeddingBackend,
    relevancy: torch.Tensor | None,
    rng: np.random.Generator,
) -> tuple[torch.Tensor | float, LossReport]:
    """Generator forward + all enabled loss terms for one internal example."""
    rgba = forward_chw(gen, example_img.chw().unsqueeze(0))[0]
    layer = EditLayer(color=Image(rgba[:3].permute(1, 2, 0)), alpha=rgba[3])
    terms = compute_loss_terms(layer, example_img, bundle, step_target, cfg, backend, rng)
    if cfg.toggles.bootstrap and relevancy is not None:
        terms = replace(terms, bootstrap=bootstrap_loss(relevancy, layer.alpha))
    return total_loss(terms, cfg.weights, bootstrap_weight_at(gen.step, cfg), cfg.toggles)


def _resolve_relevancy(
    src: Image,
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
        raise ValueError(
            "bootstrap term enabled but no ROI prompt and no precomputed relevancy map"
        )
    return backend.relevancy_map(src, bundle.roi).values


def train_image(
    src: Image,
    bundle: TextBundle,
    cfg: TrainConfig,
    backend: EmbeddingBackend,
    relevancy: torch.Tensor | None = None,
) -> tuple[GeneratorState, EditLayer, TrainRunRecord]:
    """Fit a generator to one (image, prompt) input.

    Returns the trained generator, its edit layer for the un-augmented
    source, and the run record. ``relevancy`` optionally overrides the
    backend-estimated map for the bootstrap term.
    """
    start = time.monotonic()
    rng = np.random.default_rng(cfg.seed)
    gen = build(cfg.generator, seed=cfg.seed)
    opt = Madgrad(
        gen.model.parameters(),
        lr=cfg.lr0,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    relevancy = _resolve_relevancy(src, bundle, cfg, backend, relevancy)
    record = TrainRunRecord(seed=cfg.seed, config=asdict(cfg))

    gen.model.train()
    for step in range(1, cfg.total_steps + 1):
        lr = lr_at(step - 1, cfg)
        for group in opt.param_groups:
            group["lr"] = lr

        example = sample_example(step, src, bundle, cfg.augmentation, rng)
        total, report = train_step_losses(
            gen, example.image, bundle, example.text, cfg, backend, relevancy, rng
        )
        if not report.is_finite():
            raise TrainingDivergedError(step, report)

        if isinstance(total, torch.Tensor):
            (total / cfg.grad_accumulation).backward()
            if step % cfg.grad_accumulation == 0:
                if cfg.grad_clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(
                        gen.model.parameters(), cfg.grad_clip_norm
                    )
                opt.step()
                opt.zero_grad(set_to_none=True)
        gen.step = step
        record.history.append(report)
        _log_progress(step, lr, report)

    gen.model.eval()
    with torch.no_grad():
        final_layer = forward(gen, src)
    record.wall_clock_s = time.monotonic() - start
    return gen, final_layer, record


def checkpoint(state: GeneratorState, path: str | Path, record: TrainRunRecord | None = None) -> Path:
    """Persist generator parameters + config echo + step counter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "generator_config": asdict(state.config),
        "step": state.step,
        "state_dict": state.model.state_dict(),
    }
    if record is not None:
        payload["record"] = record.as_dict()
        record.checkpoint_path = str(path)
    torch.save(payload, path)
    return path


def restore(path: str | Path, expected_config: GeneratorConfig | None = None) -> GeneratorState:
    """Load a checkpoint back into a fresh generator.

    Raises :class:`CheckpointError` for unreadable files, version
    mismatches, and configs that differ from ``expected_config``.
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a generator checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    config = GeneratorConfig(**payload["generator_config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    state = build(config)
    try:
        state.model.load_state_dict(payload["state_dict"], strict=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt parameter blobs in {path}: {exc}") from exc
    state.step = int(payload["step"])
    state.model.eval()
    return state
