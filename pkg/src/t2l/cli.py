"""Command-line entry points.

Exit codes: 1 configuration, 2 I/O, 3 training, 4 backend.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import click
import torch

from .atlas import (
    BACKGROUND,
    FOREGROUND,
    AtlasPackageError,
    load_package,
    render_video,
    save_package,
    synthesize_package,
)
from .backend import BackendError, EmbeddingBackend, reference_backend, synthetic_backend
from .compositing import Image, TextBundle, composite
from .config import (
    BackendSpec,
    ConfigError,
    MissingPathError,
    RunConfig,
    load_config_file,
    validate_config,
)
from .generator import forward as generator_forward
from .io import (
    IOFailure,
    atomic_output_dir,
    output_lock,
    read_image,
    read_relevancy,
    write_edit_layer,
    write_image,
    write_json,
)
from .training import TrainingDivergedError, checkpoint, train_image
from .video import train_video

log = logging.getLogger(__name__)

EXIT_CONFIG, EXIT_IO, EXIT_TRAINING, EXIT_BACKEND = 1, 2, 3, 4

DISABLE_CHOICES = (
    "composition",
    "screen",
    "structure",
    "sparsity",
    "bootstrap",
    "directional",
    "augmentations",
)


@dataclass
class OutputBundle:
    """Paths of the artifacts one run produces."""

    out_dir: Path
    edit_layers: list[Path] = field(default_factory=list)
    composites: list[Path] = field(default_factory=list)
    records: list[Path] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def build_backend(spec: BackendSpec) -> EmbeddingBackend:
    if spec.kind == "synthetic":
        return synthetic_backend(seed=spec.seed)
    return reference_backend(
        weights_path=spec.weights_path,
        vocab_path=spec.vocab_path,
        cache_dir=Path(spec.cache_dir) if spec.cache_dir else None,
        relevancy_start_layer=spec.relevancy_start_layer,
    )


def _effective_train_config(cfg: RunConfig, have_relevancy: bool):
    train = cfg.train
    if train.toggles.bootstrap and cfg.bundle.roi is None and not have_relevancy:
        log.warning("no ROI prompt and no relevancy map; disabling the bootstrap term")
        train = replace(train, toggles=replace(train.toggles, bootstrap=False))
    return train


def run_edit_image(cfg: RunConfig) -> OutputBundle:
    """Train on one image and write the output bundle atomically."""
    src = read_image(cfg.input_path)
    backend = build_backend(cfg.backend)
    relevancy = read_relevancy(cfg.relevancy_path) if cfg.relevancy_path else None
    train_cfg = _effective_train_config(cfg, relevancy is not None)

    with output_lock(cfg.out_dir), atomic_output_dir(cfg.out_dir) as tmp:
        gen, layer, record = train_image(src, cfg.bundle, train_cfg, backend, relevancy)
        bundle = OutputBundle(out_dir=Path(cfg.out_dir))
        write_edit_layer(layer, tmp / "edit_layer.png", cfg.bit_depth)
        write_image(composite(layer, src), tmp / "composite.png")
        checkpoint(gen, tmp / "checkpoint.pt")
        record.checkpoint_path = "checkpoint.pt"
        write_json(record.as_dict(), tmp / "record.json")
    out = Path(cfg.out_dir)
    bundle.edit_layers = [out / "edit_layer.png"]
    bundle.composites = [out / "composite.png"]
    bundle.checkpoints = [out / "checkpoint.pt"]
    bundle.records = [out / "record.json"]
    return bundle


def run_edit_video(cfg: RunConfig) -> OutputBundle:
    """Train the requested layer generators sequentially and render all frames."""
    pkg = load_package(cfg.package_path)
    backend = build_backend(cfg.backend)
    relevancy = read_relevancy(cfg.relevancy_path) if cfg.relevancy_path else None
    train_cfg = _effective_train_config(cfg, relevancy is not None)

    layer_names = {
        "fg": [FOREGROUND],
        "bg": [BACKGROUND],
        "both": [FOREGROUND, BACKGROUND],
    }[cfg.layer_choice]

    bundle = OutputBundle(out_dir=Path(cfg.out_dir))
    with output_lock(cfg.out_dir), atomic_output_dir(cfg.out_dir) as tmp:
        states: dict[str, object] = {}
        for name in layer_names:
            tag = "fg" if name == FOREGROUND else "bg"
            gen, record = train_video(pkg, name, cfg.bundle, train_cfg, backend, relevancy)
            states[name] = gen
            with torch.no_grad():
                atlas_edit = generator_forward(gen, pkg.layer(name).image())
            write_edit_layer(atlas_edit, tmp / f"edit_layer_{tag}.png", cfg.bit_depth)
            checkpoint(gen, tmp / f"checkpoint_{tag}.pt")
            record.checkpoint_path = f"checkpoint_{tag}.pt"
            write_json(record.as_dict(), tmp / f"record_{tag}.json")
        frames = render_video(
            pkg,
            fg_state=states.get(FOREGROUND),
            bg_state=states.get(BACKGROUND),
        )
        frame_dir = tmp / "frames"
        for t, frame in enumerate(frames):
            write_image(frame, frame_dir / f"composite_{t:05d}.png")
    out = Path(cfg.out_dir)
    for name in layer_names:
        tag = "fg" if name == FOREGROUND else "bg"
        bundle.edit_layers.append(out / f"edit_layer_{tag}.png")
        bundle.checkpoints.append(out / f"checkpoint_{tag}.pt")
        bundle.records.append(out / f"record_{tag}.json")
    bundle.composites = sorted((out / "frames").glob("composite_*.png"))
    return bundle


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _raw_from_flags(mode, config, out, prompt, roi, screen, seed, steps, backend_kind,
                    disable, view_count, bit_depth, relevancy, **extra) -> dict:
    raw = load_config_file(config) if config else {}
    flags: dict = {"mode": mode, "prompts": {}}
    if out:
        flags["output_dir"] = out
    if prompt:
        flags["prompts"]["target"] = prompt[0]
        if len(prompt) > 1:
            flags["prompts"]["extra_targets"] = list(prompt[1:])
    if roi:
        flags["prompts"]["roi"] = roi
    if screen:
        flags["prompts"]["screen_subject"] = screen
    if seed is not None:
        flags["seed"] = seed
    if steps is not None:
        flags.setdefault("trainer", {})["total_steps"] = steps
    if backend_kind:
        flags.setdefault("backend", {})["kind"] = backend_kind
    if view_count is not None:
        flags.setdefault("augmentation", {})["clip_view_count"] = view_count
    if bit_depth is not None:
        flags["bit_depth"] = bit_depth
    if relevancy:
        flags["relevancy_map"] = relevancy
    for term in disable:
        if term == "augmentations":
            flags.setdefault("augmentation", {})["enabled"] = False
        else:
            flags.setdefault("toggles", {})[term] = False
    if not flags["prompts"]:
        del flags["prompts"]
    for key, value in extra.items():
        if value is not None:
            flags[key] = value
    return _merge(raw, flags)


def _execute(fn) -> None:
    try:
        bundle = fn()
    except MissingPathError as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(EXIT_IO)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except TrainingDivergedError as exc:
        click.echo(f"training error: {exc}", err=True)
        sys.exit(EXIT_TRAINING)
    except BackendError as exc:
        click.echo(f"backend error: {exc}", err=True)
        sys.exit(EXIT_BACKEND)
    except (IOFailure, AtlasPackageError, OSError) as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(EXIT_IO)
    click.echo(f"wrote output bundle to {bundle.out_dir}")


def _common_options(fn):
    options = [
        click.option("--config", type=click.Path(), default=None, help="YAML/JSON run config."),
        click.option("--prompt", multiple=True, help="Target text (repeat for variants)."),
        click.option("--roi", default=None, help="Region-of-interest prompt."),
        click.option("--screen", default=None, help="Screen-prompt subject (default: target)."),
        click.option("--out", type=click.Path(), default=None, help="Output bundle directory."),
        click.option("--seed", type=int, default=None),
        click.option("--steps", type=int, default=None, help="Override total training steps."),
        click.option("--backend", "backend_kind", type=click.Choice(["reference", "synthetic"]),
                      default=None),
        click.option("--disable", multiple=True, type=click.Choice(DISABLE_CHOICES),
                      help="Switch a loss term (or the dataset augmentations) off."),
        click.option("--view-count", type=int, default=None),
        click.option("--bit-depth", type=click.Choice(["8", "16"]), default=None,
                      callback=lambda c, p, v: int(v) if v else None),
        click.option("--relevancy", type=click.Path(), default=None,
                      help="Precomputed 224x224 relevancy map (.npy or image)."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Per-step progress lines.")
def main(verbose: bool) -> None:
    """Text-driven layered editing of single images and atlas videos."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("image")
@click.option("--input", "input_path", type=click.Path(), required=True)
@_common_options
def image_cmd(input_path, config, prompt, roi, screen, out, seed, steps,
              backend_kind, disable, view_count, bit_depth, relevancy):
    """Train an edit layer for one image."""

    def run():
        raw = _raw_from_flags("image", config, out, prompt, roi, screen, seed, steps,
                              backend_kind, disable, view_count, bit_depth, relevancy,
                              input=input_path)
        return run_edit_image(validate_config(raw))

    _execute(run)


@main.command("video")
@click.option("--package", "package_path", type=click.Path(), required=True,
              help="Atlas package directory.")
@click.option("--layer", type=click.Choice(["fg", "bg", "both"]), default="fg")
@_common_options
def video_cmd(package_path, layer, config, prompt, roi, screen, out, seed, steps,
              backend_kind, disable, view_count, bit_depth, relevancy):
    """Train edit layers for an atlas video and render all frames."""

    def run():
        raw = _raw_from_flags("video", config, out, prompt, roi, screen, seed, steps,
                              backend_kind, disable, view_count, bit_depth, relevancy,
                              package=package_path, layer=layer)
        return run_edit_video(validate_config(raw))

    _execute(run)


@main.command("synth-package")
@click.option("--out", type=click.Path(), required=True)
@click.option("--kind", type=click.Choice(["identity", "translate", "random"]),
              default="translate")
@click.option("--frames", type=int, default=10)
@click.option("--height", type=int, default=48)
@click.option("--width", type=int, default=64)
@click.option("--resolution", type=int, default=160)
@click.option("--seed", type=int, default=0)
def synth_package_cmd(out, kind, frames, height, width, resolution, seed):
    """Write a synthetic atlas package (test fixture)."""
    try:
        pkg = synthesize_package(
            kind=kind,
            frame_count=frames,
            frame_size=(height, width),
            atlas_resolution=resolution,
            seed=seed,
        )
        save_package(pkg, out)
    except (ValueError, AtlasPackageError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except OSError as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(EXIT_IO)
    click.echo(f"wrote synthetic package to {out}")


if __name__ == "__main__":
    main()
