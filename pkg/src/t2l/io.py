"""File-boundary conversions and atomic output-bundle writing.

All in-memory pixel data is float in [0, 1]; quantization to 8/16-bit
happens only here (round-half-to-even).
"""

from __future__ import annotations

import contextlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .compositing import EditLayer, Image

__all__ = [
    "IOFailure",
    "OutputLockError",
    "to_uint8",
    "from_uint8",
    "read_image",
    "write_image",
    "write_edit_layer",
    "read_relevancy",
    "atomic_output_dir",
    "output_lock",
]


class IOFailure(OSError):
    """File could not be read or written."""


class OutputLockError(IOFailure):
    """Another run holds the output directory lock."""


def to_uint8(values: torch.Tensor) -> np.ndarray:
    return np.round(values.detach().cpu().numpy() * 255.0).astype(np.uint8)


def from_uint8(values: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(values.astype(np.float32) / 255.0)


def read_image(path: str | Path) -> Image:
    try:
        with PILImage.open(path) as img:
            rgb = np.asarray(img.convert("RGB"))
    except FileNotFoundError:
        raise IOFailure(f"input image not found: {path}") from None
    except Exception as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from exc
    return Image(from_uint8(rgb))


def write_image(img: Image, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img.pixels), mode="RGB").save(path)
    return path


def write_edit_layer(layer: EditLayer, path: str | Path, bit_depth: int = 8) -> Path:
    """Write the layer as straight-alpha RGBA (8-bit PNG, or 16-bit via PNG)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgba = layer.rgba()
    if bit_depth == 8:
        PILImage.fromarray(to_uint8(rgba), mode="RGBA").save(path)
    elif bit_depth == 16:
        import cv2

        arr = np.round(rgba.detach().cpu().numpy() * 65535.0).astype(np.uint16)
        bgra = arr[..., [2, 1, 0, 3]]
        if not cv2.imwrite(str(path), bgra):
            raise IOFailure(f"cannot write 16-bit layer to {path}")
    else:
        raise ValueError(f"unsupported bit depth {bit_depth}")
    return path


def read_relevancy(path: str | Path) -> torch.Tensor:
    """Load a precomputed 224 x 224 relevancy map (.npy or grayscale image)."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
    else:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("L")).astype(np.float32) / 255.0
    t = torch.from_numpy(arr)
    if t.ndim != 2:
        raise IOFailure(f"{path}: relevancy map must be 2-D, got {tuple(t.shape)}")
    if float(t.min()) < 0.0 or float(t.max()) > 1.0:
        raise IOFailure(f"{path}: relevancy values outside [0, 1]")
    return t


@contextlib.contextmanager
def atomic_output_dir(final: str | Path):
    """Stage outputs in a temp dir, renamed to ``final`` only on success."""
    final = Path(final)
    if final.exists():
        if final.is_dir() and not any(final.iterdir()):
            final.rmdir()
        else:
            raise IOFailure(f"output directory {final} already exists and is not empty")
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}.tmp-"))
    try:
        yield tmp
        os.replace(tmp, final)
    except Exception:
        import shutil

        shutil.rmtree(tmp, ignore_errors=True)
        raise


@contextlib.contextmanager
def output_lock(final: str | Path):
    """One run per output path, enforced by an exclusive lockfile."""
    lock_path = Path(str(final) + ".lock")
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLockError(
            f"output {final} is locked by another run (remove {lock_path} if stale)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock_path.unlink()


def write_json(payload: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path
