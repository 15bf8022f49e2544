"""Reference weight fetching, verification, and loading.

Files are cached under ``<cache_dir>/<model_id>/<sha256>.bin``; the cache
directory defaults to ``~/.cache/t2l`` and is overridden by the
``TEXT2LIVE_CACHE`` environment variable.
"""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
from pathlib import Path

import torch

from .base import BackendError
from .tokenizer import BPETokenizer
from .transformer import BackendArchitecture, DualEncoder, TransformerBackend

log = logging.getLogger(__name__)

__all__ = [
    "CACHE_ENV_VAR",
    "WeightFetchError",
    "default_cache_dir",
    "fetch_file",
    "load_checkpoint_state_dict",
    "architecture_from_state_dict",
    "reference_backend",
]

CACHE_ENV_VAR = "TEXT2LIVE_CACHE"

REFERENCE_MODEL_ID = "vit-b-32"
REFERENCE_SHA256 = "40d365715913c9da98579312b702a82c18be219cc2a73407c4526f58eba950af"
REFERENCE_URL = (
    "https://openaipublic.azureedge.net/clip/models/"
    f"{REFERENCE_SHA256}/ViT-B-32.pt"
)
VOCAB_SHA256 = "924691ac288e54409236115652ad4aa250f48203de50a9e4722a6ecd48d6804a"
VOCAB_URL = "https://github.com/openai/CLIP/raw/main/clip/bpe_simple_vocab_16e6.txt.gz"


class WeightFetchError(BackendError):
    """Download failed or the payload did not match its pinned checksum."""


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "t2l"


def _sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def fetch_file(
    url: str,
    sha256: str,
    model_id: str = REFERENCE_MODEL_ID,
    cache_dir: Path | None = None,
) -> Path:
    """Download ``url`` into the cache, verifying the pinned checksum."""
    cache = Path(cache_dir) if cache_dir else default_cache_dir()
    target = cache / model_id / f"{sha256}.bin"
    if target.exists():
        found = _sha256_of(target)
        if found == sha256:
            return target
        log.warning("cached file %s fails checksum (%s), refetching", target, found)
        target.unlink()
    target.parent.mkdir(parents=True, exist_ok=True)
    import requests

    try:
        resp = requests.get(url, stream=True, timeout=60)
        resp.raise_for_status()
    except Exception as exc:
        raise WeightFetchError(f"could not download {url}: {exc}") from exc
    digest = hashlib.sha256()
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as out:
            for chunk in resp.iter_content(1 << 20):
                digest.update(chunk)
                out.write(chunk)
        if digest.hexdigest() != sha256:
            raise WeightFetchError(
                f"{url}: checksum mismatch (expected {sha256}, got {digest.hexdigest()})"
            )
        os.replace(tmp_name, target)
    finally:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
    return target


def load_checkpoint_state_dict(path: str | Path) -> dict[str, torch.Tensor]:
    """Read a reference checkpoint: either a scripted archive or a state dict."""
    path = str(path)
    try:
        scripted = torch.jit.load(path, map_location="cpu")
        state = scripted.state_dict()
    except RuntimeError:
        obj = torch.load(path, map_location="cpu", weights_only=True)
        state = obj.get("state_dict", obj) if isinstance(obj, dict) else obj
    # scripted archives carry scalar metadata entries alongside the weights
    meta = {"input_resolution", "context_length", "vocab_size"}
    return {
        k: v.float()
        for k, v in state.items()
        if isinstance(v, torch.Tensor) and k not in meta
    }


def architecture_from_state_dict(sd: dict[str, torch.Tensor]) -> BackendArchitecture:
    """Derive the tower shapes from a reference state dict."""
    vision_width = sd["visual.conv1.weight"].shape[0]
    patch_size = sd["visual.conv1.weight"].shape[-1]
    grid = round((sd["visual.positional_embedding"].shape[0] - 1) ** 0.5)
    vision_layers = len(
        {k.split(".")[3] for k in sd if k.startswith("visual.transformer.resblocks.")}
    )
    text_width = sd["positional_embedding"].shape[1]
    text_layers = len(
        {k.split(".")[2] for k in sd if k.startswith("transformer.resblocks.")}
    )
    return BackendArchitecture(
        embed_dim=sd["text_projection"].shape[1],
        image_resolution=grid * patch_size,
        vision_width=vision_width,
        vision_layers=vision_layers,
        vision_heads=vision_width // 64,
        patch_size=patch_size,
        text_width=text_width,
        text_layers=text_layers,
        text_heads=text_width // 64,
        vocab_size=sd["token_embedding.weight"].shape[0],
        context_length=sd["positional_embedding"].shape[0],
    )


def reference_backend(
    weights_path: str | Path | None = None,
    vocab_path: str | Path | None = None,
    cache_dir: Path | None = None,
    relevancy_start_layer: int = 0,
) -> TransformerBackend:
    """Build the backend around the published pre-trained model.

    Without explicit paths the weights and tokenizer vocabulary are fetched
    (once) into the cache.
    """
    if weights_path is None:
        weights_path = fetch_file(REFERENCE_URL, REFERENCE_SHA256, cache_dir=cache_dir)
    if vocab_path is None:
        vocab_path = fetch_file(VOCAB_URL, VOCAB_SHA256, cache_dir=cache_dir)
    state = load_checkpoint_state_dict(weights_path)
    arch = architecture_from_state_dict(state)
    model = DualEncoder(arch)
    model.load_state_dict(state, strict=True)
    tokenizer = BPETokenizer(vocab_path, vocab_size=arch.vocab_size)
    return TransformerBackend(model, tokenizer, relevancy_start_layer=relevancy_start_layer)
