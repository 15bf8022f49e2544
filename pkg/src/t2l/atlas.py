"""Layered-atlas video support: package ingestion, UV-space crops,
bilinear render-back of edit layers, and frame blending.

Atlas convention: a layer is discretized at ``atlas_resolution`` texels per
axis over the continuous UV square [-1, 1]^2 (texel j center at
u = -1 + 2j/(R-1)), then stored pre-cropped to an inclusive texel window.
Per-frame UV grids map frame pixels into the continuous space.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .compositing import EditLayer, Image, ShapeError, composite
from .imageops import resize_chw

__all__ = [
    "FOREGROUND",
    "BACKGROUND",
    "AtlasPackageError",
    "TexelWindow",
    "AtlasLayer",
    "AtlasPackage",
    "VideoSegmentSample",
    "AtlasCrop",
    "sample_bilinear",
    "uv_to_texel",
    "load_package",
    "save_package",
    "synthesize_package",
    "crop_from_segment",
    "render_layer_to_frame",
    "blend_frame",
    "render_video",
]

FOREGROUND = "foreground"
BACKGROUND = "background"
LAYER_TAGS = {FOREGROUND: "fg", BACKGROUND: "bg"}

#: Foreground pixels count toward the used-UV bounds above this opacity.
FG_OPACITY_THRESHOLD = 0.95

PACKAGE_VERSION = 1


class AtlasPackageError(RuntimeError):
    """Package directory is missing pieces or fails validation."""


@dataclass(frozen=True)
class TexelWindow:
    """Inclusive texel rectangle in full-atlas coordinates."""

    col_min: int
    col_max: int
    row_min: int
    row_max: int

    def __post_init__(self):
        if self.col_max < self.col_min or self.row_max < self.row_min:
            raise ValueError(f"empty texel window {self}")

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    def contains(self, other: "TexelWindow") -> bool:
        return (
            self.col_min <= other.col_min
            and self.col_max >= other.col_max
            and self.row_min <= other.row_min
            and self.row_max >= other.row_max
        )

    def as_dict(self) -> dict[str, int]:
        return {
            "col_min": self.col_min,
            "col_max": self.col_max,
            "row_min": self.row_min,
            "row_max": self.row_max,
        }


@dataclass
class AtlasLayer:
    """One stored (pre-cropped) atlas layer."""

    name: str
    atlas: torch.Tensor  # (rows, cols, 3) float in [0, 1]
    window: TexelWindow

    def __post_init__(self):
        if (self.window.height, self.window.width) != tuple(self.atlas.shape[:2]):
            raise AtlasPackageError(
                f"{self.name}: atlas {tuple(self.atlas.shape[:2])} does not match "
                f"window {self.window.height}x{self.window.width}"
            )

    def image(self) -> Image:
        return Image(self.atlas)


@dataclass
class AtlasPackage:
    """A pre-trained layered-atlas export: atlases + per-frame UV/opacity."""

    frame_count: int
    frame_height: int
    frame_width: int
    atlas_resolution: int
    layers: dict[str, AtlasLayer]
    uv: dict[str, torch.Tensor]  # per layer: (T, H, W, 2) in [-1, 1]
    fg_opacity: torch.Tensor  # (T, H, W) in [0, 1]
    fg_used_window: TexelWindow | None = None

    def layer(self, name: str) -> AtlasLayer:
        if name not in self.layers:
            raise AtlasPackageError(f"package has no {name!r} layer")
        return self.layers[name]


@dataclass(frozen=True)
class VideoSegmentSample:
    """A spatio-temporal crop: one rectangle shared by 3 offset frames."""

    frame: int
    x: int
    y: int
    width: int
    height: int
    offset: int = 2

    @property
    def frames(self) -> tuple[int, int, int]:
        return (self.frame - self.offset, self.frame, self.frame + self.offset)

    def validate(self, pkg: AtlasPackage) -> "VideoSegmentSample":
        lo, hi = self.frames[0], self.frames[-1]
        if lo < 0 or hi >= pkg.frame_count:
            raise ValueError(
                f"segment frames {self.frames} outside [0, {pkg.frame_count})"
            )
        if self.x < 0 or self.y < 0 or self.width < 1 or self.height < 1:
            raise ValueError(f"bad crop rectangle {self}")
        if self.x + self.width > pkg.frame_width or self.y + self.height > pkg.frame_height:
            raise ValueError(
                f"crop {self} exceeds frame {pkg.frame_width}x{pkg.frame_height}"
            )
        return self


@dataclass
class AtlasCrop:
    """Minimal stored-atlas rectangle covering a segment's mapped UVs."""

    pixels: Image
    window: TexelWindow
    uv_rect: tuple[float, float, float, float]  # (u_min, u_max, v_min, v_max)
    uv_per_frame: torch.Tensor  # (3, h, w, 2), retained for render-back
    degenerate: bool = False


def uv_to_texel(uv: torch.Tensor, resolution: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Continuous UV in [-1, 1] -> fractional texel coords (x: cols, y: rows)."""
    scale = (resolution - 1) / 2.0
    return (uv[..., 0] + 1.0) * scale, (uv[..., 1] + 1.0) * scale


def sample_bilinear(texels: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Clamp-at-border bilinear lookup of (rows, cols, C) at fractional coords.

    Differentiable w.r.t. ``texels``; linear in the texel values.
    """
    rows, cols = texels.shape[0], texels.shape[1]
    flat = texels.reshape(rows * cols, -1)
    xc = xs.clamp(0.0, float(cols - 1))
    yc = ys.clamp(0.0, float(rows - 1))
    x0 = xc.floor().clamp(max=max(cols - 2, 0))
    y0 = yc.floor().clamp(max=max(rows - 2, 0))
    tx = (xc - x0).unsqueeze(-1)
    ty = (yc - y0).unsqueeze(-1)
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=cols - 1)
    y1l = (y0l + 1).clamp(max=rows - 1)
    v00 = flat[y0l * cols + x0l]
    v01 = flat[y0l * cols + x1l]
    v10 = flat[y1l * cols + x0l]
    v11 = flat[y1l * cols + x1l]
    top = v00 + tx * (v01 - v00)
    bottom = v10 + tx * (v11 - v10)
    out = top + ty * (bottom - top)
    return out.reshape(*xs.shape, texels.shape[-1])


# ---------------------------------------------------------------------------
# package I/O


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read_checked(root: Path, rel: str, checksums: dict[str, str]) -> bytes:
    path = root / rel
    if not path.exists():
        raise AtlasPackageError(f"missing package file: {rel}")
    data = path.read_bytes()
    expected = checksums.get(rel)
    if expected is None:
        raise AtlasPackageError(f"file not covered by checksums.txt: {rel}")
    found = _sha256_bytes(data)
    if found != expected:
        raise AtlasPackageError(f"checksum mismatch for {rel}: {found} != {expected}")
    return data


def _decode_atlas_png(data: bytes, rel: str) -> torch.Tensor:
    import cv2

    raw = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raw is None or raw.ndim != 3 or raw.shape[2] != 3:
        raise AtlasPackageError(f"{rel}: expected a 3-channel PNG")
    if raw.dtype != np.uint16:
        raise AtlasPackageError(f"{rel}: expected 16-bit samples, got {raw.dtype}")
    rgb = raw[..., ::-1].astype(np.float32) / 65535.0
    return torch.from_numpy(np.ascontiguousarray(rgb))


def _encode_atlas_png(atlas: torch.Tensor) -> bytes:
    import cv2

    arr = np.round(atlas.numpy() * 65535.0).astype(np.uint16)
    ok, buf = cv2.imencode(".png", arr[..., ::-1])
    if not ok:
        raise AtlasPackageError("could not encode atlas PNG")
    return buf.tobytes()


def load_package(path: str | Path) -> AtlasPackage:
    """Read and validate an atlas package directory.

    Checksums are verified for every file; UV and opacity ranges are
    validated; the foreground's used-UV window is recomputed from pixels
    whose opacity exceeds the threshold and must fall inside the stored
    window.
    """
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise AtlasPackageError(f"missing package file: meta.json in {root}")
    sums_path = root / "checksums.txt"
    if not sums_path.exists():
        raise AtlasPackageError(f"missing package file: checksums.txt in {root}")
    checksums: dict[str, str] = {}
    for line in sums_path.read_text().splitlines():
        if line.strip():
            digest, rel = line.split(maxsplit=1)
            checksums[rel.strip()] = digest

    meta = json.loads(_read_checked(root, "meta.json", checksums))
    if meta.get("version") != PACKAGE_VERSION:
        raise AtlasPackageError(f"unsupported package version {meta.get('version')}")
    frame_count = int(meta["frame_count"])
    frame_h, frame_w = int(meta["frame_height"]), int(meta["frame_width"])
    resolution = int(meta["atlas_resolution"])

    layers: dict[str, AtlasLayer] = {}
    uv: dict[str, torch.Tensor] = {}
    for name in meta["layers"]:
        tag = LAYER_TAGS[name]
        window = TexelWindow(**meta["uv_bounds"][name])
        atlas = _decode_atlas_png(
            _read_checked(root, f"atlas_{name}.png", checksums), f"atlas_{name}.png"
        )
        layers[name] = AtlasLayer(name=name, atlas=atlas, window=window)
        grids = []
        for t in range(frame_count):
            rel = f"uv/uv_{tag}_{t:05d}.raw"
            data = _read_checked(root, rel, checksums)
            arr = np.frombuffer(data, dtype="<f4").reshape(frame_h, frame_w, 2)
            if float(arr.min()) < -1.0 or float(arr.max()) > 1.0:
                raise AtlasPackageError(f"{rel}: UV values outside [-1, 1]")
            grids.append(torch.from_numpy(arr.copy()))
        uv[name] = torch.stack(grids)

    alphas = []
    for t in range(frame_count):
        rel = f"alpha/alpha_{t:05d}.raw"
        data = _read_checked(root, rel, checksums)
        arr = np.frombuffer(data, dtype="<f4").reshape(frame_h, frame_w)
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise AtlasPackageError(f"{rel}: opacity values outside [0, 1]")
        alphas.append(torch.from_numpy(arr.copy()))
    fg_opacity = torch.stack(alphas)

    pkg = AtlasPackage(
        frame_count=frame_count,
        frame_height=frame_h,
        frame_width=frame_w,
        atlas_resolution=resolution,
        layers=layers,
        uv=uv,
        fg_opacity=fg_opacity,
    )
    if FOREGROUND in layers:
        pkg.fg_used_window = _foreground_used_window(pkg)
        if pkg.fg_used_window is not None and not layers[FOREGROUND].window.contains(
            pkg.fg_used_window
        ):
            raise AtlasPackageError(
                f"foreground UV window {pkg.fg_used_window} exceeds stored "
                f"window {layers[FOREGROUND].window}"
            )
    return pkg


def _foreground_used_window(pkg: AtlasPackage) -> TexelWindow | None:
    mask = pkg.fg_opacity > FG_OPACITY_THRESHOLD
    if not bool(mask.any()):
        return None
    uv = pkg.uv[FOREGROUND][mask]
    xs, ys = uv_to_texel(uv, pkg.atlas_resolution)
    return TexelWindow(
        col_min=int(math.floor(float(xs.min()))),
        col_max=int(math.ceil(float(xs.max()))),
        row_min=int(math.floor(float(ys.min()))),
        row_max=int(math.ceil(float(ys.max()))),
    )


def save_package(pkg: AtlasPackage, path: str | Path) -> Path:
    """Write a package directory in the on-disk format (with checksums)."""
    root = Path(path)
    (root / "uv").mkdir(parents=True, exist_ok=True)
    (root / "alpha").mkdir(parents=True, exist_ok=True)
    files: dict[str, bytes] = {}
    meta = {
        "version": PACKAGE_VERSION,
        "frame_count": pkg.frame_count,
        "frame_width": pkg.frame_width,
        "frame_height": pkg.frame_height,
        "layers": list(pkg.layers),
        "atlas_resolution": pkg.atlas_resolution,
        "uv_bounds": {name: layer.window.as_dict() for name, layer in pkg.layers.items()},
    }
    files["meta.json"] = json.dumps(meta, indent=1).encode()
    for name, layer in pkg.layers.items():
        files[f"atlas_{name}.png"] = _encode_atlas_png(layer.atlas)
        tag = LAYER_TAGS[name]
        for t in range(pkg.frame_count):
            arr = pkg.uv[name][t].numpy().astype("<f4")
            files[f"uv/uv_{tag}_{t:05d}.raw"] = arr.tobytes()
    for t in range(pkg.frame_count):
        files[f"alpha/alpha_{t:05d}.raw"] = pkg.fg_opacity[t].numpy().astype("<f4").tobytes()
    lines = []
    for rel, data in files.items():
        (root / rel).write_bytes(data)
        lines.append(f"{_sha256_bytes(data)}  {rel}")
    (root / "checksums.txt").write_text("\n".join(lines) + "\n")
    return root


# ---------------------------------------------------------------------------
# synthetic packages (test fixtures and the synth-package CLI)


def synthesize_package(
    kind: str = "translate",
    frame_count: int = 10,
    frame_size: tuple[int, int] = (48, 64),
    atlas_resolution: int = 160,
    seed: int = 0,
) -> AtlasPackage:
    """Construct a small, fully valid package in memory.

    ``identity``: UVs are the normalized pixel coordinates of every frame.
    ``translate``: frames are integer-shifted windows into a shared texture,
    so identical scene points map to identical UVs across frames.
    ``random``: smooth random UV fields (for bounds oracles).
    """
    if kind not in ("identity", "translate", "random"):
        raise ValueError(f"unknown synthetic package kind {kind!r}")
    h, w = frame_size
    if max(h, w) > atlas_resolution:
        raise ValueError(
            f"frame {h}x{w} does not fit an atlas of resolution {atlas_resolution}"
        )
    rng = np.random.default_rng(seed)
    res = atlas_resolution
    scale = (res - 1) / 2.0

    def texel_uv(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return np.stack([xs / scale - 1.0, ys / scale - 1.0], axis=-1)

    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    uv_frames: dict[str, list[np.ndarray]] = {FOREGROUND: [], BACKGROUND: []}
    max_shift = max(res - w - 1, 0)
    for t in range(frame_count):
        if kind == "identity":
            fg = texel_uv(gx, gy)
            bg = texel_uv(gx, gy)
        elif kind == "translate":
            shift = (t * 3) % (max_shift + 1)
            bg = texel_uv(gx + shift, gy)
            fg = texel_uv(gx + shift // 2, gy)
        else:
            fg = rng.uniform(-1.0, 1.0, size=(h, w, 2))
            fg = 0.5 * (fg + np.roll(fg, 1, axis=0))  # mildly smooth
            bg = rng.uniform(-1.0, 1.0, size=(h, w, 2))
        uv_frames[FOREGROUND].append(fg.astype(np.float32))
        uv_frames[BACKGROUND].append(bg.astype(np.float32))

    cy, cx = h / 2.0, w / 2.0
    disc = (((gy - cy) / (0.3 * h)) ** 2 + ((gx - cx) / (0.3 * w)) ** 2) < 1.0
    fg_opacity = np.where(disc, 0.97, 0.02).astype(np.float32)
    fg_opacity = np.repeat(fg_opacity[None], frame_count, axis=0)

    layers: dict[str, AtlasLayer] = {}
    uv: dict[str, torch.Tensor] = {}
    for name in (FOREGROUND, BACKGROUND):
        grids = torch.from_numpy(np.stack(uv_frames[name]))
        uv[name] = grids
        xs, ys = uv_to_texel(grids, res)
        window = TexelWindow(
            col_min=int(math.floor(float(xs.min()))),
            col_max=int(math.ceil(float(xs.max()))),
            row_min=int(math.floor(float(ys.min()))),
            row_max=int(math.ceil(float(ys.max()))),
        )
        texture = rng.uniform(0.0, 1.0, size=(window.height, window.width, 3))
        # quantize so a 16-bit PNG round-trip is exact
        texture = np.round(texture * 65535.0) / 65535.0
        layers[name] = AtlasLayer(
            name=name,
            atlas=torch.from_numpy(texture.astype(np.float32)),
            window=window,
        )

    pkg = AtlasPackage(
        frame_count=frame_count,
        frame_height=h,
        frame_width=w,
        atlas_resolution=res,
        layers=layers,
        uv=uv,
        fg_opacity=torch.from_numpy(fg_opacity),
    )
    pkg.fg_used_window = _foreground_used_window(pkg)
    return pkg


# ---------------------------------------------------------------------------
# crops and rendering


def crop_from_segment(pkg: AtlasPackage, sample: VideoSegmentSample, layer_name: str) -> AtlasCrop:
    """The minimal stored-atlas crop covering every mapped segment location."""
    sample.validate(pkg)
    layer = pkg.layer(layer_name)
    frames = torch.tensor(sample.frames)
    uv = pkg.uv[layer_name][frames][
        :, sample.y : sample.y + sample.height, sample.x : sample.x + sample.width, :
    ]
    xs, ys = uv_to_texel(uv, pkg.atlas_resolution)
    u_min, u_max = float(uv[..., 0].min()), float(uv[..., 0].max())
    v_min, v_max = float(uv[..., 1].min()), float(uv[..., 1].max())
    degenerate = u_min == u_max or v_min == v_max
    window = TexelWindow(
        col_min=max(int(math.floor(float(xs.min()))), layer.window.col_min),
        col_max=min(int(math.ceil(float(xs.max()))), layer.window.col_max),
        row_min=max(int(math.floor(float(ys.min()))), layer.window.row_min),
        row_max=min(int(math.ceil(float(ys.max()))), layer.window.row_max),
    )
    r0 = window.row_min - layer.window.row_min
    c0 = window.col_min - layer.window.col_min
    pixels = layer.atlas[r0 : r0 + window.height, c0 : c0 + window.width]
    return AtlasCrop(
        pixels=Image(pixels),
        window=window,
        uv_rect=(u_min, u_max, v_min, v_max),
        uv_per_frame=uv,
        degenerate=degenerate,
    )


def render_layer_to_frame(
    edit: EditLayer,
    uv: torch.Tensor,
    window: TexelWindow,
    atlas_resolution: int,
) -> tuple[EditLayer, torch.Tensor]:
    """Bilinearly sample an atlas-space edit layer onto frame pixels.

    ``edit`` lives on the texels of ``window``; ``uv`` is (H, W, 2). UVs
    falling outside the window are clamped to its border and reported in the
    returned validity mask (1 inside, 0 clamped).
    """
    if (edit.height, edit.width) != (window.height, window.width):
        raise ShapeError(
            f"edit layer {(edit.height, edit.width)} does not cover "
            f"window {(window.height, window.width)}"
        )
    xs, ys = uv_to_texel(uv, atlas_resolution)
    xs = xs - window.col_min
    ys = ys - window.row_min
    valid = (
        (xs >= 0.0)
        & (xs <= float(window.width - 1))
        & (ys >= 0.0)
        & (ys <= float(window.height - 1))
    ).to(edit.alpha.dtype)
    rgba = sample_bilinear(edit.rgba(), xs, ys)
    return EditLayer.from_rgba(rgba), valid


def blend_frame(
    original: Image | None,
    edit_fg: EditLayer | None,
    edit_bg: EditLayer | None,
    fg_opacity: torch.Tensor,
    fg_content: Image | None = None,
    bg_content: Image | None = None,
) -> Image:
    """Compose edited layers into one frame.

    Each edited layer is composited over its reconstructed content, then the
    two layers are blended by the foreground opacity. With no edits at all
    the original frame passes through bit-identically.
    """
    if edit_fg is None and edit_bg is None:
        if original is None:
            raise ValueError("nothing to blend: no edits and no original frame")
        return original
    ref = fg_content if fg_content is not None else bg_content
    if original is not None:
        ref = original
    if ref is not None and fg_opacity.shape != ref.pixels.shape[:2]:
        raise ShapeError(
            f"opacity {tuple(fg_opacity.shape)} does not match "
            f"frame {tuple(ref.pixels.shape[:2])}"
        )
    if (edit_fg is not None and fg_content is None) or (
        edit_bg is not None and bg_content is None
    ):
        raise ValueError("an edited layer needs its reconstructed content")
    fg = composite(edit_fg, fg_content) if edit_fg is not None else fg_content
    bg = composite(edit_bg, bg_content) if edit_bg is not None else bg_content
    if fg is None or bg is None:
        raise ValueError("both layer contents are required to blend an edited frame")
    op = fg_opacity.unsqueeze(-1)
    out = op * fg.pixels + (1.0 - op) * bg.pixels
    return Image(out.clamp(0.0, 1.0))


def _sample_layer_image(
    pkg: AtlasPackage, layer: AtlasLayer, uv: torch.Tensor
) -> Image:
    xs, ys = uv_to_texel(uv, pkg.atlas_resolution)
    texels = sample_bilinear(
        layer.atlas, xs - layer.window.col_min, ys - layer.window.row_min
    )
    return Image(texels.clamp(0.0, 1.0))


def render_video(
    pkg: AtlasPackage,
    fg_state=None,
    bg_state=None,
    downscale_bg: int = 1,
) -> list[Image]:
    """Run trained generators over the full atlases and rebuild every frame."""
    if fg_state is None and bg_state is None:
        raise ValueError("need at least one trained generator")
    from .generator import forward as generator_forward

    edits: dict[str, EditLayer] = {}
    for name, state in ((FOREGROUND, fg_state), (BACKGROUND, bg_state)):
        if state is None:
            continue
        layer = pkg.layer(name)
        atlas_img = layer.image()
        if name == BACKGROUND and downscale_bg > 1:
            chw = resize_chw(
                atlas_img.chw(),
                max(1, layer.window.height // downscale_bg),
                max(1, layer.window.width // downscale_bg),
            )
            small = generator_forward(state, Image(chw.permute(1, 2, 0).clamp(0, 1)))
            rgba = resize_chw(
                small.rgba().permute(2, 0, 1), layer.window.height, layer.window.width
            )
            edits[name] = EditLayer.from_rgba(rgba.permute(1, 2, 0))
        else:
            with torch.no_grad():
                edits[name] = generator_forward(state, atlas_img)

    frames: list[Image] = []
    for t in range(pkg.frame_count):
        fg_layer = pkg.layer(FOREGROUND)
        bg_layer = pkg.layer(BACKGROUND)
        fg_content = _sample_layer_image(pkg, fg_layer, pkg.uv[FOREGROUND][t])
        bg_content = _sample_layer_image(pkg, bg_layer, pkg.uv[BACKGROUND][t])
        edit_fg = edit_bg = None
        if FOREGROUND in edits:
            edit_fg, _ = render_layer_to_frame(
                edits[FOREGROUND], pkg.uv[FOREGROUND][t], fg_layer.window, pkg.atlas_resolution
            )
        if BACKGROUND in edits:
            edit_bg, _ = render_layer_to_frame(
                edits[BACKGROUND], pkg.uv[BACKGROUND][t], bg_layer.window, pkg.atlas_resolution
            )
        frames.append(
            blend_frame(
                None,
                edit_fg,
                edit_bg,
                pkg.fg_opacity[t],
                fg_content=fg_content,
                bg_content=bg_content,
            )
        )
    return frames
