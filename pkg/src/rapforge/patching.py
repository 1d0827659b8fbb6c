"""Patch application: scaling to face area, modular tiling, masked compositing.

The full application pipeline is: resize the patch so that its area is
``alpha`` times the area of the largest ground-truth face, tile the resized
patch across the whole frame with modular indexing, then alpha-blend so the
masked foreground keeps the original pixels and the background shows the
tile. Every stage is differentiable with respect to the patch pixels, so
the same code path serves both rendering and gradient-based training.

Numpy-facing helpers wrap a torch core; the torch functions (``*_t``) are
the ones the optimizer drives with autograd.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .geometry import GroundTruthSet


@dataclass
class Patch:
    """The trainable pixel grid, (h, w, c) float64 with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ValueError(f"patch pixels must be (h, w, c), got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("patch must be at least 1x1")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("patch pixels must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class ScaledPatch:
    """Patch resized so its area tracks the largest face, plus the used scale."""

    pixels: np.ndarray
    scale: float

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchTile:
    """Full-frame grid where pixel (x, y) equals scaled[(x mod w, y mod h)]."""

    pixels: np.ndarray


@dataclass
class ForegroundMask:
    """Per-pixel foreground weight in [0, 1]; 1 keeps the image, 0 shows the tile."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"mask must be a single-channel (H, W) grid, got shape {v.shape}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        self.values = v


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def compute_scale(patch_w: int, patch_h: int, gts: GroundTruthSet, alpha: float) -> Tuple[float, int, int]:
    """Scale factor and rounded output size aligning patch area to alpha x face area.

    The largest-area ground-truth box drives the scale; rounded dimensions
    are floored at 1 so tiny faces never collapse the patch.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not gts:
        raise ValueError("scaling requires a non-empty ground-truth set")
    largest = max(gts, key=lambda b: b.area)
    s = math.sqrt(alpha * largest.w * largest.h / (patch_h * patch_w))
    out_w = max(1, round_half_up(patch_w * s))
    out_h = max(1, round_half_up(patch_h * s))
    return s, out_w, out_h


def scale_patch_t(patch: torch.Tensor, gts: GroundTruthSet, alpha: float) -> Tuple[torch.Tensor, float]:
    """Bilinear-resize a (h, w, c) patch tensor; returns (scaled, scale factor)."""
    s, out_w, out_h = compute_scale(patch.shape[1], patch.shape[0], gts, alpha)
    chw = patch.permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(chw, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return resized.squeeze(0).permute(1, 2, 0), s


def scale_patch(patch: Patch, gts: GroundTruthSet, alpha: float) -> ScaledPatch:
    """Resize the patch so area(scaled) / area(largest face) tracks alpha."""
    with torch.no_grad():
        t, s = scale_patch_t(torch.from_numpy(patch.pixels), gts, alpha)
    return ScaledPatch(pixels=t.numpy(), scale=s)


def tile_patch_t(
    image_w: int,
    image_h: int,
    scaled: torch.Tensor,
    phase: Tuple[int, int] = (0, 0),
) -> torch.Tensor:
    """Tile a scaled (h, w, c) patch over an image_h x image_w frame.

    Output pixel (x, y) is scaled[(x - dx) mod w, (y - dy) mod h]; partial
    tiles at the right and bottom edges are truncated to the frame.
    """
    if image_w < 1 or image_h < 1:
        raise ValueError(f"image dimensions must be >= 1, got {image_w}x{image_h}")
    h, w = scaled.shape[0], scaled.shape[1]
    dx, dy = phase
    xs = (torch.arange(image_w) - dx) % w
    ys = (torch.arange(image_h) - dy) % h
    return scaled[ys][:, xs]


def tile_patch(
    image_w: int,
    image_h: int,
    scaled: ScaledPatch,
    phase: Tuple[int, int] = (0, 0),
) -> PatchTile:
    with torch.no_grad():
        t = tile_patch_t(image_w, image_h, torch.from_numpy(scaled.pixels), phase)
    return PatchTile(pixels=t.numpy())


def composite_t(foreground: torch.Tensor, mask: torch.Tensor, background: torch.Tensor) -> torch.Tensor:
    """Alpha blend: mask * foreground + (1 - mask) * background.

    All three inputs must share height and width; the mask is (H, W) and
    broadcasts over channels. Real-valued masks blend softly, hard 0/1
    masks reduce to plain foreground/background replacement.
    """
    if foreground.shape != background.shape:
        raise ValueError(
            f"foreground/background shapes differ: {tuple(foreground.shape)} vs {tuple(background.shape)}"
        )
    if mask.shape != foreground.shape[:2]:
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match image {tuple(foreground.shape[:2])}"
        )
    m = mask.unsqueeze(-1)
    return m * foreground + (1.0 - m) * background


def composite(foreground: np.ndarray, mask: ForegroundMask, background: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        out = composite_t(
            torch.from_numpy(np.asarray(foreground, dtype=np.float64)),
            torch.from_numpy(mask.values),
            torch.from_numpy(np.asarray(background, dtype=np.float64)),
        )
    return out.numpy()


def apply_patch_t(
    image: torch.Tensor,
    gts: GroundTruthSet,
    patch: torch.Tensor,
    alpha: float,
    mask: torch.Tensor,
    phase: Tuple[int, int] = (0, 0),
) -> torch.Tensor:
    """Scaled+tiled application: foreground kept, background shows the tile."""
    scaled, _ = scale_patch_t(patch, gts, alpha)
    tile = tile_patch_t(image.shape[1], image.shape[0], scaled, phase)
    return composite_t(image, mask, tile)


def apply_patch(
    image: np.ndarray,
    gts: GroundTruthSet,
    patch: Patch,
    alpha: float,
    mask: ForegroundMask,
    phase: Tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Render a patched image: person pixels survive, background becomes tile."""
    with torch.no_grad():
        out = apply_patch_t(
            torch.from_numpy(np.asarray(image, dtype=np.float64)),
            gts,
            torch.from_numpy(patch.pixels),
            alpha,
            torch.from_numpy(mask.values),
            phase,
        )
    return out.numpy()


def paste_patch_t(
    image: torch.Tensor,
    patch: torch.Tensor,
    mask: torch.Tensor,
    origin: Tuple[int, int] = (0, 0),
) -> torch.Tensor:
    """Fixed-position application: one untiled copy at ``origin`` (x, y).

    Used by the positional baselines; the foreground mask still wins inside
    the pasted region and the patch is clipped at the frame edges.
    """
    h_img, w_img = image.shape[0], image.shape[1]
    ox, oy = origin
    x1, y1 = max(0, ox), max(0, oy)
    x2 = min(w_img, ox + patch.shape[1])
    y2 = min(h_img, oy + patch.shape[0])
    out = image.clone()
    if x1 >= x2 or y1 >= y2:
        return out
    region = patch[y1 - oy : y2 - oy, x1 - ox : x2 - ox]
    m = mask[y1:y2, x1:x2].unsqueeze(-1)
    out[y1:y2, x1:x2] = m * image[y1:y2, x1:x2] + (1.0 - m) * region
    return out


def paste_patch(
    image: np.ndarray,
    patch_pixels: np.ndarray,
    mask: ForegroundMask,
    origin: Tuple[int, int] = (0, 0),
) -> np.ndarray:
    with torch.no_grad():
        out = paste_patch_t(
            torch.from_numpy(np.asarray(image, dtype=np.float64)),
            torch.from_numpy(np.asarray(patch_pixels, dtype=np.float64)),
            torch.from_numpy(mask.values),
            origin,
        )
    return out.numpy()


def render_patched(
    image: torch.Tensor,
    gts: GroundTruthSet,
    patch: torch.Tensor,
    mask: torch.Tensor,
    alpha: float,
    placement: str = "tile",
    tile_phase: Tuple[int, int] = (0, 0),
    fixed_origin: Tuple[int, int] = (0, 0),
):
    """Scale the patch for this image's faces and place it per ``placement``.

    Returns the patched frame plus the center-format box of one patch
    instance (the tile cell at the phase origin, or the pasted region),
    which the dpatch baseline uses as its attack target.
    """
    from .geometry import Box

    scaled, _ = scale_patch_t(patch, gts, alpha)
    h_s, w_s = scaled.shape[0], scaled.shape[1]
    if placement == "tile":
        tile = tile_patch_t(image.shape[1], image.shape[0], scaled, tile_phase)
        out = composite_t(image, mask, tile)
        ox, oy = tile_phase
    elif placement == "fixed":
        out = paste_patch_t(image, scaled, mask, fixed_origin)
        ox, oy = fixed_origin
    else:
        raise ValueError(f"unknown placement '{placement}'")
    return out, Box(ox + w_s / 2.0, oy + h_s / 2.0, float(w_s), float(h_s))


# ---------------------------------------------------------------------------
# File formats: masks are grayscale PNG sidecars, patch checkpoints are a
# lossless PNG plus a JSON metadata sidecar.
# ---------------------------------------------------------------------------


def mask_path_for(image_path: Path) -> Path:
    image_path = Path(image_path)
    return image_path.with_name(image_path.stem + ".mask.png")


def load_mask(path: Path) -> ForegroundMask:
    """Read a single-channel 8-bit mask PNG, mapping 0..255 to [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return ForegroundMask(values=arr)


def save_mask(path: Path, mask: ForegroundMask) -> None:
    arr = np.clip(np.rint(mask.values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_patch(path: Path, patch: Patch, alpha: float, config_digest: str = "") -> None:
    """Write the patch as 8-bit PNG plus a `.json` metadata sidecar."""
    path = Path(path)
    arr = np.clip(np.rint(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        img = Image.fromarray(arr, mode="RGB")
    img.save(path, format="PNG")
    meta = {
        "w_p": patch.width,
        "h_p": patch.height,
        "alpha": alpha,
        "config_hash": config_digest,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_patch(path: Path) -> Tuple[Patch, Optional[dict]]:
    """Read a patch PNG and its JSON sidecar (None when the sidecar is absent)."""
    path = Path(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
    return Patch(pixels=arr), meta
