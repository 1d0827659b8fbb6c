"""Dataset manifests, image I/O, and synthetic blob-face scene generation.

A dataset is a JSON-lines manifest, one record per image, with paths
resolved relative to the manifest file:

    {"image_id": ..., "path": ..., "mask_path": ..., "boxes": [[x,y,w,h], ...],
     "shift": [dx, dy]}          # shift only for coordinate-shifted samples

Box tuples are center-format (x, y, w, h). Ground truth follows the
pre-patch-inference convention: the generator runs the detector on each
clean scene and stores its detections as the ground truth, dropping scenes
the detector cannot find a face in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import Box, GroundTruthSet
from .patching import ForegroundMask, mask_path_for, save_mask


def load_image(path) -> np.ndarray:
    """Read an image file into an (H, W, 3) float64 array in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


@dataclass
class DatasetEntry:
    image_id: str
    image_path: Path
    mask_path: Optional[Path]
    gts: GroundTruthSet
    shift: Optional[Tuple[int, int]] = None


def write_manifest(path: Path, entries: Sequence[DatasetEntry]) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w") as fh:
        for e in entries:
            rec = {
                "image_id": e.image_id,
                "path": _relativize(e.image_path, base),
                "boxes": [[b.x, b.y, b.w, b.h] for b in e.gts],
            }
            if e.mask_path is not None:
                rec["mask_path"] = _relativize(e.mask_path, base)
            if e.shift is not None:
                rec["shift"] = list(e.shift)
            fh.write(json.dumps(rec) + "\n")


def _relativize(p: Path, base: Path) -> str:
    p = Path(p)
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)


def load_manifest(path) -> List[DatasetEntry]:
    path = Path(path)
    base = path.parent
    entries: List[DatasetEntry] = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            boxes = [Box(*map(float, b)) for b in rec["boxes"]]
            image_id = rec.get("image_id", f"image_{i:05d}")
            mask_path = rec.get("mask_path")
            shift = rec.get("shift")
            entries.append(
                DatasetEntry(
                    image_id=image_id,
                    image_path=base / rec["path"],
                    mask_path=base / mask_path if mask_path else None,
                    gts=GroundTruthSet(boxes=boxes, image_id=image_id),
                    shift=tuple(shift) if shift else None,
                )
            )
    return entries


def validate_dataset(entries: Sequence[DatasetEntry], require_masks: bool = True) -> None:
    """Fail fast with the full offender list when GT or masks are missing."""
    offenders = []
    for e in entries:
        if not e.gts:
            offenders.append(f"{e.image_id}: empty ground truth")
        if not Path(e.image_path).exists():
            offenders.append(f"{e.image_id}: missing image {e.image_path}")
        if require_masks:
            if e.mask_path is None:
                offenders.append(f"{e.image_id}: no mask sidecar recorded")
            elif not Path(e.mask_path).exists():
                offenders.append(f"{e.image_id}: missing mask {e.mask_path}")
    if offenders:
        raise ValueError("dataset validation failed:\n  " + "\n  ".join(offenders))


# ---------------------------------------------------------------------------
# Synthetic scenes: one bright square "face" on a mid-gray textured background
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    blob_sizes: Tuple[int, ...] = (14, 16, 18, 20)
    background_range: Tuple[float, float] = (0.40, 0.50)
    blob_range: Tuple[float, float] = (0.95, 1.0)
    noise: float = 0.01
    margin: int = 14  # keep the blob away from replicate-padding edge effects


def make_blob_scene(
    rng: np.random.Generator, spec: SceneSpec = SceneSpec(), blob_size: Optional[int] = None
) -> Tuple[np.ndarray, ForegroundMask, Box]:
    """Render one scene; returns (image (H,W,3), foreground mask, true blob box)."""
    n = spec.size
    bg = rng.uniform(*spec.background_range)
    blob_v = rng.uniform(*spec.blob_range)
    size = int(blob_size if blob_size is not None else rng.choice(spec.blob_sizes))
    lo, hi = spec.margin, n - size - spec.margin
    if hi < lo:
        raise ValueError(f"blob size {size} does not fit a {n}x{n} scene with margin {spec.margin}")
    x0 = int(rng.integers(lo, hi + 1))
    y0 = int(rng.integers(lo, hi + 1))
    img = np.full((n, n), bg, dtype=np.float64)
    img += rng.uniform(-spec.noise, spec.noise, size=(n, n))
    img[y0 : y0 + size, x0 : x0 + size] = blob_v + rng.uniform(
        -spec.noise, spec.noise, size=(size, size)
    )
    img = np.clip(img, 0.0, 1.0)
    mask = np.zeros((n, n), dtype=np.float64)
    mask[y0 : y0 + size, x0 : x0 + size] = 1.0
    box = Box(x0 + size / 2.0, y0 + size / 2.0, float(size), float(size))
    return np.repeat(img[:, :, None], 3, axis=2), ForegroundMask(values=mask), box


def generate_synthetic_dataset(
    out_dir: Path,
    count: int,
    seed: int,
    detector,
    scene_spec: SceneSpec = SceneSpec(),
) -> Path:
    """Render scenes, adopt the detector's clean detections as ground truth,
    drop undetected scenes, and write images + masks + manifest.jsonl."""
    from .detectors import detect

    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries: List[DatasetEntry] = []
    made = 0
    attempts = 0
    while made < count:
        attempts += 1
        if attempts > 20 * count + 100:
            raise RuntimeError("synthetic scene generation keeps producing undetectable scenes")
        img, mask, _ = make_blob_scene(rng, scene_spec)
        image_id = f"scene_{made:05d}"
        image_path = images_dir / f"{image_id}.png"
        save_image(image_path, img)
        # ground truth = detector output on the stored (quantized) frame
        dets = detect(detector, load_image(image_path))
        if not dets:
            image_path.unlink()
            continue
        mpath = mask_path_for(image_path)
        save_mask(mpath, mask)
        entries.append(
            DatasetEntry(
                image_id=image_id,
                image_path=image_path,
                mask_path=mpath,
                gts=GroundTruthSet(boxes=[d.box for d in dets], image_id=image_id),
            )
        )
        made += 1
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


class ImageCache:
    """Small in-memory cache of decoded images and masks keyed by path."""

    def __init__(self) -> None:
        self._images: Dict[str, np.ndarray] = {}
        self._masks: Dict[str, np.ndarray] = {}

    def image(self, path) -> np.ndarray:
        key = str(path)
        if key not in self._images:
            self._images[key] = load_image(path)
        return self._images[key]

    def mask(self, path) -> np.ndarray:
        from .patching import load_mask

        key = str(path)
        if key not in self._masks:
            self._masks[key] = load_mask(path).values
        return self._masks[key]
