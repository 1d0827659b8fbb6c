"""Obstruction evaluation: F/AP metrics, shifted datasets, positional heat-maps.

The F value is the harmonic mean of precision (TP / (TP + FP)) and recall
denominated by the ground-truth count (TP / GT). Average precision sweeps
a confidence-sorted precision/recall curve with all-points interpolation.
TP counting is literal and existential: every detection overlapping some
ground-truth box at the threshold counts, without one-to-one deduplication;
the deduplicated tally (distinct matched GT boxes) is reported alongside.

The coordinate-shifted dataset builder rolls each source frame on a fixed
stride grid so face positions cover the image uniformly, re-detects to get
per-sample ground truth, and drops samples the detector cannot find a face
in. Heat-maps bin TP/FN/FP occurrences by a box corner coordinate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .config import AttackConfig
from .datasets import (
    DatasetEntry,
    ImageCache,
    load_image,
    load_manifest,
    save_image,
    validate_dataset,
    write_manifest,
)
from .detectors import DetectorHandle, detect, get_detector, write_detections_jsonl
from .geometry import Detection, GroundTruthSet, MatchOutcome, classify, iou
from .patching import (
    ForegroundMask,
    Patch,
    load_mask,
    load_patch,
    mask_path_for,
    render_patched,
    save_mask,
)

logger = logging.getLogger(__name__)


@dataclass
class EvaluationReport:
    f_value: float
    ap: float
    gt_count: int
    tp_count: int
    fp_count: int
    matched_gt_count: int
    per_image: List[MatchOutcome] = field(default_factory=list)


@dataclass
class PositionalGrid:
    """TP/FN/FP frequency grids binned by a box corner coordinate."""

    tp: np.ndarray
    fn: np.ndarray
    fp: np.ndarray
    bin_size: int
    corner: str = "top_left"


@dataclass
class UniformDatasetSpec:
    source_images: List[Path]
    out_dir: Path
    stride: int = 25

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


@dataclass
class ReportRow:
    dataset: str
    method: str
    model: str
    f_value: float
    ap: float
    gt: int
    tp: int
    fp: int


def f_score(tp: int, fp: int, gt: int) -> float:
    """Harmonic mean of precision tp/(tp+fp) and recall tp/gt; 0 when tp=0."""
    if gt <= 0:
        raise ValueError(f"f_score needs a positive ground-truth count, got {gt}")
    if tp < 0 or fp < 0:
        raise ValueError("counts must be non-negative")
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / gt
    return 2.0 * precision * recall / (precision + recall)


def average_precision(
    records: Sequence[Tuple[Sequence[Detection], GroundTruthSet]], theta_d: float
) -> float:
    """Area under the all-points-interpolated precision/recall curve.

    Detections from all images are sorted by descending confidence. A
    detection counts toward precision when it overlaps some GT box at the
    threshold; recall counts distinct matched GT boxes so it stays in
    [0, 1] even though TP counting is not one-to-one.
    """
    total_gt = sum(len(gts) for _, gts in records)
    if total_gt == 0:
        raise ValueError("average_precision needs at least one ground-truth box")
    scored: List[Tuple[float, bool, frozenset]] = []
    for img_idx, (dets, gts) in enumerate(records):
        for det in dets:
            keys = [(img_idx, k) for k, g in enumerate(gts) if iou(det.box, g) >= theta_d]
            scored.append((det.confidence, bool(keys), frozenset(keys)))
    if not scored:
        return 0.0
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    matched: set = set()
    cum_tp = 0
    recalls: List[float] = []
    precisions: List[float] = []
    for rank, i in enumerate(order):
        _, is_tp, keys = scored[i]
        if is_tp:
            cum_tp += 1
            matched |= keys
        recalls.append(len(matched) / total_gt)
        precisions.append(cum_tp / (rank + 1))
    for k in range(len(precisions) - 2, -1, -1):
        precisions[k] = max(precisions[k], precisions[k + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, precisions):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def _patched_frame(
    entry: DatasetEntry, patch: Patch, cache: ImageCache, cfg: AttackConfig
) -> np.ndarray:
    image = torch.from_numpy(cache.image(entry.image_path))
    mask = torch.from_numpy(cache.mask(entry.mask_path))
    with torch.no_grad():
        out, _ = render_patched(
            image,
            entry.gts,
            torch.from_numpy(patch.pixels),
            mask,
            cfg.alpha,
            cfg.placement,
            cfg.tile_phase,
            cfg.fixed_origin,
        )
    return out.numpy()


def evaluate(
    dataset: Union[Path, str, Sequence[DatasetEntry]],
    patch: Optional[Patch],
    detector: DetectorHandle,
    cfg: AttackConfig,
    dump_dir: Optional[Path] = None,
) -> EvaluationReport:
    """Run the detector over the (optionally patched) dataset and aggregate
    TP/FP/GT counts, the F value, and average precision.

    With ``dump_dir`` set, per-image detections are written there as
    ``<image_id>.jsonl`` in the standard detection-dump format.
    """
    entries = list(load_manifest(dataset)) if isinstance(dataset, (str, Path)) else list(dataset)
    validate_dataset(entries, require_masks=patch is not None)
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
    cache = ImageCache()
    tp = fp = gt = matched = 0
    per_image: List[MatchOutcome] = []
    records: List[Tuple[List[Detection], GroundTruthSet]] = []
    for e in entries:
        if patch is None:
            frame = cache.image(e.image_path)
        else:
            frame = _patched_frame(e, patch, cache, cfg)
        dets = detect(detector, frame)
        if dump_dir is not None:
            write_detections_jsonl(dump_dir / f"{e.image_id}.jsonl", dets)
        outcome = classify(dets, e.gts, cfg.theta_d)
        per_image.append(outcome)
        records.append((dets, e.gts))
        tp += len(outcome.tp)
        fp += len(outcome.fp)
        gt += len(e.gts)
        matched += len(outcome.matched_gt)
    return EvaluationReport(
        f_value=f_score(tp, fp, gt),
        ap=average_precision(records, cfg.theta_d),
        gt_count=gt,
        tp_count=tp,
        fp_count=fp,
        matched_gt_count=matched,
        per_image=per_image,
    )


def make_uniform_dataset(spec: UniformDatasetSpec, detector: DetectorHandle) -> Path:
    """Build a coordinate-shifted dataset whose face positions tile the frame.

    Each source image is rolled circularly by every (i*stride, j*stride)
    shift covering the frame, the detector is run on each shifted frame,
    and samples with no detections are dropped. Ground truth per sample is
    the detector's own pre-patch output. Returns the manifest path.
    """
    out_dir = Path(spec.out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    entries: List[DatasetEntry] = []
    dropped = 0
    for src in spec.source_images:
        src = Path(src)
        image = load_image(src)
        if not detect(detector, image):
            logger.warning("source image %s has no detectable face; skipping", src)
            continue
        mask = load_mask(mask_path_for(src)).values
        h, w = image.shape[0], image.shape[1]
        nx = math.ceil(w / spec.stride)
        ny = math.ceil(h / spec.stride)
        for j in range(ny):
            for i in range(nx):
                dx, dy = i * spec.stride, j * spec.stride
                shifted = np.roll(image, shift=(dy, dx), axis=(0, 1))
                sample_id = f"{src.stem}_dx{dx:04d}_dy{dy:04d}"
                img_path = images_dir / f"{sample_id}.png"
                save_image(img_path, shifted)
                # pre-patch inference on the stored frame defines the ground truth
                dets = detect(detector, load_image(img_path))
                if not dets:
                    img_path.unlink()
                    dropped += 1
                    continue
                mpath = mask_path_for(img_path)
                save_mask(mpath, ForegroundMask(values=np.roll(mask, shift=(dy, dx), axis=(0, 1))))
                entries.append(
                    DatasetEntry(
                        image_id=sample_id,
                        image_path=img_path,
                        mask_path=mpath,
                        gts=GroundTruthSet(boxes=[d.box for d in dets], image_id=sample_id),
                        shift=(dx, dy),
                    )
                )
    if dropped:
        logger.info("dropped %d shifted samples with no detections", dropped)
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


def _corner_xy(box, corner: str) -> Tuple[float, float]:
    if corner == "top_left":
        return box.x - box.w / 2.0, box.y - box.h / 2.0
    if corner == "top_right":
        return box.x + box.w / 2.0, box.y - box.h / 2.0
    raise ValueError(f"unknown corner '{corner}'")


def positional_heatmaps(
    dataset: Union[Path, str, Sequence[DatasetEntry]],
    patch: Optional[Patch],
    detector: DetectorHandle,
    cfg: AttackConfig,
    bin_size: int = 25,
    corner: str = "top_left",
    out_dir: Optional[Path] = None,
) -> PositionalGrid:
    """Classify every sample and bin TP/FP (by detection corner) and FN (by
    GT corner) into frequency grids; optionally render heat-map PNGs."""
    entries = list(load_manifest(dataset)) if isinstance(dataset, (str, Path)) else list(dataset)
    if not entries:
        raise ValueError("positional_heatmaps needs a non-empty dataset")
    validate_dataset(entries, require_masks=patch is not None)
    cache = ImageCache()
    first = cache.image(entries[0].image_path)
    h, w = first.shape[0], first.shape[1]
    ny, nx = math.ceil(h / bin_size), math.ceil(w / bin_size)
    grids = {
        "tp": np.zeros((ny, nx), dtype=np.int64),
        "fn": np.zeros((ny, nx), dtype=np.int64),
        "fp": np.zeros((ny, nx), dtype=np.int64),
    }

    def _bin(box) -> Tuple[int, int]:
        x, y = _corner_xy(box, corner)
        return (
            min(max(int(y // bin_size), 0), ny - 1),
            min(max(int(x // bin_size), 0), nx - 1),
        )

    for e in entries:
        frame = cache.image(e.image_path) if patch is None else _patched_frame(e, patch, cache, cfg)
        dets = detect(detector, frame)
        outcome = classify(dets, e.gts, cfg.theta_d)
        for j, _ in outcome.tp:
            grids["tp"][_bin(dets[j].box)] += 1
        for j in outcome.fp:
            grids["fp"][_bin(dets[j].box)] += 1
        for k in outcome.fn:
            grids["fn"][_bin(e.gts.boxes[k])] += 1

    grid = PositionalGrid(tp=grids["tp"], fn=grids["fn"], fp=grids["fp"], bin_size=bin_size, corner=corner)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _render_heatmaps(grid, out_dir)
        _write_grids_csv(grid, out_dir / "grids.csv")
    return grid


def _render_heatmaps(grid: PositionalGrid, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name in ("tp", "fn", "fp"):
        data = getattr(grid, name)
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(data, cmap="viridis", origin="upper")
        ax.set_title(f"{name.upper()} frequency (bin={grid.bin_size}px)")
        ax.set_xlabel("x bin")
        ax.set_ylabel("y bin")
        fig.colorbar(im, ax=ax, shrink=0.8)
        fig.tight_layout()
        fig.savefig(out_dir / f"{name}.png", dpi=120)
        plt.close(fig)


def _write_grids_csv(grid: PositionalGrid, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "row", "col", "count"])
        for name in ("tp", "fn", "fp"):
            data = getattr(grid, name)
            for r in range(data.shape[0]):
                for c in range(data.shape[1]):
                    writer.writerow([name, r, c, int(data[r, c])])


def quadrant_fractions(grid: np.ndarray) -> np.ndarray:
    """Fraction of grid mass in each image quadrant (2x2, row-major order)."""
    total = grid.sum()
    ny, nx = grid.shape
    hy, hx = ny // 2, nx // 2
    quads = np.array(
        [
            grid[:hy, :hx].sum(),
            grid[:hy, hx:].sum(),
            grid[hy:, :hx].sum(),
            grid[hy:, hx:].sum(),
        ],
        dtype=np.float64,
    )
    if total == 0:
        return np.zeros(4)
    return quads / float(total)


def transfer_matrix(
    runs: Sequence,
    datasets: Dict[str, Path],
    detectors: Sequence[str],
    cfg: AttackConfig,
) -> List[ReportRow]:
    """Cross product of evaluate() calls: every trained patch against every
    dataset and detector. Row labels follow the train/test convention."""
    rows: List[ReportRow] = []
    for run in runs:
        patch, meta = load_patch(run.patch)
        method = Path(run.patch).stem
        for ds_name, manifest in datasets.items():
            for det_name in detectors:
                handle = get_detector(det_name)
                report = evaluate(manifest, patch, handle, cfg)
                rows.append(
                    ReportRow(
                        dataset=f"{run.train_dataset}/{ds_name}",
                        method=method,
                        model=det_name,
                        f_value=report.f_value,
                        ap=report.ap,
                        gt=report.gt_count,
                        tp=report.tp_count,
                        fp=report.fp_count,
                    )
                )
    return rows


def write_report_csv(path: Path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "model", "F", "AP", "GT", "TP", "FP"])
        for r in rows:
            writer.writerow(
                [r.dataset, r.method, r.model, f"{r.f_value:.6f}", f"{r.ap:.6f}", r.gt, r.tp, r.fp]
            )
